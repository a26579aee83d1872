"""Block successive convex approximation solvers for low-rank + sparse recovery.

``tbsca_ad`` minimizes

    f_td = 1/2 ||Ow * (Y - [[P, Q1, Q2]] - A x_1 R)||^2
           + lam/2 (||P||^2 + ||Q1||^2 + ||Q2||^2) + ||M * A||_1

with ``Ow = O * W``; ``tbsca_ad_aug`` minimizes the augmented objective in
which an auxiliary tensor ``Xt`` replaces the CPD in the fit term and is tied to
it by ``nu/2 ||Xt - [[P, Q1, Q2]]||^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .scenario import Observation
from .tensor_core import (
    DimensionError,
    cpd_reconstruct,
    khatri_rao,
    mode_product,
    refold,
    soft_threshold,
    solve_spd,
    unfold,
)


@dataclass(frozen=True)
class FactorTriple:
    P: np.ndarray
    Q1: np.ndarray
    Q2: np.ndarray

    def __post_init__(self):
        if not self.P.shape[1] == self.Q1.shape[1] == self.Q2.shape[1]:
            raise DimensionError("factor matrices must share their column count")

    @property
    def rank(self) -> int:
        return self.P.shape[1]

    def reconstruct(self) -> np.ndarray:
        return cpd_reconstruct(self.P, self.Q1, self.Q2)

    def with_mode(self, mode: int, value: np.ndarray) -> "FactorTriple":
        return replace(self, **{("P", "Q1", "Q2")[mode - 1]: value})

    def sq_norm(self) -> float:
        return float((self.P**2).sum() + (self.Q1**2).sum() + (self.Q2**2).sum())


@dataclass(frozen=True)
class RegParams:
    """Regularization: ``lam`` (rank), ``M`` (sparsity weights), ``W`` (fit weights), ``nu``.

    ``M`` and ``W`` may be scalars; they broadcast against the flow and link
    tensors respectively.
    """

    lam: float
    M: np.ndarray | float = 1.0
    W: np.ndarray | float = 1.0
    nu: float = 1.0

    def weighted_mask(self, obs: Observation) -> np.ndarray:
        return obs.O * self.W


@dataclass
class SolverState:
    factors: FactorTriple
    A: np.ndarray
    Xtilde: np.ndarray | None = None
    objective_trace: list[float] = field(default_factory=list)
    gamma_trace: list[float] = field(default_factory=list)


def _check_shapes(obs: Observation, factors: FactorTriple, A: np.ndarray) -> None:
    E, T1, T2 = obs.Y.shape
    if obs.O.shape != obs.Y.shape or obs.R.shape[0] != E:
        raise DimensionError("inconsistent observation shapes")
    if A.shape != (obs.R.shape[1], T1, T2):
        raise DimensionError(f"anomaly tensor has shape {A.shape}")
    if (factors.P.shape[0], factors.Q1.shape[0], factors.Q2.shape[0]) != (E, T1, T2):
        raise DimensionError("factor row counts do not match the observation")


def _l1(M, A) -> float:
    return float(np.abs(M * A).sum())


def objective_td(obs: Observation, factors: FactorTriple, A: np.ndarray, reg: RegParams) -> float:
    _check_shapes(obs, factors, A)
    Ow = reg.weighted_mask(obs)
    fit = Ow * (obs.Y - factors.reconstruct() - mode_product(A, obs.R, 1))
    return 0.5 * float((fit**2).sum()) + 0.5 * reg.lam * factors.sq_norm() + _l1(reg.M, A)


def objective_aug(obs: Observation, Xtilde: np.ndarray, factors: FactorTriple,
                  A: np.ndarray, reg: RegParams) -> float:
    _check_shapes(obs, factors, A)
    if Xtilde.shape != obs.Y.shape:
        raise DimensionError("Xtilde must match the link tensor shape")
    Ow = reg.weighted_mask(obs)
    fit = Ow * (obs.Y - Xtilde - mode_product(A, obs.R, 1))
    tie = Xtilde - factors.reconstruct()
    return (0.5 * float((fit**2).sum()) + 0.5 * reg.nu * float((tie**2).sum())
            + 0.5 * reg.lam * factors.sq_norm() + _l1(reg.M, A))


# --------------------------------------------------------------------------
# block updates


def _khatri_rao_for(mode: int, factors: FactorTriple) -> np.ndarray:
    P, Q1, Q2 = factors.P, factors.Q1, factors.Q2
    return {1: lambda: khatri_rao(Q2, Q1),
            2: lambda: khatri_rao(Q2, P),
            3: lambda: khatri_rao(Q1, P)}[mode]()


def factor_update_td(mode: int, obs: Observation, factors: FactorTriple,
                     A: np.ndarray, reg: RegParams) -> np.ndarray:
    """Exact minimizer of ``f_td`` over factor ``mode`` (1: P, 2: Q1, 3: Q2)."""
    if reg.lam <= 0:
        raise ValueError("lam must be positive for the per-slice ridge systems")
    _check_shapes(obs, factors, A)
    K = _khatri_rao_for(mode, factors)
    Ow = np.broadcast_to(reg.weighted_mask(obs), obs.Y.shape)
    w = unfold(Ow, mode) ** 2
    target = unfold(obs.Y - mode_product(A, obs.R, 1), mode)
    eye = reg.lam * np.eye(K.shape[1])
    rows = []
    for n in range(w.shape[0]):
        Kw = K.T * w[n]
        rows.append(solve_spd(Kw @ K + eye, Kw @ target[n]))
    return np.array(rows).reshape(w.shape[0], K.shape[1])


def anomaly_direction(obs: Observation, X: np.ndarray, A0: np.ndarray, reg: RegParams) -> np.ndarray:
    """Closed-form minimizer of the per-flow separable approximation.

    Flows seen by no observed link (zero denominator) keep their current value.
    """
    R = obs.R
    Ow2 = reg.weighted_mask(obs) ** 2
    Ow2 = np.broadcast_to(Ow2, obs.Y.shape)
    resid = obs.Y - X - mode_product(A0, R, 1)
    D = mode_product(Ow2, (R * R).T, 1)
    num = mode_product(Ow2 * resid, R.T, 1) + D * A0
    shrunk = soft_threshold(num, np.broadcast_to(reg.M, num.shape))
    out = A0.copy()
    nz = D > 0
    out[nz] = shrunk[nz] / D[nz]
    return out


def step_size(obs: Observation, X: np.ndarray, A_tilde: np.ndarray,
              A0: np.ndarray, reg: RegParams) -> float:
    """Minimizer over [0, 1] of the convex majorizer along ``A0 + g (A_tilde - A0)``.

    The majorizer is ``g (||M A_tilde||_1 - ||M A0||_1) + 1/2 ||Ow (r - g d)||^2``
    with ``r = Y - X - A0 x_1 R`` and ``d = (A_tilde - A0) x_1 R``.
    """
    Ow2 = reg.weighted_mask(obs) ** 2
    d = mode_product(A_tilde - A0, obs.R, 1)
    denom = float((Ow2 * d * d).sum())
    if denom == 0.0:
        return 0.0
    resid = obs.Y - X - mode_product(A0, obs.R, 1)
    numer = float((Ow2 * resid * d).sum()) - (_l1(reg.M, A_tilde) - _l1(reg.M, A0))
    return float(min(max(numer / denom, 0.0), 1.0))


def majorizer(obs: Observation, X: np.ndarray, A_tilde: np.ndarray, A0: np.ndarray,
              reg: RegParams, gamma: float) -> float:
    """Value of the step-size majorizer at ``gamma``."""
    Ow = reg.weighted_mask(obs)
    A = A0 + gamma * (A_tilde - A0)
    fit = Ow * (obs.Y - X - mode_product(A, obs.R, 1))
    return gamma * (_l1(reg.M, A_tilde) - _l1(reg.M, A0)) + 0.5 * float((fit**2).sum())


def anomaly_update(obs: Observation, X: np.ndarray, A0: np.ndarray,
                   reg: RegParams) -> tuple[np.ndarray, float]:
    A_tilde = anomaly_direction(obs, X, A0, reg)
    gamma = step_size(obs, X, A_tilde, A0, reg)
    return A0 + gamma * (A_tilde - A0), gamma


def xtilde_update(obs: Observation, factors: FactorTriple, A: np.ndarray,
                  reg: RegParams, nonneg: bool = False) -> np.ndarray:
    if reg.nu <= 0:
        raise ValueError("nu must be positive")
    Ow2 = reg.weighted_mask(obs) ** 2
    X = (Ow2 * (obs.Y - mode_product(A, obs.R, 1)) + reg.nu * factors.reconstruct()) / (Ow2 + reg.nu)
    return np.maximum(X, 0.0) if nonneg else X


def factor_update_aug(mode: int, Xtilde: np.ndarray, factors: FactorTriple,
                      reg: RegParams) -> np.ndarray:
    """Regularized ALS update of one factor against the auxiliary tensor."""
    if reg.nu <= 0 or reg.lam < 0:
        raise ValueError("require nu > 0 and lam >= 0")
    P, Q1, Q2 = factors.P, factors.Q1, factors.Q2
    grams = {1: (Q1.T @ Q1) * (Q2.T @ Q2),
             2: (P.T @ P) * (Q2.T @ Q2),
             3: (P.T @ P) * (Q1.T @ Q1)}
    G = grams[mode] + (reg.lam / reg.nu) * np.eye(factors.rank)
    rhs = unfold(Xtilde, mode) @ _khatri_rao_for(mode, factors)
    if Xtilde.shape[mode - 1] != rhs.shape[0]:
        raise DimensionError("Xtilde does not match the factor dimensions")
    return solve_spd(G, rhs.T).T


# --------------------------------------------------------------------------
# algorithms


def td_iteration(obs: Observation, factors: FactorTriple, A: np.ndarray, reg: RegParams,
                 freeze_q2: bool = False) -> tuple[FactorTriple, np.ndarray, float]:
    """One full iteration of the exact (non-augmented) algorithm."""
    for mode in (1, 2) if freeze_q2 else (1, 2, 3):
        factors = factors.with_mode(mode, factor_update_td(mode, obs, factors, A, reg))
    A, gamma = anomaly_update(obs, factors.reconstruct(), A, reg)
    return factors, A, gamma


def aug_iteration(obs: Observation, factors: FactorTriple, A: np.ndarray, reg: RegParams,
                  nonneg: bool = False) -> tuple[np.ndarray, FactorTriple, np.ndarray, float]:
    """One iteration of the augmented algorithm; returns ``(Xtilde, factors, A, gamma)``."""
    Xt = xtilde_update(obs, factors, A, reg, nonneg)
    for mode in (1, 2, 3):
        factors = factors.with_mode(mode, factor_update_aug(mode, Xt, factors, reg))
    Xt = xtilde_update(obs, factors, A, reg, nonneg)
    A, gamma = anomaly_update(obs, Xt, A, reg)
    return Xt, factors, A, gamma


def _converged(trace: list[float], tol: float | None) -> bool:
    if tol is None or len(trace) < 2:
        return False
    prev, cur = trace[-2], trace[-1]
    return abs(prev - cur) <= tol * max(abs(prev), 1e-300)


def tbsca_ad(obs: Observation, reg: RegParams, L: int, init: tuple[FactorTriple, np.ndarray], *,
             freeze_q2: bool = False, tol: float | None = None,
             callback: Callable[[int, SolverState], None] | None = None) -> SolverState:
    """Exact BSCA algorithm for ``f_td``; runs ``L`` iterations (or until ``tol``).

    With ``freeze_q2`` the third factor is never updated, which with ``T2 = 1``
    and ``Q2 = 1`` reduces to the matrix factorization recursion.
    """
    if L < 1:
        raise ValueError("L must be at least 1")
    factors, A = init
    _check_shapes(obs, factors, A)
    state = SolverState(factors, np.array(A, dtype=np.float64))
    for ell in range(1, L + 1):
        state.factors, state.A, gamma = td_iteration(obs, state.factors, state.A, reg, freeze_q2)
        state.gamma_trace.append(gamma)
        state.objective_trace.append(objective_td(obs, state.factors, state.A, reg))
        if callback is not None:
            callback(ell, state)
        if _converged(state.objective_trace, tol):
            break
    return state


def tbsca_ad_aug(obs: Observation, reg: RegParams, L: int, init: tuple[FactorTriple, np.ndarray], *,
                 nonneg: bool = False, tol: float | None = None,
                 callback: Callable[[int, SolverState], None] | None = None) -> SolverState:
    """Augmented BSCA algorithm; the first iteration is an exact iteration.

    ``objective_trace`` holds ``f_aug`` at the end of iterations ``2..L``.
    """
    if L < 1:
        raise ValueError("L must be at least 1")
    factors, A = init
    _check_shapes(obs, factors, A)
    state = SolverState(factors, np.array(A, dtype=np.float64))
    for ell in range(1, L + 1):
        if ell == 1:
            state.factors, state.A, gamma = td_iteration(obs, state.factors, state.A, reg)
        else:
            state.Xtilde, state.factors, state.A, gamma = aug_iteration(
                obs, state.factors, state.A, reg, nonneg)
            state.objective_trace.append(
                objective_aug(obs, state.Xtilde, state.factors, state.A, reg))
        state.gamma_trace.append(gamma)
        if callback is not None:
            callback(ell, state)
        if _converged(state.objective_trace, tol):
            break
    return state


def bsca_ad_matrix(Y: np.ndarray, O: np.ndarray, R: np.ndarray, lam: float, M, W,
                   L: int, P: np.ndarray, Q: np.ndarray, A: np.ndarray,
                   callback: Callable[[int, np.ndarray, np.ndarray, np.ndarray], None] | None = None):
    """Matrix-factorization recursion on ``E x T`` link data with ``X = P Q^T``.

    Each iteration solves the per-row ridge systems for ``P`` and ``Q`` and then
    takes the same thresholded direction and majorizer step for ``A`` (``F x T``).
    Returns the final ``(P, Q, A)``.
    """
    Ow2 = (O * W) ** 2
    Ow2 = np.broadcast_to(Ow2, Y.shape)
    M = np.broadcast_to(M, A.shape)
    eye = lam * np.eye(P.shape[1])
    for ell in range(1, L + 1):
        target = Y - R @ A
        P = np.array([solve_spd((Q.T * Ow2[j]) @ Q + eye, (Q.T * Ow2[j]) @ target[j])
                      for j in range(Y.shape[0])]).reshape(P.shape)
        Q = np.array([solve_spd((P.T * Ow2[:, t]) @ P + eye, (P.T * Ow2[:, t]) @ target[:, t])
                      for t in range(Y.shape[1])]).reshape(Q.shape)
        X = P @ Q.T
        resid = Y - X - R @ A
        D = (R * R).T @ Ow2
        num = R.T @ (Ow2 * resid) + D * A
        shrunk = np.sign(num) * np.maximum(np.abs(num) - M, 0.0)
        A_tilde = A.copy()
        nz = D > 0
        A_tilde[nz] = shrunk[nz] / D[nz]
        d = R @ (A_tilde - A)
        denom = float((Ow2 * d * d).sum())
        gamma = 0.0
        if denom > 0:
            numer = float((Ow2 * resid * d).sum()) - (np.abs(M * A_tilde).sum() - np.abs(M * A).sum())
            gamma = min(max(numer / denom, 0.0), 1.0)
        A = A + gamma * (A_tilde - A)
        if callback is not None:
            callback(ell, P, Q, A)
    return P, Q, A


__all__ = [
    "FactorTriple", "RegParams", "SolverState", "objective_td", "objective_aug",
    "factor_update_td", "anomaly_direction", "step_size", "majorizer", "anomaly_update",
    "xtilde_update", "factor_update_aug", "td_iteration", "aug_iteration",
    "tbsca_ad", "tbsca_ad_aug", "bsca_ad_matrix", "refold",
]
