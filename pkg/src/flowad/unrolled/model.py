"""Forward pass of the unrolled networks U-tBSCA-AUG and AU-tBSCA-AUG.

Layer 1 is one iteration of the exact algorithm and layers ``2..L`` are
iterations of the augmented algorithm, each with its own learnable
regularization. The adaptive variant recomputes the weight tensors ``W`` and
``M`` before every layer from feature embeddings of the current iterates.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
import torch

from ..scenario import Observation
from ..solvers import FactorTriple, SolverState
from .embed import flow_features, link_features
from .ops import (
    CANONICAL,
    FAST,
    Contractor,
    as_t,
    cpd,
    khatri_rao,
    project,
    route,
    spd_solve_rows,
    unfold,
)
from .params import ModelParams


def default_rank(E: int, T1: int, T2: int) -> int:
    """Loose upper bound ``min(E*T1, E*T2, T1*T2)`` on the CPD rank."""
    if min(E, T1, T2) < 1:
        raise ValueError("dimensions must be positive")
    return min(E * T1, E * T2, T1 * T2)


def matrix_mode(obs: Observation) -> Observation:
    """Fold all time into the first time mode (``T2 = 1``)."""
    E, T1, T2 = obs.Y.shape
    flat = lambda t: np.reshape(t, (E, T1 * T2, 1), order="F")
    return Observation(flat(obs.Y), flat(obs.O), obs.R)


def tensor_mode(A, shape):
    """Inverse of :func:`matrix_mode` for a flow tensor ``(F, T1*T2, 1)`` (numpy or torch)."""
    F, T1, T2 = shape
    if tuple(A.shape) == (F, T1, T2):
        return A
    if tuple(A.shape) != (F, T1 * T2, 1):
        raise ValueError(f"cannot fold shape {tuple(A.shape)} into {tuple(shape)}")
    if isinstance(A, torch.Tensor):
        return A.reshape(F, T2, T1).permute(0, 2, 1)
    return np.reshape(A, (F, T1, T2), order="F")


def _link_key(seed: int, obs: Observation, j: int) -> int:
    """Seed for link ``j`` derived from its own data, independent of its label."""
    h = hashlib.sha256()
    h.update(int(seed).to_bytes(8, "little", signed=True))
    h.update(np.ascontiguousarray(obs.Y[j], dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(obs.O[j], dtype="<f8").tobytes())
    h.update(np.sort(obs.R[j]).astype("<f8").tobytes())
    return int.from_bytes(h.digest()[:8], "little")


def init_state(obs: Observation, R_cpd: int, seed: int) -> tuple[FactorTriple, np.ndarray]:
    """Random nonnegative factors scaled to the observed magnitude, and ``A = 0``.

    Entries are ``U(0, 1)`` times ``c = (mean observed Y / R_cpd)^(1/3)``. Rows
    of ``P`` are drawn from generators keyed by each link's own data, so
    relabeling links permutes ``P`` along with them.
    """
    if R_cpd < 1:
        raise ValueError("R_cpd must be at least 1")
    E, T1, T2 = obs.Y.shape
    observed = obs.Y[obs.O == 1]
    mean = math.fsum(observed.tolist()) / observed.size if observed.size else 0.0
    c = (max(mean, 0.0) / R_cpd) ** (1.0 / 3.0)
    rng = np.random.default_rng(seed)
    Q1 = c * rng.random((T1, R_cpd))
    Q2 = c * rng.random((T2, R_cpd))
    P = np.empty((E, R_cpd))
    for j in range(E):
        P[j] = c * np.random.default_rng(_link_key(seed, obs, j)).random(R_cpd)
    return FactorTriple(P, Q1, Q2), np.zeros((obs.R.shape[1], T1, T2))


def param_map(features, weights, bias, C: float, contractor: Contractor = FAST):
    """Affine body followed by the bounded head ``exp(C * tanh(body / C))``."""
    if not C > 0:
        raise ValueError("C must be positive")
    feats, w = as_t(features), as_t(weights)
    body = contractor.sum_last(feats * w, 1) + as_t(bias)
    return contractor.apply("exp", C * contractor.apply("tanh", body / C))


# --------------------------------------------------------------------------
# layer kernels


def _ridge_rows(Cn: Contractor, w, target, K, lam):
    G = Cn.einsum("nt,tr,ts->nrs", w, K, K) + lam * torch.eye(K.shape[1], dtype=K.dtype)
    b = Cn.einsum("nt,tr->nr", w * target, K)
    return spd_solve_rows(G, b)


def _anomaly_update(Cn: Contractor, Y, Ow2, R, X, A0, M):
    resid = Y - X - route(Cn, R, A0)
    D = project(Cn, R * R, Ow2)
    num = project(Cn, R, Ow2 * resid) + D * A0
    shrunk = torch.sign(num) * torch.relu(num.abs() - M)
    pos = D > 0
    A_tilde = torch.where(pos, shrunk / torch.where(pos, D, torch.ones_like(D)), A0)
    d = route(Cn, R, A_tilde - A0)
    denom = Cn.sum_all(Ow2 * d * d)
    if float(denom.detach()) == 0.0:
        return A0, torch.zeros((), dtype=A0.dtype)
    l1 = Cn.sum_all((M * A_tilde).abs()) - Cn.sum_all((M * A0).abs())
    gamma = torch.clamp((Cn.sum_all(Ow2 * resid * d) - l1) / denom, 0.0, 1.0)
    return A0 + gamma * (A_tilde - A0), gamma


def td_layer(Cn, Y, Ow2, R, M, lam, P, Q1, Q2, A):
    target = Y - route(Cn, R, A)
    P = _ridge_rows(Cn, unfold(Ow2, 1), unfold(target, 1), khatri_rao(Q2, Q1), lam)
    Q1 = _ridge_rows(Cn, unfold(Ow2, 2), unfold(target, 2), khatri_rao(Q2, P), lam)
    Q2 = _ridge_rows(Cn, unfold(Ow2, 3), unfold(target, 3), khatri_rao(Q1, P), lam)
    X = cpd(Cn, P, Q1, Q2)
    A, gamma = _anomaly_update(Cn, Y, Ow2, R, X, A, M)
    return P, Q1, Q2, X, A, gamma


def _xtilde(Cn, base, Ow2, nu, P, Q1, Q2, nonneg):
    Xt = (base + nu * cpd(Cn, P, Q1, Q2)) / (Ow2 + nu)
    return torch.relu(Xt) if nonneg else Xt


def _als_rows(Cn, Xt, mode, F1, F2, K, lam, nu):
    gram = Cn.einsum("nr,ns->rs", F1, F1) * Cn.einsum("nr,ns->rs", F2, F2)
    G = gram + (lam / nu) * torch.eye(K.shape[1], dtype=K.dtype)
    rhs = Cn.einsum("nt,tr->nr", unfold(Xt, mode), K)
    return spd_solve_rows(G.expand(rhs.shape[0], -1, -1), rhs)


def aug_layer(Cn, Y, Ow2, R, M, lam, nu, P, Q1, Q2, A, nonneg=False):
    base = Ow2 * (Y - route(Cn, R, A))
    Xt = _xtilde(Cn, base, Ow2, nu, P, Q1, Q2, nonneg)
    P = _als_rows(Cn, Xt, 1, Q1, Q2, khatri_rao(Q2, Q1), lam, nu)
    Q1 = _als_rows(Cn, Xt, 2, P, Q2, khatri_rao(Q2, P), lam, nu)
    Q2 = _als_rows(Cn, Xt, 3, P, Q1, khatri_rao(Q1, P), lam, nu)
    Xt = _xtilde(Cn, base, Ow2, nu, P, Q1, Q2, nonneg)
    A, gamma = _anomaly_update(Cn, Y, Ow2, R, Xt, A, M)
    return P, Q1, Q2, Xt, A, gamma


# --------------------------------------------------------------------------
# forward


def _layer_weights(model: ModelParams, theta: torch.Tensor, ell: int):
    s = model.slices()
    p = f"layer{ell}"
    get = lambda name: theta[s[name]]
    out = {"log_lambda": get(f"{p}.log_lambda")[0]}
    if ell >= 2:
        out["log_nu"] = get(f"{p}.log_nu")[0]
    if not model.adaptive:
        out["log_mu"] = get(f"{p}.log_mu")[0]
    else:
        src = "shared" if model.coupled else p
        for kind in ("w_map", "m_map"):
            out[kind] = (get(f"{src}.{kind}.weights"), get(f"{src}.{kind}.bias")[0])
    return out


def forward_torch(obs: Observation, model: ModelParams, theta=None, *, seed: int = 0,
                  R_cpd: int | None = None, init=None, contractor: Contractor = FAST,
                  record: bool = False) -> dict:
    """Run the network; returns a dict of torch tensors.

    ``theta`` (flattened weights, possibly requiring grad) defaults to
    ``model.flatten()``. With ``record`` the per-layer ``A``, ``Xtilde`` (or
    ``X`` for layer 1), ``W``, ``M`` and ``gamma`` are kept in ``"layers"``.
    """
    Cn = contractor
    E, T1, T2 = obs.Y.shape
    if theta is None:
        theta = as_t(model.flatten())
    if init is None:
        init = init_state(obs, R_cpd or default_rank(E, T1, T2), seed)
    factors, A0 = init
    Y, O, R = as_t(obs.Y), as_t(obs.O), as_t(obs.R)
    P, Q1, Q2, A = (as_t(x) for x in (factors.P, factors.Q1, factors.Q2, A0))
    X = cpd(Cn, P, Q1, Q2)
    layers = []
    gammas = []
    for ell in range(1, model.n_layers + 1):
        wts = _layer_weights(model, theta, ell)
        lam = Cn.apply("exp", wts["log_lambda"])
        if model.adaptive:
            W = param_map(link_features(Cn, Y, O, R, X), *wts["w_map"], model.C, Cn)
            M = param_map(flow_features(Cn, Y, O, R, X, A), *wts["m_map"], model.C, Cn)
            M = M + model.m_bias
            Ow = O * W
        else:
            W = None
            M = Cn.apply("exp", wts["log_mu"]) + model.m_bias
            Ow = O
        Ow2 = Ow * Ow
        if ell == 1:
            P, Q1, Q2, X, A, gamma = td_layer(Cn, Y, Ow2, R, M, lam, P, Q1, Q2, A)
        else:
            nu = Cn.apply("exp", wts["log_nu"])
            P, Q1, Q2, X, A, gamma = aug_layer(Cn, Y, Ow2, R, M, lam, nu, P, Q1, Q2, A,
                                               model.nonneg)
        gammas.append(gamma)
        if record:
            layers.append({"A": A, "X": X, "W": W, "M": M, "gamma": gamma})
    return {"A": A, "P": P, "Q1": Q1, "Q2": Q2, "X": X, "gammas": gammas, "layers": layers}


def forward(obs: Observation, model: ModelParams, seed: int = 0, *, R_cpd: int | None = None,
            init=None, canonical: bool = False) -> SolverState:
    """Deterministic forward pass returning numpy iterates.

    ``canonical=True`` uses order-independent reductions so that relabeling
    links or flows permutes the output exactly.
    """
    with torch.no_grad():
        out = forward_torch(obs, model, seed=seed, R_cpd=R_cpd, init=init,
                            contractor=CANONICAL if canonical else FAST)
    factors = FactorTriple(out["P"].numpy(), out["Q1"].numpy(), out["Q2"].numpy())
    return SolverState(
        factors=factors,
        A=out["A"].numpy(),
        Xtilde=out["X"].numpy() if model.n_layers >= 2 else None,
        gamma_trace=[float(g) for g in out["gammas"]],
    )
