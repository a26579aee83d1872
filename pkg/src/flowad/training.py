"""Empirical-risk training of the unrolled models and classical baselines.

The loss is the negated subsampled beta-soft AUC averaged over a minibatch.
Gradients come from reverse-mode autodiff through the forward pass by
default; :func:`grad_estimate` provides central finite differences with the
same interface for checks and for losses that are not differentiable.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import metrics
from .scenario import Scenario
from .solvers import RegParams, tbsca_ad, tbsca_ad_aug
from .unrolled.model import default_rank, forward, forward_torch, init_state, tensor_mode
from .unrolled.ops import as_t
from .unrolled.params import ModelParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, schedule and loss settings.

    The learning rate decays piecewise-constantly over ``lr_segments`` equal
    spans by ``lr_decay`` per span; weight decay drops from ``wd0`` to ``wd1``
    at ``wd_drop`` (a fraction of ``n_steps`` when below 1). ``beta`` grows
    geometrically from ``beta0`` at step ``i0`` to ``beta1`` at ``i1``.
    """

    n_steps: int = 500
    batch_size: int = 5
    lr0: float = 0.01
    lr_decay: float = 0.25
    lr_segments: int = 6
    wd0: float = 0.05
    wd1: float = 0.01
    wd_drop: float = 0.7
    beta0: float = 10.0
    i0: int = 100
    beta1: float = 100.0
    i1: int = 300
    K_sub: int = 8
    seed: int = 0
    fd_step: float = 1e-4
    eval_every: int = 50
    gradient: str = "autograd"
    init_seed: int = 0

    def __post_init__(self):
        if self.n_steps < 0 or self.batch_size < 1 or self.K_sub < 1:
            raise ValueError("n_steps >= 0, batch_size >= 1 and K_sub >= 1 required")
        if self.n_steps > 0 and not (0 <= self.i0 < self.i1 <= self.n_steps):
            raise ValueError("need 0 <= i0 < i1 <= n_steps")
        if min(self.lr0, self.beta0, self.beta1, self.fd_step) <= 0 or self.lr_segments < 1:
            raise ValueError("learning rate, beta, fd_step and lr_segments must be positive")
        if min(self.wd0, self.wd1, self.lr_decay) < 0:
            raise ValueError("weight decay and lr decay must be nonnegative")
        if self.gradient not in ("autograd", "fd"):
            raise ValueError("gradient must be 'autograd' or 'fd'")

    def wd_drop_step(self) -> int:
        return int(round(self.wd_drop * self.n_steps)) if self.wd_drop < 1 else int(self.wd_drop)


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n))

    def save(self, path) -> None:
        """JSON sidecar; floats are written with ``repr`` and reload bit-exactly."""
        doc = {"format_version": "1", "step": self.step, "beta1": self.beta1,
               "beta2": self.beta2, "eps": self.eps, "m": self.m.tolist(), "v": self.v.tolist()}
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "OptimizerState":
        doc = json.loads(Path(path).read_text())
        if doc.get("format_version") != "1":
            raise ValueError("unsupported optimizer state format")
        return cls(np.array(doc["m"], dtype=np.float64), np.array(doc["v"], dtype=np.float64),
                   int(doc["step"]), doc["beta1"], doc["beta2"], doc["eps"])


# --------------------------------------------------------------------------
# schedules


def beta_schedule(i: int, cfg: TrainConfig) -> float:
    if i <= cfg.i0:
        return cfg.beta0
    if i >= cfg.i1:
        return cfg.beta1
    frac = (i - cfg.i0) / (cfg.i1 - cfg.i0)
    return cfg.beta0 * (cfg.beta1 / cfg.beta0) ** frac


def lr_schedule(i: int, cfg: TrainConfig) -> float:
    if cfg.n_steps == 0:
        return cfg.lr0
    seg = min(int(cfg.lr_segments * i / cfg.n_steps), cfg.lr_segments - 1)
    return cfg.lr0 * cfg.lr_decay**seg


def wd_schedule(i: int, cfg: TrainConfig) -> float:
    return cfg.wd0 if i < cfg.wd_drop_step() else cfg.wd1


# --------------------------------------------------------------------------
# optimizer


def adamw_step(opt: OptimizerState, theta, grad, lr: float, wd: float):
    """One AdamW update with decoupled weight decay; returns ``(theta', opt')``."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if theta.shape != grad.shape or theta.shape != opt.m.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    t = opt.step + 1
    m = opt.beta1 * opt.m + (1 - opt.beta1) * grad
    v = opt.beta2 * opt.v + (1 - opt.beta2) * grad * grad
    m_hat = m / (1 - opt.beta1**t)
    v_hat = v / (1 - opt.beta2**t)
    new = theta - lr * m_hat / (np.sqrt(v_hat) + opt.eps) - lr * wd * theta
    return new, replace(opt, m=m, v=v, step=t)


# --------------------------------------------------------------------------
# loss and gradients


@dataclass
class Batch:
    """Scenarios prepared for repeated forward passes (fixed initial states)."""

    scenarios: list[Scenario]
    inits: list
    R_cpd: list[int]

    @classmethod
    def build(cls, scenarios: Sequence[Scenario], seed: int = 0, R_cpd: int | None = None,
              transform: Callable | None = None) -> "Batch":
        scen = list(scenarios)
        ranks, inits = [], []
        for s in scen:
            obs = transform(s.observation) if transform else s.observation
            r = R_cpd or default_rank(*obs.Y.shape)
            ranks.append(r)
            inits.append(init_state(obs, r, seed))
        return cls(scen, inits, ranks)


@dataclass
class _Prepared:
    obs: object
    init: tuple
    truth: np.ndarray
    k: int


def _prepare(batch: Batch, K_sub: int, transform: Callable | None) -> list[_Prepared]:
    out = []
    for s, init in zip(batch.scenarios, batch.inits):
        n_pos = int(s.truth.sum())
        n_neg = s.truth.size - n_pos
        if n_pos == 0 or n_neg == 0:
            log.warning("skipping scenario without both labeled classes")
            continue
        obs = transform(s.observation) if transform else s.observation
        out.append(_Prepared(obs, init, s.truth, min(K_sub, n_pos, n_neg)))
    if not out:
        raise ValueError("no scenario in the batch has anomalies")
    return out


def _scenario_loss(model, theta, item: _Prepared, beta, counter=None):
    out = forward_torch(item.obs, model, theta, init=item.init)
    A = tensor_mode(out["A"], item.truth.shape)
    scores = metrics.normalize_scores(A)
    return -metrics.subsampled_soft_auc(scores, item.truth, beta, item.k, counter)


def loss(model: ModelParams, batch: Batch, beta: float, K_sub: int, theta=None,
         transform: Callable | None = None) -> float:
    """Negated mean subsampled soft AUC of the model over the batch."""
    items = _prepare(batch, K_sub, transform)
    th = as_t(model.flatten() if theta is None else theta)
    with torch.no_grad():
        vals = [float(_scenario_loss(model, th, it, beta)) for it in items]
    return math.fsum(vals) / len(vals)


def loss_and_grad(model: ModelParams, batch: Batch, beta: float, K_sub: int, theta=None,
                  transform: Callable | None = None) -> tuple[float, np.ndarray]:
    """Loss and its exact gradient by reverse-mode differentiation."""
    items = _prepare(batch, K_sub, transform)
    th = as_t(model.flatten() if theta is None else theta).clone().requires_grad_(True)
    total = torch.stack([_scenario_loss(model, th, it, beta) for it in items]).mean()
    total.backward()
    grad = th.grad.numpy().copy()
    bad = ~np.isfinite(grad)
    if bad.any():
        log.warning("zeroing %d non-finite gradient entries", int(bad.sum()))
        grad[bad] = 0.0
    return float(total.detach()), grad


@dataclass
class FDStats:
    evaluations: int = 0
    saturated: int = 0


def grad_estimate(loss_fn: Callable[[np.ndarray], float], theta, fd_step: float = 1e-4,
                  stats: FDStats | None = None) -> np.ndarray:
    """Central finite differences with step ``fd_step * max(|theta_k|, 1)``.

    A coordinate whose probes give a non-finite loss gets gradient 0 and is
    counted in ``stats.saturated``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    stats = stats if stats is not None else FDStats()
    grad = np.zeros_like(theta)
    for k in range(theta.size):
        h = fd_step * max(abs(theta[k]), 1.0)
        up, dn = theta.copy(), theta.copy()
        up[k] += h
        dn[k] -= h
        f_up, f_dn = loss_fn(up), loss_fn(dn)
        stats.evaluations += 2
        if not (math.isfinite(f_up) and math.isfinite(f_dn)):
            stats.saturated += 1
            continue
        grad[k] = (f_up - f_dn) / (up[k] - dn[k])
    return grad


# --------------------------------------------------------------------------
# evaluation and training


def evaluate(model: ModelParams, dataset: Sequence[Scenario] | Batch, seed: int = 0,
             transform: Callable | None = None) -> list[float]:
    """Exact AUC of the model's normalized scores on every scenario with both classes."""
    batch = dataset if isinstance(dataset, Batch) else Batch.build(dataset, seed, transform=transform)
    aucs = []
    for s, init in zip(batch.scenarios, batch.inits):
        if 0 < s.truth.sum() < s.truth.size:
            obs = transform(s.observation) if transform else s.observation
            A = tensor_mode(forward(obs, model, init=init).A, s.truth.shape)
            aucs.append(metrics.auc(metrics.normalize_scores(A), s.truth))
    return aucs


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    optimizer: OptimizerState | None = None


def train(dataset: Sequence[Scenario], model: ModelParams, cfg: TrainConfig,
          val_set: Sequence[Scenario] | None = None, transform: Callable | None = None) -> TrainResult:
    """Minibatch AdamW on the soft-AUC risk; deterministic given ``cfg.seed``."""
    if not dataset:
        raise ValueError("empty training set")
    full = Batch.build(dataset, cfg.init_seed, transform=transform)
    val = Batch.build(val_set, cfg.init_seed, transform=transform) if val_set else None
    theta = model.flatten()
    opt = OptimizerState.zeros(theta.size)
    rng = np.random.default_rng(cfg.seed)
    order, pos = rng.permutation(len(full.scenarios)), 0
    history = []

    def val_auc(th):
        if val is None:
            return None
        return float(np.mean(evaluate(model.with_vector(th), val, transform=transform)))

    if cfg.n_steps > 0 and val is not None:
        history.append({"step": 0, "loss": None, "val_auc": val_auc(theta)})
    for i in range(cfg.n_steps):
        idx = []
        while len(idx) < min(cfg.batch_size, len(full.scenarios)):
            if pos == len(order):
                order, pos = rng.permutation(len(full.scenarios)), 0
            idx.append(order[pos])
            pos += 1
        batch = Batch([full.scenarios[k] for k in idx], [full.inits[k] for k in idx],
                      [full.R_cpd[k] for k in idx])
        beta = beta_schedule(i, cfg)
        if cfg.gradient == "autograd":
            value, grad = loss_and_grad(model, batch, beta, cfg.K_sub, theta, transform)
        else:
            fn = lambda th: loss(model, batch, beta, cfg.K_sub, th, transform)
            value, grad = fn(theta), grad_estimate(fn, theta, cfg.fd_step)
        theta, opt = adamw_step(opt, theta, grad, lr_schedule(i, cfg), wd_schedule(i, cfg))
        row = {"step": i + 1, "loss": value, "val_auc": None}
        if val is not None and ((i + 1) % cfg.eval_every == 0 or i + 1 == cfg.n_steps):
            row["val_auc"] = val_auc(theta)
            log.info("step %d loss %.5f val_auc %.5f", i + 1, value, row["val_auc"])
        history.append(row)
    return TrainResult(model.with_vector(theta), history, opt)


def write_history_tsv(path, history, header: str | None = None) -> None:
    with open(path, "w") as fh:
        if header:
            fh.write(header.rstrip("\n") + "\n")
        fh.write("step\tloss\tval_auc\n")
        for row in history:
            cells = [str(row["step"])] + ["" if row[k] is None else repr(row[k]) for k in ("loss", "val_auc")]
            fh.write("\t".join(cells) + "\n")


@dataclass
class CVResult:
    folds: list[tuple[ModelParams, float]]
    mean: float
    sd: float


def fold_indices(n: int, k_folds: int) -> list[np.ndarray]:
    """Contiguous folds of near-equal size."""
    if k_folds < 2 or n < k_folds:
        raise ValueError("need k_folds >= 2 and at least k_folds items")
    return [a for a in np.array_split(np.arange(n), k_folds)]


def cross_validate(dataset: Sequence[Scenario], model: ModelParams, cfg: TrainConfig,
                   k_folds: int, transform: Callable | None = None) -> CVResult:
    folds = []
    for held in fold_indices(len(dataset), k_folds):
        held_set = set(held.tolist())
        tr = [s for i, s in enumerate(dataset) if i not in held_set]
        va = [dataset[i] for i in held]
        res = train(tr, model, cfg, transform=transform)
        folds.append((res.params, float(np.mean(evaluate(res.params, va, cfg.init_seed, transform)))))
    aucs = np.array([a for _, a in folds])
    return CVResult(folds, float(aucs.mean()), float(aucs.std(ddof=1)))


# --------------------------------------------------------------------------
# classical baselines


def classical_auc(scen: Scenario, algorithm: str, lam: float, mu: float, nu: float, L: int,
                  init=None, seed: int = 0, R_cpd: int | None = None, nonneg: bool = False,
                  trace: bool = False):
    """AUC of a classical solver run; with ``trace`` the AUC after every iteration."""
    obs = scen.observation
    if init is None:
        init = init_state(obs, R_cpd or default_rank(*obs.Y.shape), seed)
    reg = RegParams(lam=lam, M=mu, W=1.0, nu=nu)
    aucs = []
    cb = (lambda ell, st: aucs.append(metrics.auc(metrics.normalize_scores(st.A), scen.truth))) if trace else None
    if algorithm == "tbsca":
        st = tbsca_ad(obs, reg, L, init, callback=cb)
    elif algorithm == "tbsca-aug":
        st = tbsca_ad_aug(obs, reg, L, init, nonneg=nonneg, callback=cb)
    else:
        raise ValueError(f"unknown classical algorithm {algorithm!r}")
    return aucs if trace else metrics.auc(metrics.normalize_scores(st.A), scen.truth)


@dataclass
class GridResult:
    best: tuple[float, ...]
    best_auc: float
    axes: tuple[np.ndarray, ...]
    grid: np.ndarray


def grid_search(dataset: Sequence[Scenario], L: int, log_lams, log_mus, log_nus=(0.0,), *,
                algorithm: str = "tbsca-aug", seed: int = 0, R_cpd: int | None = None) -> GridResult:
    """Mean AUC over ``dataset`` at every ``(log lambda, log mu, log nu)`` grid point.

    The best point is the first maximum in lexicographic order of the
    (sorted) axes, i.e. ties go to the smallest ``log lambda``, then ``log mu``.
    """
    axes = tuple(np.sort(np.asarray(a, dtype=np.float64)) for a in (log_lams, log_mus, log_nus))
    if min(a.size for a in axes) == 0:
        raise ValueError("empty grid")
    usable = [s for s in dataset if 0 < s.truth.sum() < s.truth.size]
    if not usable:
        raise ValueError("no scenario with both classes")
    inits = [init_state(s.observation, R_cpd or default_rank(*s.Y.shape), seed) for s in usable]
    grid = np.empty(tuple(a.size for a in axes))
    for a, ll in enumerate(axes[0]):
        for b, lm in enumerate(axes[1]):
            for c, ln in enumerate(axes[2]):
                vals = [classical_auc(s, algorithm, math.exp(ll), math.exp(lm), math.exp(ln), L, init=ini)
                        for s, ini in zip(usable, inits)]
                grid[a, b, c] = math.fsum(vals) / len(vals)
    flat = int(np.argmax(grid))
    idx = np.unravel_index(flat, grid.shape)
    best = tuple(float(ax[i]) for ax, i in zip(axes, idx))
    return GridResult(best, float(grid[idx]), axes, grid)
