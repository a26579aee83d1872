"""Per-link and per-flow feature embeddings feeding the adaptive parameter maps.

All features are log-compressed with ``log(. + EPS)``. Feature order is
frozen because the affine maps that consume them are order-sensitive:

link features (``H_W = 7``)
    0-2  masked variance of ``Y`` over the slice through the entry, modes 1..3
    3-5  masked variance of ``Y - X`` over the same slices
    6    number of flows routed over the link

flow features (``H_M = 13``)
    0-2   max ``|E|`` over the slice, modes 1..3
    3-5   max of ``|E|`` normalized by the slice variances of the other two modes
    6-8   variance of ``A`` over the slice
    9-11  max of ``|A|`` normalized like 3-5
    12    number of observed links on the flow's path

``E`` is the fit error projected onto flows.
"""

from __future__ import annotations

import numpy as np
import torch

from .ops import FAST, Contractor, as_t, broadcast_mode, masked_var, project

EPS = 1e-8
H_W = 7
H_M = 13

_OTHER = {1: (2, 3), 2: (1, 3), 3: (1, 2)}


def _log(C: Contractor, x: torch.Tensor) -> torch.Tensor:
    return C.apply("log", x + EPS)


def _slice_var(C, t, o, mode):
    return broadcast_mode(masked_var(C, t, o, mode), mode, t.shape)


def _slice_max(t, mode):
    dims = tuple(d - 1 for d in _OTHER[mode])
    return broadcast_mode(torch.amax(t, dim=dims), mode, t.shape)


def _normalized_max(C, t, mode):
    """Slice max of ``|t|`` divided by the variance normalizer of the other two modes."""
    ones = torch.ones_like(t)
    var = {m: masked_var(C, t, ones, m) for m in (1, 2, 3)}
    a, b = _OTHER[mode]
    shape = t.shape
    prod = broadcast_mode(var[a], a, shape) * broadcast_mode(var[b], b, shape)
    scaled = t.abs() / torch.sqrt(torch.clamp(prod, min=EPS * EPS))
    return _slice_max(scaled, mode)


def flow_error(C: Contractor, Y, O, R, X) -> torch.Tensor:
    """``([O^2 (Y - X)] x_1 R^T) / (O^2 x_1 (R*R)^T)`` with zero where the denominator vanishes."""
    O2 = O * O
    num = project(C, R, O2 * (Y - X))
    den = project(C, R * R, O2)
    pos = den > 0
    return torch.where(pos, num / torch.where(pos, den, torch.ones_like(den)), torch.zeros_like(num))


def link_features(C: Contractor, Y, O, R, X) -> torch.Tensor:
    shape = Y.shape
    feats = [_slice_var(C, Y, O, m) for m in (1, 2, 3)]
    feats += [_slice_var(C, Y - X, O, m) for m in (1, 2, 3)]
    rowsum = C.sum_last(R, 1)
    feats.append(broadcast_mode(rowsum, 1, shape))
    return _log(C, torch.stack(feats, dim=-1))


def flow_features(C: Contractor, Y, O, R, X, A) -> torch.Tensor:
    shape = A.shape
    E = flow_error(C, Y, O, R, X)
    absE, absA = E.abs(), A.abs()
    ones = torch.ones_like(A)
    feats = [_slice_max(absE, m) for m in (1, 2, 3)]
    feats += [_normalized_max(C, E, m) for m in (1, 2, 3)]
    feats += [_slice_var(C, A, ones, m) for m in (1, 2, 3)]
    feats += [_normalized_max(C, A, m) for m in (1, 2, 3)]
    feats.append(project(C, R, O).expand(*shape))
    return _log(C, torch.stack(feats, dim=-1))


def embed_W(obs, X, A=None, contractor: Contractor = FAST) -> np.ndarray:
    """Link feature tensor of shape ``(E, T1, T2, 7)``."""
    with torch.no_grad():
        out = link_features(contractor, as_t(obs.Y), as_t(obs.O), as_t(obs.R), as_t(X))
    return out.numpy()


def embed_M(obs, X, A, contractor: Contractor = FAST) -> np.ndarray:
    """Flow feature tensor of shape ``(F, T1, T2, 13)``."""
    with torch.no_grad():
        out = flow_features(contractor, as_t(obs.Y), as_t(obs.O), as_t(obs.R), as_t(X), as_t(A))
    return out.numpy()
