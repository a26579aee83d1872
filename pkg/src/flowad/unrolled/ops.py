"""Torch kernels shared by the unrolled layers.

Every contraction goes through a :class:`Contractor`. The default ``fast``
contractor forwards to ``torch.einsum``. The ``canonical`` contractor first
forms the full elementwise product, then sorts each group of summands and adds
them left to right, and evaluates transcendental functions one element at a time
through ``math``. Its results therefore depend only on the multiset of
summands, which makes link and flow relabelings commute with the forward pass
bit for bit. It is slow and carries no gradients; it exists for the
equivariance checks.
"""

from __future__ import annotations

import math

import numpy as np
import torch

DTYPE = torch.float64


def as_t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


class Contractor:
    canonical = False

    def einsum(self, eq: str, *ops: torch.Tensor) -> torch.Tensor:
        return torch.einsum(eq, *ops)

    def sum_all(self, x: torch.Tensor) -> torch.Tensor:
        return x.sum()

    def sum_last(self, x: torch.Tensor, k: int) -> torch.Tensor:
        """Sum over the last ``k`` dimensions."""
        return x.sum(dim=tuple(range(x.dim() - k, x.dim())))

    def apply(self, name: str, x: torch.Tensor) -> torch.Tensor:
        return getattr(torch, name)(x)


class CanonicalContractor(Contractor):
    canonical = True

    def einsum(self, eq: str, *ops: torch.Tensor) -> torch.Tensor:
        lhs, out = eq.replace(" ", "").split("->")
        letters = []
        for term in lhs.split(","):
            letters += [c for c in term if c not in letters]
        reduced = "".join(c for c in letters if c not in out)
        full = torch.einsum(f"{lhs}->{out}{reduced}", *ops)
        return self.sum_last(full, len(reduced))

    def sum_last(self, x: torch.Tensor, k: int) -> torch.Tensor:
        if k == 0:
            return x
        flat = torch.sort(x.reshape(*x.shape[: x.dim() - k], -1), dim=-1).values
        # elementwise adds in a fixed order; a vectorized reduction may associate
        # terms differently depending on where a row sits in memory
        acc = flat[..., 0].clone()
        for j in range(1, flat.shape[-1]):
            acc = acc + flat[..., j]
        return acc

    def sum_all(self, x: torch.Tensor) -> torch.Tensor:
        return self.sum_last(x, x.dim())

    def apply(self, name: str, x: torch.Tensor) -> torch.Tensor:
        fn = getattr(math, name)
        vals = np.vectorize(fn, otypes=[np.float64])(x.detach().numpy())
        return torch.as_tensor(vals)


FAST = Contractor()
CANONICAL = CanonicalContractor()


def unfold(t: torch.Tensor, mode: int) -> torch.Tensor:
    """Column-major mode unfolding matching :func:`flowad.tensor_core.unfold`."""
    perm = {1: (0, 2, 1), 2: (1, 2, 0), 3: (2, 1, 0)}[mode]
    return t.permute(*perm).reshape(t.shape[mode - 1], -1)


def refold(m: torch.Tensor, mode: int, shape) -> torch.Tensor:
    perm = {1: (0, 2, 1), 2: (1, 2, 0), 3: (2, 1, 0)}[mode]
    moved = tuple(shape[p] for p in perm)
    inv = tuple(int(i) for i in np.argsort(perm))
    return m.reshape(moved).permute(*inv)


def khatri_rao(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a[:, None, :] * b[None, :, :]).reshape(-1, a.shape[1])


def cpd(C: Contractor, P, Q1, Q2) -> torch.Tensor:
    return C.einsum("jr,kr,lr->jkl", P, Q1, Q2)


def route(C: Contractor, R, A) -> torch.Tensor:
    """``A x_1 R``: flows to links."""
    return C.einsum("ji,ikl->jkl", R, A)


def project(C: Contractor, R, X) -> torch.Tensor:
    """``X x_1 R^T``: links to flows."""
    return C.einsum("ji,jkl->ikl", R, X)


def spd_solve_rows(G: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """Solve ``G[n] x[n] = B[n]`` for a batch of SPD systems, one right-hand side each."""
    L = torch.linalg.cholesky(G)
    return torch.cholesky_solve(B.unsqueeze(-1), L).squeeze(-1)


def masked_var(C: Contractor, t: torch.Tensor, o: torch.Tensor, mode: int) -> torch.Tensor:
    """Masked sample variance of every mode-``mode`` slice (guarded like ``masked_stats``)."""
    tu, ou = unfold(t, mode), unfold(o, mode)
    count = C.sum_last(ou, 1)
    safe = torch.where(count > 0, count, torch.ones_like(count))
    mean = C.sum_last(ou * tu, 1) / safe
    dev = ou * tu - mean[:, None] * ou
    denom = torch.where(count > 1, count - 1, torch.ones_like(count))
    var = C.sum_last(dev * dev, 1) / denom
    return torch.where(count > 1, var, torch.zeros_like(var))


def broadcast_mode(v: torch.Tensor, mode: int, shape) -> torch.Tensor:
    """Spread a per-slice vector along the other two modes."""
    view = [1, 1, 1]
    view[mode - 1] = shape[mode - 1]
    return v.reshape(view).expand(*shape)
