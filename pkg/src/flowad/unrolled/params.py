"""Learnable weights of the unrolled networks.

Parameters live in one ordered name -> array table so that the flattened
vector used by the optimizers and the structured per-layer view always agree.
Positive scalars (``lambda``, ``nu``, ``mu``) are stored as natural logs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embed import H_M, H_W

FORMAT_VERSION = "1"


@dataclass(frozen=True)
class AffineMap:
    weights: np.ndarray
    bias: float


@dataclass(frozen=True)
class LayerParams:
    log_lambda: float
    log_nu: float | None
    log_mu: float | None = None
    w_map: AffineMap | None = None
    m_map: AffineMap | None = None


@dataclass
class ModelParams:
    """Weights of U-/AU-tBSCA-AUG with ``n_layers`` layers.

    ``adaptive=False`` gives the scalar variant (``W = 1``, ``M = mu``);
    ``coupled=True`` shares one pair of affine maps across all layers.
    ``m_bias`` is a fixed nonnegative offset added to ``M``.
    """

    n_layers: int
    adaptive: bool = True
    coupled: bool = False
    C: float = 5.0
    m_bias: float = 0.0
    nonneg: bool = False
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("need at least one layer")
        if not self.C > 0:
            raise ValueError("head bound C must be positive")
        if self.m_bias < 0:
            raise ValueError("m_bias must be nonnegative")
        expected = self.layout()
        if not self.arrays:
            self.arrays = {name: np.zeros(n) for name, n in expected}
        names = [name for name, _ in expected]
        if list(self.arrays) != names:
            raise ValueError(f"parameter names {list(self.arrays)} do not match layout {names}")
        for name, n in expected:
            arr = np.asarray(self.arrays[name], dtype=np.float64).reshape(-1)
            if arr.size != n:
                raise ValueError(f"{name}: expected {n} values, got {arr.size}")
            self.arrays[name] = arr

    # ---- layout ---------------------------------------------------------

    def layout(self) -> list[tuple[str, int]]:
        out = []
        for ell in range(1, self.n_layers + 1):
            out.append((f"layer{ell}.log_lambda", 1))
            if ell >= 2:
                out.append((f"layer{ell}.log_nu", 1))
            if not self.adaptive:
                out.append((f"layer{ell}.log_mu", 1))
            elif not self.coupled:
                out += _map_layout(f"layer{ell}")
        if self.adaptive and self.coupled:
            out += _map_layout("shared")
        return out

    def slices(self) -> dict[str, slice]:
        out, pos = {}, 0
        for name, n in self.layout():
            out[name] = slice(pos, pos + n)
            pos += n
        return out

    @property
    def size(self) -> int:
        return sum(n for _, n in self.layout())

    # ---- vector form ----------------------------------------------------

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.arrays[name] for name, _ in self.layout()])

    def with_vector(self, theta) -> "ModelParams":
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        if theta.size != self.size:
            raise ValueError(f"expected {self.size} values, got {theta.size}")
        arrays = {name: theta[s].copy() for name, s in self.slices().items()}
        return ModelParams(self.n_layers, self.adaptive, self.coupled, self.C,
                           self.m_bias, self.nonneg, arrays)

    def layer(self, ell: int) -> LayerParams:
        """Structured view of layer ``ell`` (1-based)."""
        a = self.arrays
        p = f"layer{ell}"
        maps = {}
        if self.adaptive:
            src = "shared" if self.coupled else p
            for kind in ("w_map", "m_map"):
                maps[kind] = AffineMap(a[f"{src}.{kind}.weights"].copy(),
                                       float(a[f"{src}.{kind}.bias"][0]))
        return LayerParams(
            log_lambda=float(a[f"{p}.log_lambda"][0]),
            log_nu=float(a[f"{p}.log_nu"][0]) if ell >= 2 else None,
            log_mu=None if self.adaptive else float(a[f"{p}.log_mu"][0]),
            **maps,
        )

    # ---- constructors ---------------------------------------------------

    @classmethod
    def create(cls, n_layers: int, *, adaptive: bool = True, coupled: bool = False,
               C: float = 5.0, lam: float = 1.0, mu: float = 0.1, nu: float = 1.0,
               m_bias: float = 0.0, nonneg: bool = False) -> "ModelParams":
        """Model whose every layer starts at the scalar setting ``(lam, mu, nu)``.

        Adaptive maps start with zero weights and a bias that makes the head
        output exactly ``1`` for ``W`` and approximately ``mu`` for ``M``.
        """
        model = cls(n_layers, adaptive, coupled, C, m_bias, nonneg)
        a = model.arrays
        for name in a:
            if name.endswith("log_lambda"):
                a[name][:] = math.log(lam)
            elif name.endswith("log_nu"):
                a[name][:] = math.log(nu)
            elif name.endswith("log_mu"):
                a[name][:] = math.log(mu)
            elif name.endswith("m_map.bias"):
                a[name][:] = head_inverse(math.log(mu), C)
        return model

    # ---- text serialization ---------------------------------------------

    def to_text(self) -> str:
        lines = [
            f"flowad-model {FORMAT_VERSION}",
            f"layers {self.n_layers}",
            f"adaptive {int(self.adaptive)}",
            f"coupled {int(self.coupled)}",
            f"nonneg {int(self.nonneg)}",
            f"C {float(self.C).hex()}",
            f"m_bias {float(self.m_bias).hex()}",
        ]
        for name, _ in self.layout():
            vals = " ".join(float(v).hex() for v in self.arrays[name])
            lines.append(f"{name} {self.arrays[name].size} {vals}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelParams":
        rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        if not rows or rows[0] != ["flowad-model", FORMAT_VERSION]:
            raise ValueError("not a model parameter file (bad header)")
        head = {r[0]: r[1] for r in rows[1:7]}
        try:
            kwargs = dict(
                n_layers=int(head["layers"]),
                adaptive=bool(int(head["adaptive"])),
                coupled=bool(int(head["coupled"])),
                nonneg=bool(int(head["nonneg"])),
                C=float.fromhex(head["C"]),
                m_bias=float.fromhex(head["m_bias"]),
            )
        except KeyError as exc:
            raise ValueError(f"missing header field {exc}") from exc
        arrays = {}
        for r in rows[7:]:
            n = int(r[1])
            if len(r) != n + 2:
                raise ValueError(f"{r[0]}: declared {n} values, found {len(r) - 2}")
            arrays[r[0]] = np.array([float.fromhex(v) for v in r[2:]])
        return cls(arrays=arrays, **kwargs)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_text(Path(path).read_text())


def _map_layout(prefix: str) -> list[tuple[str, int]]:
    return [(f"{prefix}.w_map.weights", H_W), (f"{prefix}.w_map.bias", 1),
            (f"{prefix}.m_map.weights", H_M), (f"{prefix}.m_map.bias", 1)]


def head_inverse(y: float, C: float) -> float:
    """Body value ``x`` with ``C * tanh(x / C) == y`` (requires ``|y| < C``)."""
    if abs(y) >= C:
        raise ValueError(f"log-value {y} outside the head range (-{C}, {C})")
    return C * math.atanh(y / C)
