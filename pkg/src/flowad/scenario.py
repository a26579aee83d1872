"""Scenario synthesis, time folding and trace ingestion.

A scenario is the ground-truth bundle ``(O, R, Z, A, N)`` together with the
link measurements ``Y = O * ((Z + A) x_1 R + N)``. Flow tensors are
``F x T1 x T2`` and link tensors ``E x T1 x T2``.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor_core import DimensionError, cpd_reconstruct, mode_product

logger = logging.getLogger(__name__)

BUNDLE_FORMAT_VERSION = "1"
_BUNDLE_ARRAYS = ("Y", "O", "Z", "A", "N", "R")


class FormatError(ValueError):
    """Raised for malformed flow, routing or bundle files."""


@dataclass(frozen=True)
class RoutingGraph:
    n_nodes: int
    edges: tuple[tuple[int, int], ...]
    routing: np.ndarray = field(repr=False)
    flows: tuple[tuple[int, int], ...] = field(repr=False)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_flows(self) -> int:
        return len(self.flows)

    def flow_index(self, src: int, dst: int) -> int:
        return self.flows.index((src, dst))


@dataclass(frozen=True)
class Observation:
    Y: np.ndarray
    O: np.ndarray
    R: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.Y.shape

    @property
    def n_flows(self) -> int:
        return self.R.shape[1]


@dataclass(frozen=True)
class Scenario:
    R: np.ndarray
    Z: np.ndarray
    A: np.ndarray
    N: np.ndarray
    O: np.ndarray
    Y: np.ndarray
    graph: RoutingGraph | None = None

    @property
    def observation(self) -> Observation:
        return Observation(self.Y, self.O, self.R)

    @property
    def truth(self) -> np.ndarray:
        """Binary ground-truth anomaly indicator, ``F x T1 x T2``."""
        return (self.A != 0).astype(np.float64)


@dataclass(frozen=True)
class SynthParams:
    n_nodes: int
    n_edges: int
    T1: int
    T2: int
    p_obs: float
    R_gt: int
    s_min: float
    s_max: float
    A_ano: float
    p_ano: float
    sigma_noise_sq: float

    def __post_init__(self):
        if not 0 < self.p_obs <= 1:
            raise ValueError(f"p_obs must lie in (0, 1], got {self.p_obs}")
        if not 0 <= self.p_ano < 1:
            raise ValueError(f"p_ano must lie in [0, 1), got {self.p_ano}")
        if not 0 < self.s_min <= self.s_max:
            raise ValueError("require 0 < s_min <= s_max")
        if self.R_gt < 1:
            raise ValueError("R_gt must be at least 1")
        if self.sigma_noise_sq < 0:
            raise ValueError("sigma_noise_sq must be nonnegative")
        if self.T1 < 1 or self.T2 < 1:
            raise ValueError("T1 and T2 must be positive")


PRESETS: dict[str, SynthParams] = {
    "s1": SynthParams(10, 30, 20, 10, 0.9, 30, 1.0, 1.0, 1.0, 0.005, 0.01),
    "s2": SynthParams(15, 60, 30, 10, 0.9, 70, 0.25, 1.0, 0.8, 0.005, 0.04),
    "sa": SynthParams(10, 50, 10, 10, 0.95, 40, 0.25, 1.0, 1.5, 0.005, 0.25),
    "desk": SynthParams(8, 16, 10, 5, 0.9, 5, 0.25, 1.0, 1.0, 0.02, 0.01),
}


# --------------------------------------------------------------------------
# topology and routing


def _bfs_dist(adj: list[list[int]], start: int) -> list[int]:
    dist = [-1] * len(adj)
    dist[start] = 0
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def _is_strongly_connected(n: int, edges) -> bool:
    fwd = [[] for _ in range(n)]
    bwd = [[] for _ in range(n)]
    for s, d in edges:
        fwd[s].append(d)
        bwd[d].append(s)
    return min(_bfs_dist(fwd, 0)) >= 0 and min(_bfs_dist(bwd, 0)) >= 0


def shortest_path(n_nodes: int, edges, src: int, dst: int) -> list[int]:
    """Hop-count shortest path with the lexicographically smallest node sequence."""
    rev = [[] for _ in range(n_nodes)]
    fwd = [[] for _ in range(n_nodes)]
    for s, d in edges:
        fwd[s].append(d)
        rev[d].append(s)
    to_dst = _bfs_dist(rev, dst)
    if to_dst[src] < 0:
        raise ValueError(f"node {dst} is unreachable from {src}")
    path = [src]
    while path[-1] != dst:
        u = path[-1]
        path.append(min(v for v in fwd[u] if to_dst[v] == to_dst[u] - 1))
    return path


def routing_from_edges(n_nodes: int, edges) -> RoutingGraph:
    """Route every ordered node pair along its shortest path (0-based nodes)."""
    edges = tuple(sorted({(int(s), int(d)) for s, d in edges}))
    if any(s == d for s, d in edges):
        raise ValueError("self loops are not allowed")
    if not _is_strongly_connected(n_nodes, edges):
        raise ValueError("graph is not strongly connected")
    edge_pos = {e: j for j, e in enumerate(edges)}
    flows = tuple((s, d) for s in range(n_nodes) for d in range(n_nodes) if s != d)
    routing = np.zeros((len(edges), len(flows)))
    for i, (s, d) in enumerate(flows):
        path = shortest_path(n_nodes, edges, s, d)
        for u, v in zip(path[:-1], path[1:]):
            routing[edge_pos[(u, v)], i] = 1.0
    return RoutingGraph(n_nodes, edges, routing, flows)


def gen_topology(n_nodes: int, n_edges: int, seed) -> RoutingGraph:
    """Random strongly connected digraph with exactly ``n_edges`` directed links.

    A random Hamiltonian cycle guarantees strong connectivity; the remaining
    links are drawn uniformly from the unused ordered node pairs.
    """
    if n_nodes < 2:
        raise ValueError("need at least two nodes")
    if not n_nodes <= n_edges <= n_nodes * (n_nodes - 1):
        raise ValueError(
            f"n_edges must lie in [{n_nodes}, {n_nodes * (n_nodes - 1)}], got {n_edges}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_nodes)
    cycle = {(int(order[k]), int(order[(k + 1) % n_nodes])) for k in range(n_nodes)}
    rest = [
        (s, d)
        for s in range(n_nodes)
        for d in range(n_nodes)
        if s != d and (s, d) not in cycle
    ]
    extra = rng.choice(len(rest), size=n_edges - n_nodes, replace=False)
    edges = cycle | {rest[k] for k in extra}
    return routing_from_edges(n_nodes, edges)


def is_valid_path_column(graph: RoutingGraph, i: int) -> bool:
    """Check that column ``i`` of the routing matrix is a contiguous src->dst path."""
    src, dst = graph.flows[i]
    used = [graph.edges[j] for j in np.flatnonzero(graph.routing[:, i])]
    if not np.all(np.isin(graph.routing[:, i], (0.0, 1.0))):
        return False
    nxt = {}
    for s, d in used:
        if s in nxt:
            return False
        nxt[s] = d
    node, steps = src, 0
    while node != dst:
        if node not in nxt or steps > len(used):
            return False
        node, steps = nxt[node], steps + 1
    return steps == len(used)


# --------------------------------------------------------------------------
# sampling


def sample_scenario(graph: RoutingGraph, p: SynthParams, seed) -> Scenario:
    rng = np.random.default_rng(seed)
    F, T1, T2 = graph.n_flows, p.T1, p.T2
    s1 = rng.uniform(p.s_min, p.s_max, size=F)
    s2 = rng.uniform(p.s_min, p.s_max, size=T1)
    s3 = rng.uniform(p.s_min, p.s_max, size=T2)
    scale = np.einsum("i,j,k->ijk", s1, s2, s3)

    factors = [rng.exponential(1.0, size=(n, p.R_gt)) for n in (F, T1, T2)]
    Z = scale * (cpd_reconstruct(*factors) / p.R_gt)

    noise = rng.normal(0.0, np.sqrt(p.sigma_noise_sq), size=(F, T1, T2))
    N = mode_product(scale * noise, graph.routing, 1)

    cats = rng.choice(np.array([-1.0, 0.0, 1.0]), size=(F, T1, T2),
                      p=[p.p_ano / 2, 1.0 - p.p_ano, p.p_ano / 2])
    A = p.A_ano * (scale * cats)

    O = (rng.random((graph.n_edges, T1, T2)) < p.p_obs).astype(np.float64)
    return assemble(graph.routing, Z, A, N, O, graph=graph)


def assemble(R, Z, A, N, O, graph: RoutingGraph | None = None) -> Scenario:
    """Build a scenario, deriving ``Y`` by the measurement model."""
    Y = O * (mode_product(Z + A, R, 1) + N)
    return Scenario(R=R, Z=Z, A=A, N=N, O=O, Y=Y, graph=graph)


def generate_dataset(p: SynthParams, count: int, seed: int) -> list[Scenario]:
    """``count`` scenarios, each with its own random topology."""
    seq = np.random.SeedSequence(seed)
    out = []
    for child in seq.spawn(count):
        topo_seed, data_seed = child.spawn(2)
        graph = gen_topology(p.n_nodes, p.n_edges, topo_seed)
        out.append(sample_scenario(graph, p, data_seed))
    return out


# --------------------------------------------------------------------------
# time folding


def fold_time(m: np.ndarray, T1: int, T2: int) -> np.ndarray:
    """Fold ``rows x (T1*T2)`` into ``rows x T1 x T2`` with ``t = t1 + t2*T1``."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if m.shape[1] != T1 * T2:
        raise DimensionError(f"{m.shape[1]} columns cannot fold into {T1}x{T2}")
    return np.reshape(m, (m.shape[0], T1, T2), order="F")


def unfold_time(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.reshape(t, (t.shape[0], -1), order="F")


# --------------------------------------------------------------------------
# real traces


def read_tsv_matrix(path) -> np.ndarray:
    path = Path(path)
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append([float(x) for x in line.rstrip("\n").split("\t")])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: empty file")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise FormatError(f"{path}: ragged rows with widths {sorted(widths)}")
    return np.array(rows, dtype=np.float64)


def write_tsv_matrix(path, m: np.ndarray) -> None:
    with Path(path).open("w") as fh:
        for row in np.atleast_2d(m):
            fh.write("\t".join(repr(float(x)) for x in row) + "\n")


def load_real_dataset(flow_file, routing_file, T1: int, T2: int, *,
                      A_ano: float, p_ano: float, p_obs: float = 0.95,
                      window_stride: int | None = None, seed=0) -> list[Scenario]:
    """Slice a flow trace into windows and inject synthetic anomalies.

    The flow file holds ``F`` rows of ``T_total`` nonnegative values; the
    routing file holds the ``E x F`` binary routing matrix. Each window of
    ``T1*T2`` steps gets anomalies ``A[i] = A_ano * max_t Z[i, t] * cat``,
    a fresh Bernoulli observation mask and no extra noise.
    """
    flows = read_tsv_matrix(flow_file)
    R = read_tsv_matrix(routing_file)
    neg = np.argwhere(flows < 0)
    if neg.size:
        r, c = neg[0]
        raise FormatError(f"{flow_file}: negative flow at row {r + 1}, col {c + 1}")
    bad = np.argwhere((R != 0) & (R != 1))
    if bad.size:
        r, c = bad[0]
        raise FormatError(f"{routing_file}: non-binary entry at row {r + 1}, col {c + 1}")
    if R.shape[1] != flows.shape[0]:
        raise FormatError(
            f"routing has {R.shape[1]} flow columns but flow file has {flows.shape[0]} rows"
        )
    T = T1 * T2
    if flows.shape[1] < T:
        raise FormatError(f"trace has {flows.shape[1]} steps, need at least {T}")
    stride = T if window_stride is None else int(window_stride)
    if stride < 1:
        raise ValueError("window_stride must be positive")

    starts = range(0, flows.shape[1] - T + 1, stride)
    seeds = np.random.SeedSequence(seed).spawn(len(starts))
    out = []
    for start, child in zip(starts, seeds):
        rng = np.random.default_rng(child)
        Zm = flows[:, start:start + T]
        cats = rng.choice(np.array([-1.0, 0.0, 1.0]), size=Zm.shape,
                          p=[p_ano / 2, 1.0 - p_ano, p_ano / 2])
        Am = A_ano * Zm.max(axis=1, keepdims=True) * cats
        O = (rng.random((R.shape[0], T1, T2)) < p_obs).astype(np.float64)
        Z = fold_time(Zm, T1, T2)
        out.append(assemble(R, Z, fold_time(Am, T1, T2),
                            np.zeros((R.shape[0], T1, T2)), O))
    return out


# --------------------------------------------------------------------------
# bundles


def save_bundle(scen: Scenario, directory, *, seed=None, params: SynthParams | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    E, T1, T2 = scen.Y.shape
    meta = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "dims": {"E": E, "F": scen.R.shape[1], "T1": T1, "T2": T2},
        "params": asdict(params) if params is not None else None,
        "seed": seed,
    }
    if scen.graph is not None:
        meta["graph"] = {"n_nodes": scen.graph.n_nodes,
                         "edges": [list(e) for e in scen.graph.edges]}
    for name in _BUNDLE_ARRAYS:
        arr = np.asarray(getattr(scen, name), dtype="<f8")
        (directory / f"{name}.bin").write_bytes(arr.tobytes(order="F"))
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_bundle(directory) -> Scenario:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{directory}: unreadable meta.json ({exc})") from exc
    if meta.get("format_version") != BUNDLE_FORMAT_VERSION:
        raise FormatError(f"{directory}: unsupported format {meta.get('format_version')!r}")
    d = meta["dims"]
    E, F, T1, T2 = d["E"], d["F"], d["T1"], d["T2"]
    shapes = {"Y": (E, T1, T2), "O": (E, T1, T2), "N": (E, T1, T2),
              "Z": (F, T1, T2), "A": (F, T1, T2), "R": (E, F)}
    arrays = {}
    for name, shape in shapes.items():
        raw = (directory / f"{name}.bin").read_bytes()
        expected = int(np.prod(shape)) * 8
        if len(raw) != expected:
            raise FormatError(f"{directory}/{name}.bin: {len(raw)} bytes, expected {expected}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape, order="F").astype(np.float64)
    graph = None
    if meta.get("graph"):
        graph = routing_from_edges(meta["graph"]["n_nodes"],
                                   [tuple(e) for e in meta["graph"]["edges"]])
    return Scenario(graph=graph, **arrays)
