"""Command-line front end.

Subcommands::

    gen-data   write synthetic (or windowed real) scenario bundles and an index
    solve      run a classical solver and emit per-iteration AUC traces
    heatmap    grid-search (log lambda, log mu) and emit the AUC grid
    train      train an unrolled model; writes checkpoint, optimizer state, history
    eval       per-scenario AUC of a model or classical solver
    roc        per-scenario ROC curves

Exit codes: 0 success, 2 configuration error, 3 I/O or format error, 4 numeric
failure. Every output file starts with a ``# flowad <version>, config <hash>,
seed <seed>`` provenance comment.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, metrics, scenario, solvers, training
from .scenario import FormatError, Scenario, SynthParams
from .tensor_core import NumericError
from .unrolled import ModelParams, default_rank, forward, init_state, matrix_mode, tensor_mode

log = logging.getLogger("flowad")

WORKERS_ENV = "FLOWAD_WORKERS"
CLASSICAL = {"tbsca": "tbsca", "tbsca-aug": "tbsca-aug"}
UNROLLED = {
    "u-tbsca-aug": (False, False),
    "au-tbsca-aug": (True, False),
    "u-mbsca-aug": (False, True),
    "au-mbsca-aug": (True, True),
}
VARIANTS = tuple(CLASSICAL) + tuple(UNROLLED)


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


# --------------------------------------------------------------------------
# configuration


@dataclass
class GridSpec:
    log_lambda: tuple[float, float, float] = (-6.0, 2.0, 0.5)
    log_mu: tuple[float, float, float] = (-6.0, 2.0, 0.5)
    log_nu: tuple[float, ...] = (0.0,)

    def axes(self):
        def arange(spec):
            lo, hi, step = spec
            if step <= 0 or hi < lo:
                raise ConfigError(f"bad grid range {spec}")
            n = int(math.floor((hi - lo) / step + 1e-9)) + 1
            return lo + step * np.arange(n)
        return arange(self.log_lambda), arange(self.log_mu), np.asarray(self.log_nu, dtype=float)


@dataclass
class RunConfig:
    """Everything a command needs; loaded from JSON, then overridden by flags."""

    preset: str = "desk"
    synth: dict = field(default_factory=dict)
    count: int = 50
    seed: int = 0
    variant: str = "au-tbsca-aug"
    layers: int = 4
    R_cpd: int | None = None
    C: float = 5.0
    coupled: bool = False
    m_bias: float = 0.0
    nonneg: bool = False
    lam: float = 1.0
    mu: float = 0.1
    nu: float = 1.0
    train: dict = field(default_factory=dict)
    grid: GridSpec = field(default_factory=GridSpec)
    val_fraction: float = 0.2
    k_folds: int = 0
    warm_start: bool = False

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        doc = dict(doc)
        if "grid" in doc:
            g = doc["grid"]
            bad = sorted(set(g) - {f.name for f in fields(GridSpec)})
            if bad:
                raise ConfigError(f"unknown grid keys: {', '.join(bad)}")
            doc["grid"] = GridSpec(**{k: tuple(v) for k, v in g.items()})
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.preset not in scenario.PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(scenario.PRESETS)}")
        bad = sorted(set(self.synth) - {f.name for f in fields(SynthParams)})
        if bad:
            raise ConfigError(f"unknown synth keys: {', '.join(bad)}")
        bad = sorted(set(self.train) - {f.name for f in fields(training.TrainConfig)})
        if bad:
            raise ConfigError(f"unknown train keys: {', '.join(bad)}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.count < 0 or self.layers < 1 or self.k_folds < 0:
            raise ConfigError("count >= 0, layers >= 1 and k_folds >= 0 required")
        if min(self.lam, self.mu, self.nu) <= 0:
            raise ConfigError("lam, mu and nu must be positive")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        try:
            self.synth_params()
            self.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def synth_params(self) -> SynthParams:
        return replace(scenario.PRESETS[self.preset], **self.synth)

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(**{"seed": self.seed, **self.train})

    def digest(self) -> str:
        doc = asdict(self)
        text = json.dumps(doc, sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def header(self) -> str:
        return f"# flowad {__version__}, config {self.digest()}, seed {self.seed}"

    def transform(self):
        return matrix_mode if UNROLLED.get(self.variant, (False, False))[1] else None

    def model(self) -> ModelParams:
        adaptive, _ = UNROLLED[self.variant]
        return ModelParams.create(self.layers, adaptive=adaptive, coupled=self.coupled, C=self.C,
                                  lam=self.lam, mu=self.mu, nu=self.nu, m_bias=self.m_bias,
                                  nonneg=self.nonneg)


def _load_config(args) -> RunConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
    for key in ("preset", "seed", "count", "variant", "layers", "R_cpd", "lam", "mu", "nu", "k_folds"):
        val = getattr(args, key, None)
        if val is not None:
            doc[key] = val
    if getattr(args, "warm_start", False):
        doc["warm_start"] = True
    return RunConfig.from_dict(doc)


# --------------------------------------------------------------------------
# helpers


def _workers(args) -> int:
    if args.workers is not None:
        n = args.workers
    else:
        try:
            n = int(os.environ.get(WORKERS_ENV, "1"))
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer") from exc
    if n < 1:
        raise ConfigError("workers must be at least 1")
    return n


def _pmap(fn, items, workers: int):
    """Ordered map over ``items``; results are collected before any output is written."""
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _load_data(directory) -> list[tuple[str, Scenario]]:
    root = Path(directory)
    index = root / "index.tsv"
    if not index.exists():
        raise FormatError(f"{index}: missing dataset index")
    names = []
    for line in index.read_text().splitlines():
        if line.startswith("#") or line.startswith("name\t") or not line.strip():
            continue
        names.append(line.split("\t")[0])
    return [(n, scenario.load_bundle(root / n)) for n in names]


def _write_lines(path, header: str, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write("\t".join(str(c) for c in row) + "\n")


def _write_scores(path, A: np.ndarray) -> None:
    Path(path).write_bytes(np.asarray(A, dtype="<f8").ravel(order="F").tobytes())


def _scores(cfg: RunConfig, scen: Scenario, model: ModelParams | None) -> np.ndarray:
    """Final anomaly tensor of the configured variant on one scenario."""
    if cfg.variant in CLASSICAL:
        obs = scen.observation
        init = init_state(obs, cfg.R_cpd or _rank(obs), cfg.seed)
        reg = solvers.RegParams(lam=cfg.lam, M=cfg.mu, nu=cfg.nu)
        solve = solvers.tbsca_ad if cfg.variant == "tbsca" else solvers.tbsca_ad_aug
        kwargs = {} if cfg.variant == "tbsca" else {"nonneg": cfg.nonneg}
        return solve(obs, reg, cfg.layers, init, **kwargs).A
    tf = cfg.transform()
    obs = tf(scen.observation) if tf else scen.observation
    return tensor_mode(forward(obs, model, seed=cfg.seed, R_cpd=cfg.R_cpd).A, scen.truth.shape)


def _rank(obs):
    return default_rank(*obs.Y.shape)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    if args.flows or args.routing:
        if not (args.flows and args.routing and args.t1 and args.t2):
            raise ConfigError("real data needs --flows, --routing, --t1 and --t2")
        p = cfg.synth_params()
        scens = scenario.load_real_dataset(args.flows, args.routing, args.t1, args.t2,
                                           A_ano=p.A_ano, p_ano=p.p_ano, p_obs=p.p_obs, seed=cfg.seed)
        params = None
    else:
        params = cfg.synth_params()
        scens = scenario.generate_dataset(params, cfg.count, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    rows = [("name", "E", "F", "T1", "T2", "n_anomalies")]
    for k, s in enumerate(scens):
        name = f"scenario_{k:05d}"
        scenario.save_bundle(s, out / name, seed=cfg.seed, params=params)
        E, T1, T2 = s.Y.shape
        rows.append((name, E, s.A.shape[0], T1, T2, int(s.truth.sum())))
    _write_lines(out / "index.tsv", cfg.header(), rows)
    log.info("wrote %d scenarios to %s", len(scens), out)
    return 0


def _solve_one(job):
    cfg, name, scen = job
    obs = scen.observation
    init = init_state(obs, cfg.R_cpd or _rank(obs), cfg.seed)
    trace = training.classical_auc(scen, cfg.variant, cfg.lam, cfg.mu, cfg.nu, cfg.layers,
                                   init=init, nonneg=cfg.nonneg, trace=True)
    return name, trace, _scores(cfg, scen, None)


def cmd_solve(cfg: RunConfig, args) -> int:
    if cfg.variant not in CLASSICAL:
        raise ConfigError("solve runs the classical variants tbsca or tbsca-aug")
    data = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = _pmap(_solve_one, [(cfg, n, s) for n, s in data], _workers(args))
    summary = [("name", "final_auc", "best_iteration")]
    for name, trace, A in results:
        _write_lines(out / f"{name}_trace.tsv", cfg.header(),
                     [("iteration", "auc")] + [(i + 1, repr(a)) for i, a in enumerate(trace)])
        _write_scores(out / f"{name}_scores.bin", A)
        summary.append((name, repr(trace[-1]), int(np.argmax(trace)) + 1))
    _write_lines(out / "summary.tsv", cfg.header(), summary)
    return 0


def cmd_heatmap(cfg: RunConfig, args) -> int:
    algo = cfg.variant if cfg.variant in CLASSICAL else "tbsca-aug"
    data = [s for _, s in _load_data(args.data)]
    lams, mus, nus = cfg.grid.axes()
    res = training.grid_search(data, cfg.layers, lams, mus, nus, algorithm=algo, seed=cfg.seed, R_cpd=cfg.R_cpd)
    metrics.write_heatmap_tsv(args.out, res.axes[0], res.axes[1], res.grid[:, :, 0], header=cfg.header())
    print(json.dumps({"best": res.best, "best_auc": res.best_auc}))
    return 0


def _split(data, frac):
    n_val = max(1, int(round(frac * len(data))))
    if n_val >= len(data):
        raise ConfigError("dataset too small for a train/validation split")
    return data[:-n_val], data[-n_val:]


def cmd_train(cfg: RunConfig, args) -> int:
    if cfg.variant not in UNROLLED:
        raise ConfigError("train needs an unrolled variant")
    data = [s for _, s in _load_data(args.data)]
    tcfg = cfg.train_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tf = cfg.transform()
    if cfg.k_folds:
        cv = training.cross_validate(data, cfg.model(), tcfg, cfg.k_folds, transform=tf)
        rows = [("fold", "val_auc")] + [(k, repr(a)) for k, (_, a) in enumerate(cv.folds)]
        _write_lines(out / "cv.tsv", cfg.header(), rows)
        print(json.dumps({"mean": cv.mean, "sd": cv.sd}))
        return 0
    trn, val = _split(data, cfg.val_fraction)
    if cfg.warm_start:
        lams, mus, nus = cfg.grid.axes()
        g = training.grid_search(trn, cfg.layers, lams, mus, nus, seed=cfg.seed, R_cpd=cfg.R_cpd)
        cfg = replace(cfg, lam=math.exp(g.best[0]), mu=math.exp(g.best[1]), nu=math.exp(g.best[2]))
        log.info("warm start at log lambda %.3f, log mu %.3f", g.best[0], g.best[1])
    res = training.train(trn, cfg.model(), tcfg, val, transform=tf)
    res.params.save(out / "model.txt")
    res.optimizer.save(out / "optimizer.json")
    training.write_history_tsv(out / "history.tsv", res.history, header=cfg.header())
    final = res.history[-1]["val_auc"] if res.history else None
    print(json.dumps({"final_val_auc": final}))
    return 0


def _eval_one(job):
    cfg, model, name, scen = job
    A = _scores(cfg, scen, model)
    if not 0 < scen.truth.sum() < scen.truth.size:
        return name, None, None
    scores = metrics.normalize_scores(A)
    return name, metrics.auc(scores, scen.truth), metrics.roc_curve(scores, scen.truth)


def _eval_all(cfg: RunConfig, args):
    model = None
    if cfg.variant in UNROLLED:
        model = ModelParams.load(args.model) if args.model else cfg.model()
    data = _load_data(args.data)
    return _pmap(_eval_one, [(cfg, model, n, s) for n, s in data], _workers(args))


def cmd_eval(cfg: RunConfig, args) -> int:
    results = _eval_all(cfg, args)
    rows = [("name", "auc")] + [(n, "" if a is None else repr(a)) for n, a, _ in results]
    _write_lines(args.out, cfg.header(), rows)
    aucs = [a for _, a, _ in results if a is not None]
    print(json.dumps({"mean_auc": float(np.mean(aucs)) if aucs else None, "n": len(aucs)}))
    return 0


def cmd_roc(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, _, pts in _eval_all(cfg, args):
        if pts is not None:
            metrics.write_roc_tsv(out / f"{name}_roc.tsv", pts, header=cfg.header())
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "solve": cmd_solve,
    "heatmap": cmd_heatmap,
    "train": cmd_train,
    "eval": cmd_eval,
    "roc": cmd_roc,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowad", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"flowad {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--preset", choices=sorted(scenario.PRESETS))
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, help=f"worker processes (default ${WORKERS_ENV} or 1)")
        p.add_argument("--out", required=True)
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--layers", type=int)
        p.add_argument("--R-cpd", dest="R_cpd", type=int)
        p.add_argument("--lam", type=float)
        p.add_argument("--mu", type=float)
        p.add_argument("--nu", type=float)
        if name == "gen-data":
            p.add_argument("--count", type=int)
            p.add_argument("--flows", help="real flow trace TSV (flows x time)")
            p.add_argument("--routing", help="routing matrix TSV (links x flows)")
            p.add_argument("--t1", type=int)
            p.add_argument("--t2", type=int)
        else:
            p.add_argument("--data", required=True, help="dataset directory written by gen-data")
        if name == "train":
            p.add_argument("--k-folds", dest="k_folds", type=int)
            p.add_argument("--warm-start", action="store_true",
                           help="start from the grid-search optimum of the classical solver")
        if name in ("eval", "roc"):
            p.add_argument("--model", help="model checkpoint (unrolled variants)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
