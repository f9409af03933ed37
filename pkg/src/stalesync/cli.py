"""Command-line experiment runner.

::

    stalesync run experiment.cfg --clocks 500 --model ESSP
    stalesync compare ssp.cfg essp.cfg
    stalesync gen-data mf --out d.txt --seed 3

Config files are flat ``key = value`` lines; ``#`` starts a comment. The
output directory can be overridden with the ``STALESYNC_OUT`` environment
variable. ``run`` exits with 0 on completion, 1 on an invalid config and 2
when the run was halted for divergence (outputs are still written).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import ConsistencyConfig, Model
from .metrics import MetricsLog, collect, fmt, loglog_slope
from .transport import DelayModel
from .workloads import (
    LsqData,
    LsqWorkload,
    MfWorkload,
    RunOutput,
    SparseMatrix,
    Workload,
    planted_mf,
    read_lsq,
    run_workload,
    synthetic_lsq,
    write_lsq,
)

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    workload: str = "lsq"
    model: str = "SSP"
    staleness_s: Optional[int] = None
    vap_v0: Optional[float] = None
    read_my_writes: bool = True
    workers: int = 4
    clocks: int = 100
    compute_ticks: int = 1
    delay: str = "zero"
    delay_lo: int = 0
    delay_hi: int = 0
    n_shards: int = 1
    cache_capacity: int = 0
    seed: int = 0
    replicas: int = 1
    objective_every: int = 1
    output_dir: str = "stalesync-out"
    data_file: str = ""
    # least squares
    dimension: int = 10
    components: int = 0
    noise: float = 3.0
    eta0: float = 1.0
    drift_r: int = 0
    # matrix factorization
    n_rows: int = 300
    n_cols: int = 200
    rank: int = 5
    density: float = 0.3
    noise_var: float = 0.01
    lam: float = 0.0
    init_scale: float = 0.1
    decay_clocks: float = 0.0
    minibatch_fraction: float = 0.05

    def validate(self) -> None:
        if self.workload not in ("lsq", "mf"):
            raise ConfigError("workload must be 'lsq' or 'mf'")
        try:
            model = Model(self.model.upper())
        except ValueError:
            raise ConfigError(f"unknown model {self.model!r}") from None
        if model is Model.VAP and self.staleness_s is not None:
            raise ConfigError("staleness_s must not be set for model VAP")
        if model is not Model.VAP and self.vap_v0 is not None:
            raise ConfigError("vap_v0 is only valid for model VAP")
        if model in (Model.SSP, Model.ESSP) and self.staleness_s is None:
            raise ConfigError(f"model {model.value} needs staleness_s")
        if model is Model.VAP and self.vap_v0 is None:
            raise ConfigError("model VAP needs vap_v0")
        if self.delay not in ("zero", "uniform"):
            raise ConfigError("delay must be 'zero' or 'uniform'")
        positive = ("workers", "clocks", "replicas", "n_shards", "objective_every", "dimension", "rank")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.compute_ticks < 0 or self.delay_lo < 0 or self.delay_hi < self.delay_lo:
            raise ConfigError("need compute_ticks >= 0 and 0 <= delay_lo <= delay_hi")
        if self.data_file and not Path(self.data_file).exists():
            raise ConfigError(f"data_file {self.data_file!r} does not exist")
        try:
            self.consistency()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def consistency(self) -> ConsistencyConfig:
        model = Model(self.model.upper())
        if model is Model.BSP:
            return ConsistencyConfig.bsp(self.read_my_writes)
        if model is Model.SSP:
            return ConsistencyConfig.ssp(self.staleness_s, self.read_my_writes)
        if model is Model.ESSP:
            return ConsistencyConfig.essp(self.staleness_s, self.read_my_writes)
        return ConsistencyConfig.vap(self.vap_v0, self.read_my_writes)

    def seeds(self) -> dict[str, int]:
        """Fan the master seed out into independent data, init and delay seeds."""
        data, init, delay = np.random.SeedSequence(self.seed).generate_state(3, dtype=np.uint32).tolist()
        return {"master": self.seed, "data": data, "init": init, "delay": delay}

    def replica_delay_seed(self, replica: int) -> int:
        return int(np.random.SeedSequence([self.seeds()["delay"], replica]).generate_state(1)[0])

    def workload_key(self) -> dict:
        """Fields that must agree across configs being compared."""
        skip = {"model", "staleness_s", "vap_v0", "output_dir"}
        return {k: v for k, v in asdict(self).items() if k not in skip}


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if kind.startswith("Optional"):
        if raw.lower() in ("", "none"):
            return None
        kind = kind[len("Optional[") : -1]
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse flat ``key = value`` text; errors carry ``source:line``."""
    cfg = ExperimentConfig()
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        try:
            setattr(cfg, key, _coerce(key, value))
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {key}: {exc}") from None
    try:
        cfg.validate()
    except ConfigError as exc:
        key = _error_key(str(exc))
        where = f"{source}:{seen[key]}" if key in seen else source
        raise ConfigError(f"{where}: {exc}") from None
    return cfg


def _error_key(message: str) -> str:
    first = message.split(" ", 1)[0]
    if first in _FIELD_TYPES:
        return first
    for name in _FIELD_TYPES:
        if f" {name} " in f" {message} ":
            return name
    return ""


def apply_overrides(cfg: ExperimentConfig, overrides: Sequence[str]) -> ExperimentConfig:
    """Apply ``--key value`` pairs (``--key=value`` also accepted)."""
    items = list(overrides)
    i = 0
    while i < len(items):
        token = items[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}")
        key = token[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(items):
                raise ConfigError(f"--{key} needs a value")
            value = items[i + 1]
            i += 2
        if key not in _FIELD_TYPES:
            raise ConfigError(f"--{key}: unknown key")
        try:
            setattr(cfg, key, _coerce(key, value))
        except ValueError as exc:
            raise ConfigError(f"--{key}: {exc}") from None
    cfg.validate()
    return cfg


def load_config(path: str, overrides: Sequence[str] = ()) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{path}: no such file")
    cfg = parse_config(p.read_text(), str(path))
    return apply_overrides(cfg, overrides)


# ---------------------------------------------------------------- execution


def build_workload(cfg: ExperimentConfig) -> Workload:
    seeds = cfg.seeds()
    if cfg.workload == "lsq":
        n = cfg.components or cfg.workers * cfg.clocks
        data = read_lsq(cfg.data_file) if cfg.data_file else synthetic_lsq(cfg.dimension, n, cfg.noise, seeds["data"])
        return LsqWorkload(data, cfg.eta0, drift_r=cfg.drift_r)
    matrix = (
        SparseMatrix.read(cfg.data_file)
        if cfg.data_file
        else planted_mf(cfg.n_rows, cfg.n_cols, cfg.rank, cfg.density, cfg.noise_var, seeds["data"]).matrix
    )
    return MfWorkload(
        matrix,
        rank=cfg.rank,
        lam=cfg.lam,
        eta0=cfg.eta0,
        init_scale=cfg.init_scale,
        seed=seeds["init"],
        minibatch_fraction=cfg.minibatch_fraction,
        decay_clocks=cfg.decay_clocks,
    )


def execute(cfg: ExperimentConfig, workload: Optional[Workload] = None) -> list[RunOutput]:
    """Run every replica of ``cfg``; replicas differ only in their delay seed."""
    workload = workload or build_workload(cfg)
    runs = []
    for r in range(cfg.replicas):
        delays = (
            DelayModel.uniform(cfg.delay_lo, cfg.delay_hi, cfg.replica_delay_seed(r))
            if cfg.delay == "uniform"
            else DelayModel.zero()
        )
        runs.append(
            run_workload(
                workload,
                cfg.consistency(),
                cfg.workers,
                cfg.clocks,
                delays=delays,
                compute_ticks=cfg.compute_ticks,
                n_shards=cfg.n_shards,
                cache_capacity=cfg.cache_capacity or None,
                objective_every=cfg.objective_every,
                keep_event_trace=False,
            )
        )
    return runs


def output_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get("STALESYNC_OUT") or cfg.output_dir)


def summarize(cfg: ExperimentConfig, runs: Sequence[RunOutput], log: MetricsLog) -> dict:
    first = runs[0]
    points = first.result.objective_points
    summary: dict = {
        "config": asdict(cfg),
        "seeds": cfg.seeds(),
        "replica_delay_seeds": [cfg.replica_delay_seed(r) for r in range(cfg.replicas)] if cfg.delay == "uniform" else [],
        "diverged": any(r.diverged for r in runs),
        "final_objective": points[-1][2] if points else None,
        "final_squared_loss": points[-1][3] if points else None,
        "final_virtual_time": first.result.final_time,
        "table_clock": first.result.stats["table_clock"],
        "stats": first.result.stats,
    }
    if log.histogram is not None:
        summary["mean_differential"] = log.histogram.mean
    if log.gamma is not None:
        g = log.gamma
        summary["gamma_max_ratio"] = g.max_ratio
        summary["gamma_violations"] = g.gamma_violations
        summary["u_bar_violations"] = g.u_bar_violations
        summary["mu_gamma"] = g.mu_gamma
        summary["sigma_gamma"] = g.sigma_gamma
        summary["gamma_autocorrelation"] = g.autocorrelation(1)
    if log.regret is not None:
        Ts, vals = log.regret
        try:
            summary["regret_slope"] = loglog_slope(Ts, vals, lo=1e2, hi=1e5)
        except ValueError:
            summary["regret_slope"] = None
    if log.variance is not None and cfg.replicas > 1:
        summary["variance_decreasing_fraction"] = log.variance.decreasing_fraction()
    return summary


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else str(x)
    return obj


def cmd_run(cfg: ExperimentConfig) -> int:
    runs = execute(cfg)
    log = collect(runs)
    out = output_dir(cfg)
    log.write(out)
    summary = summarize(cfg, runs, log)
    _write_json(out / "summary.json", summary)
    print(f"wrote {out}/ (final objective {summary['final_objective']}, diverged={summary['diverged']})")
    return EXIT_DIVERGED if summary["diverged"] else EXIT_OK


def cmd_compare(configs: Sequence[ExperimentConfig]) -> int:
    key = configs[0].workload_key()
    for cfg in configs[1:]:
        if cfg.workload_key() != key:
            diff = sorted(k for k, v in cfg.workload_key().items() if key.get(k) != v)
            raise ConfigError(f"configs differ outside model/staleness: {', '.join(diff)}")
    out = output_dir(configs[0])
    out.mkdir(parents=True, exist_ok=True)
    workload = build_workload(configs[0])
    rows = ["model,s,clock,virtual_time,objective"]
    entries = []
    diverged = False
    for cfg in configs:
        runs = execute(cfg, workload)
        log = collect(runs)
        summary = summarize(cfg, runs, log)
        entries.append(summary)
        diverged |= summary["diverged"]
        c = cfg.consistency()
        s = c.staleness_s if c.model in (Model.SSP, Model.ESSP) else 0
        rows += [f"{c.model.value},{s},{clk},{vt},{fmt(obj)}" for clk, vt, obj, _ in runs[0].result.objective_points]
    (out / "compare.csv").write_text("\n".join(rows) + "\n")
    _write_json(out / "summary.json", {"runs": entries})
    print(f"wrote {out}/compare.csv ({len(configs)} configurations)")
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_gen_data(args: argparse.Namespace) -> int:
    if args.kind == "mf":
        planted = planted_mf(args.n_rows, args.n_cols, args.rank, args.density, args.noise_var, args.seed)
        planted.matrix.write(args.out)
        print(f"wrote {args.out}: {planted.matrix.nnz} entries, noise floor {planted.noise_floor:.6g}")
    else:
        data: LsqData = synthetic_lsq(args.dimension, args.components, args.noise, args.seed)
        write_lsq(data, args.out)
        print(f"wrote {args.out}: {args.components} components of dimension {args.dimension}")
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stalesync", description="Bounded-staleness parameter server experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one configuration")
    run.add_argument("config")
    cmp_ = sub.add_parser("compare", help="run configurations that differ only in model/staleness")
    cmp_.add_argument("configs", nargs="+")
    gen = sub.add_parser("gen-data", help="write a synthetic data file")
    gen.add_argument("kind", choices=("mf", "lsq"))
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--n-rows", type=int, default=300)
    gen.add_argument("--n-cols", type=int, default=200)
    gen.add_argument("--rank", type=int, default=5)
    gen.add_argument("--density", type=float, default=0.3)
    gen.add_argument("--noise-var", type=float, default=0.01)
    gen.add_argument("--dimension", type=int, default=10)
    gen.add_argument("--components", type=int, default=10000)
    gen.add_argument("--noise", type=float, default=3.0)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "run":
            return cmd_run(load_config(args.config, extra))
        if extra:
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        if args.command == "compare":
            return cmd_compare([load_config(p) for p in args.configs])
        return cmd_gen_data(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
