"""Command-line harness: synthetic data, drift sweeps, regime maps and the
verification suites.

Every subcommand is a pure function of the experiment config and the seed.
Outputs are UTF-8 with LF line endings; JSON uses sorted keys, CSV uses the
shortest round-trip representation of each float.

Exit codes: 0 success, 1 a check failed, 2 invalid config or input.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import __version__
from .checks import CheckResult, check_equivalence, check_jacobian, run_verify
from .core import (
    Batch,
    GatingConfig,
    compute_ratios,
    perturbed_policy,
    policy_from_dict,
    policy_to_dict,
    random_policy,
    sample_batch,
)
from .errors import ConfigError, RatiogateError
from .fbg import AtomicGate, first_order_check, fiberpo_fbg_instance
from .fgh import DomainBatch, build_domain_chain
from .methods import METHODS, method_objective, method_spec
from .sweeps import (
    SIMPLEX_CONFIG,
    DRIFT_CONFIG,
    SIMPLEX_COLUMNS,
    SWEEP_COLUMNS,
    DriftSetup,
    drift_setup,
    simplex_rows,
    sweep_rows,
    transition_markers,
)
from .trust_region import EquivalenceBudget, equivalence_check

__all__ = ["ExperimentConfig", "SCHEMA_VERSION", "build_parser", "main"]

SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
FAULTS = ("non-reflecting-kernel",)


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def _strict(cls, data: Mapping[str, Any] | None, where: str):
    """Instantiate a flat dataclass from a mapping, rejecting unknown keys."""
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    extra = sorted(set(data) - known)
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def _positive_int(value: Any, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return value


@dataclass(frozen=True)
class BatchShape:
    n_trajectories: int = 4
    length: int = 6
    lengths: list[int] | None = None
    n_states: int = 4
    n_actions: int = 3
    logit_scale: float = 1.0
    policy_shift: float = 0.3
    advantage_scale: float = 1.0
    n_groups: int = 2
    n_domains: int = 1

    def __post_init__(self) -> None:
        _positive_int(self.n_trajectories, "batch.n_trajectories")
        _positive_int(self.length, "batch.length")
        _positive_int(self.n_states, "batch.n_states")
        _positive_int(self.n_actions, "batch.n_actions", 2)
        _positive_int(self.n_groups, "batch.n_groups")
        _positive_int(self.n_domains, "batch.n_domains")
        if self.lengths is not None:
            if len(self.lengths) == 0:
                raise ConfigError("batch.lengths must not be empty")
            for v in self.lengths:
                _positive_int(v, "batch.lengths entry")
        if self.n_domains > self.n_groups or self.n_groups > self.trajectory_count:
            raise ConfigError("need n_domains <= n_groups <= number of trajectories")
        for name in ("logit_scale", "policy_shift", "advantage_scale"):
            if not float(getattr(self, name)) >= 0.0:
                raise ConfigError(f"batch.{name} must be non-negative")

    @property
    def trajectory_count(self) -> int:
        return len(self.lengths) if self.lengths is not None else self.n_trajectories

    def trajectory_lengths(self) -> list[int]:
        return list(self.lengths) if self.lengths is not None else [self.length] * self.n_trajectories


@dataclass(frozen=True)
class DriftConfig:
    length: int = 10
    magnitude: tuple[float, float] = (0.5, 1.5)
    t_points: int = 161
    t_grid: list[float] | None = None
    advantages: list[float] | None = None
    directions: list[float] | None = None

    def __post_init__(self) -> None:
        _positive_int(self.length, "drift.length", 2)
        _positive_int(self.t_points, "drift.t_points", 2)
        if len(self.magnitude) != 2 or not 0 < self.magnitude[0] <= self.magnitude[1]:
            raise ConfigError("drift.magnitude must be [lo, hi] with 0 < lo <= hi")
        if self.t_grid is not None:
            ts = np.asarray(self.t_grid, dtype=np.float64)
            if ts.size == 0 or np.any(np.diff(ts) <= 0) or ts[0] < 0:
                raise ConfigError("t-grid must be non-empty, start at or above 0 and be strictly increasing")
        if (self.advantages is None) != (self.directions is None):
            raise ConfigError("drift.advantages and drift.directions must be given together")
        if self.advantages is not None:
            adv = np.asarray(self.advantages, dtype=np.float64)
            d = np.asarray(self.directions, dtype=np.float64)
            if adv.shape != d.shape or adv.size < 2:
                raise ConfigError("drift.advantages and drift.directions need equal length >= 2")
            if np.any(np.sign(adv) != np.sign(d)) or np.any(d == 0):
                raise ConfigError("each drift direction must be nonzero with the sign of its advantage")


@dataclass(frozen=True)
class CheckSizes:
    equivalence_instances: int = 20
    gradcheck_instances: int = 20
    equivalence_gamma: float = 0.9

    def __post_init__(self) -> None:
        _positive_int(self.equivalence_instances, "checks.equivalence_instances")
        _positive_int(self.gradcheck_instances, "checks.gradcheck_instances")
        if not 0.0 < float(self.equivalence_gamma) < 1.0:
            raise ConfigError("checks.equivalence_gamma must lie in (0, 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a subcommand needs. ``gating=None`` selects a per-command
    default: the drift-figure budgets for ``sweep``, the simplex-figure
    budgets for ``simplex-map`` and the library defaults elsewhere."""

    seed: int = 0
    methods: tuple[str, ...] = ("fiberpo",)
    gating: GatingConfig | None = None
    batch: BatchShape = field(default_factory=BatchShape)
    drift: DriftConfig = field(default_factory=DriftConfig)
    simplex_divisions: int = 240
    checks: CheckSizes = field(default_factory=CheckSizes)
    out: str = "out"

    def __post_init__(self) -> None:
        _positive_int(self.seed, "seed", 0)
        _positive_int(self.simplex_divisions, "simplex_divisions", 3)
        if not self.methods:
            raise ConfigError("methods must not be empty")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {', '.join(METHODS)}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("config must be a JSON object")
        data = dict(data)
        known = {f.name for f in fields(cls)}
        extra = sorted(set(data) - known)
        if extra:
            raise ConfigError(f"unknown key(s) in config: {', '.join(extra)}")
        kw: dict[str, Any] = {}
        for key in ("seed", "simplex_divisions", "out"):
            if key in data:
                kw[key] = data[key]
        if "methods" in data:
            kw["methods"] = tuple(data["methods"])
        if data.get("gating") is not None:
            g = dict(data["gating"])
            if g.get("level_budgets") is not None:
                g["level_budgets"] = tuple(tuple(p) for p in g["level_budgets"])
            kw["gating"] = _strict(GatingConfig, g, "gating")
        if "batch" in data:
            kw["batch"] = _strict(BatchShape, data["batch"], "batch")
        if "drift" in data:
            d = dict(data["drift"] or {})
            if "magnitude" in d:
                d["magnitude"] = tuple(d["magnitude"])
            kw["drift"] = _strict(DriftConfig, d, "drift")
        if "checks" in data:
            kw["checks"] = _strict(CheckSizes, data["checks"], "checks")
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc

    def gating_for(self, command: str) -> GatingConfig:
        if self.gating is not None:
            return self.gating
        return {"sweep": DRIFT_CONFIG, "simplex-map": SIMPLEX_CONFIG}.get(command, GatingConfig())

    def to_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "methods": list(self.methods),
            "gating": self.gating.to_dict() if self.gating is not None else None,
            "batch": asdict(self.batch),
            "drift": asdict(self.drift),
            "simplex_divisions": self.simplex_divisions,
            "checks": asdict(self.checks),
            "out": self.out,
        }
        out["drift"]["magnitude"] = list(self.drift.magnitude)
        return out


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def dumps_json(obj: Any) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def write_json(path: Path, obj: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_json(obj))
    return path


def _cell(v: Any) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[Mapping[str, Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row[c]) for c in columns])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    return path


def _say(msg: str) -> None:
    sys.stdout.write(msg + "\n")


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------


def _domain_assignment(batch: Batch, n_groups: int, n_domains: int) -> dict[str, dict[str, int]]:
    """Round-robin trajectories into groups and groups into domains."""
    return {
        str(int(tid)): {"group": pos % n_groups, "domain": (pos % n_groups) % n_domains}
        for pos, tid in enumerate(batch.traj_ids)
    }


def generate(cfg: ExperimentConfig):
    """Old and new policies, a batch sampled from the old one, and a domain assignment."""
    rng = np.random.default_rng(cfg.seed)
    shape = cfg.batch
    old = random_policy(rng, [shape.n_actions] * shape.n_states, scale=shape.logit_scale)
    new = perturbed_policy(rng, old, shape.policy_shift)
    batch = sample_batch(rng, old, shape.trajectory_lengths(), center=True, advantage_scale=shape.advantage_scale)
    domains = _domain_assignment(batch, shape.n_groups, shape.n_domains)
    return old, new, batch, domains


def cmd_gen(cfg: ExperimentConfig, out: Path) -> int:
    old, new, batch, domains = generate(cfg)
    gating = cfg.gating_for("gen")
    db = DomainBatch.from_assignment(batch, domains)
    ratios = compute_ratios(new, old, batch)
    objectives = {
        m: method_objective(m, batch, ratios, gating, domains=db if m == "fiberpo-domain" else None)
        for m in cfg.methods
    }
    write_json(out / "batch.json", batch.to_dict())
    write_json(out / "policy_old.json", policy_to_dict(old))
    write_json(out / "policy_new.json", policy_to_dict(new))
    write_json(out / "domains.json", domains)
    write_json(
        out / "objectives.json",
        {"schema_version": SCHEMA_VERSION, "seed": cfg.seed, "gating": gating.to_dict(), "objectives": objectives},
    )
    _say(f"wrote {batch.T} tokens in {batch.n_trajectories} trajectories to {out}")
    for m, v in objectives.items():
        _say(f"{m}: {v!r}")
    return EXIT_OK


def load_generated(directory: Path):
    """Inverse of :func:`cmd_gen`: (old policy, new policy, batch, domain batch)."""
    try:
        batch = Batch.from_dict(json.loads((directory / "batch.json").read_text(encoding="utf-8")))
        old = policy_from_dict(json.loads((directory / "policy_old.json").read_text(encoding="utf-8")))
        new = policy_from_dict(json.loads((directory / "policy_new.json").read_text(encoding="utf-8")))
        dom_path = directory / "domains.json"
        db = DomainBatch.from_json(batch, dom_path) if dom_path.exists() else DomainBatch.trivial(batch)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load generated data from {directory}: {exc}") from exc
    return old, new, batch, db


# ---------------------------------------------------------------------------
# Sweeps and simplex maps
# ---------------------------------------------------------------------------


def _drift(cfg: ExperimentConfig) -> DriftSetup:
    d = cfg.drift
    if d.advantages is None:
        return drift_setup(np.random.default_rng(cfg.seed), length=d.length, magnitude=d.magnitude)
    adv = np.asarray(d.advantages, dtype=np.float64)
    direction = np.asarray(d.directions, dtype=np.float64)
    batch = Batch.from_tokens([[i, 0, 0, i, float(a)] for i, a in enumerate(adv)])
    neg = direction[direction < 0]
    t_max = 0.95 / float(np.max(-neg)) if neg.size else 1.0
    return DriftSetup(batch=batch, direction=direction, t_max=t_max)


def cmd_sweep(cfg: ExperimentConfig, out: Path, method: str) -> int:
    if method not in ("fiberpo", "grpo", "gspo"):
        raise ConfigError(f"sweep supports fiberpo, grpo and gspo, not {method!r}")
    gating = cfg.gating_for("sweep")
    setup = _drift(cfg)
    ts = (
        np.asarray(cfg.drift.t_grid, dtype=np.float64)
        if cfg.drift.t_grid is not None
        else np.linspace(0.0, setup.t_max, cfg.drift.t_points)
    )
    rows = sweep_rows(setup, ts, gating, method=method)
    markers = transition_markers(setup, gating)
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    write_json(
        out / "sweep_meta.json",
        {
            "schema_version": SCHEMA_VERSION,
            "columns": list(SWEEP_COLUMNS),
            "method": method,
            "seed": cfg.seed,
            "gating": gating.to_dict(),
            "advantages": setup.batch.advantages.tolist(),
            "directions": setup.direction.tolist(),
            "baseline": setup.baseline,
            "t_max": setup.t_max,
            "markers": markers,
        },
    )
    _say(f"wrote {len(rows)} sweep rows to {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_simplex_map(cfg: ExperimentConfig, out: Path) -> int:
    gating = cfg.gating_for("simplex-map")
    rows = simplex_rows(gating, cfg.simplex_divisions)
    write_csv(out / "simplex.csv", SIMPLEX_COLUMNS, rows)
    counts: dict[str, int] = {}
    for r in rows:
        for key in ("local", "global"):
            counts[r[key]] = counts.get(r[key], 0) + 1
    write_json(
        out / "simplex_meta.json",
        {
            "schema_version": SCHEMA_VERSION,
            "columns": list(SIMPLEX_COLUMNS),
            "divisions": cfg.simplex_divisions,
            "gating": gating.to_dict(),
            "regime_counts": dict(sorted(counts.items())),
        },
    )
    _say(f"wrote {len(rows)} simplex points to {out / 'simplex.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------


def _report(results: Sequence[CheckResult], out: Path, name: str) -> int:
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        detail = "" if r.passed else f" ({', '.join(r.failures)})"
        _say(f"{status} {r.name}{detail}")
    ok = all(r.passed for r in results)
    write_json(
        out / f"{name}.json",
        {"schema_version": SCHEMA_VERSION, "passed": ok, "checks": [r.to_dict() for r in results]},
    )
    return EXIT_OK if ok else EXIT_FAIL


def cmd_verify(cfg: ExperimentConfig, out: Path, fault: str | None) -> int:
    return _report(run_verify(seed=cfg.seed, fault=fault), out, "verify")


def cmd_equivalence(cfg: ExperimentConfig, out: Path, data: Path | None) -> int:
    if data is None:
        results = [check_equivalence(cfg.checks.equivalence_instances, seed=cfg.seed)]
        return _report(results, out, "equivalence")
    _, _, batch, _ = load_generated(data)
    rep = equivalence_check(batch, cfg.checks.equivalence_gamma, budget=EquivalenceBudget(seed=cfg.seed))
    res = CheckResult("equivalence")
    res.metrics.update(rep.to_dict())
    res.subchecks["argmax_within_1e-3"] = rep.max_abs_diff <= 1e-3
    res.subchecks["objective_within_1e-6"] = abs(rep.objective_gap) <= 1e-6
    return _report([res], out, "equivalence")


@dataclass(frozen=True)
class _MethodGate:
    """Adapter exposing a method's gate to the first-order check."""

    gate: Any
    batch: Batch
    gates: tuple[AtomicGate, ...]

    def gate_ratios(self, ratios) -> np.ndarray:
        return np.asarray(self.gate(self.batch, np.asarray(ratios, dtype=np.float64)), dtype=np.float64)

    def atomic_gates(self) -> list[AtomicGate]:
        return list(self.gates)


def cmd_gradcheck(cfg: ExperimentConfig, out: Path, method: str) -> int:
    """First-order agreement of ``method`` at the reference policy on random
    batches of the configured shape; for the FiberPO gate also the analytic
    Jacobian against finite differences.

    The sequence-level gate of ``gspo`` matches the token-level linear
    objective to first order only when advantages are constant within each
    trajectory, so its batches carry the trajectory-mean advantage on every
    token."""
    gating = cfg.gating_for("gradcheck")
    rng = np.random.default_rng(cfg.seed)
    shape = cfg.batch
    res = CheckResult(f"gradcheck_{method}")
    gaps, rels, precond = [], [], True
    for _ in range(cfg.checks.gradcheck_instances):
        old = random_policy(rng, [shape.n_actions] * shape.n_states, scale=shape.logit_scale)
        batch = sample_batch(rng, old, shape.trajectory_lengths(), advantage_scale=shape.advantage_scale)
        if method == "gspo":
            means = np.bincount(batch.traj_index, weights=batch.advantages) / batch.traj_lengths
            batch = batch.with_advantages(means[batch.traj_index])
        db = DomainBatch.from_assignment(batch, _domain_assignment(batch, shape.n_groups, shape.n_domains))
        spec = method_spec(method, batch, gating, domains=db)
        if method == "fiberpo":
            atoms = tuple(fiberpo_fbg_instance(batch, gating).atomic_gates())
        elif method == "fiberpo-domain":
            atoms = tuple(build_domain_chain(db, gating).atomic_gates())
        else:
            atoms = ()
        rep = first_order_check(_MethodGate(spec.gate, batch, atoms), batch, old, weights=spec.weights)
        precond &= rep.precondition_ok
        gaps.append(rep.value_gap)
        rels.append(rep.max_rel_error)
    res.metrics.update(
        method=method, instances=len(gaps), max_value_gap=max(gaps), max_rel_error=max(rels), gating=str(gating.to_dict())
    )
    res.subchecks["preconditions"] = bool(precond)
    res.subchecks["value_within_1e-12"] = bool(max(gaps) <= 1e-12)
    res.subchecks["gradient_within_1e-5"] = bool(max(rels) <= 1e-5)
    results = [res]
    if method == "fiberpo":
        results.append(check_jacobian(seed=cfg.seed))
    return _report(results, out, "gradcheck")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--method", choices=METHODS, help="method label (overrides the first configured method)")

    p = argparse.ArgumentParser(prog="ratiogate", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="write a seeded batch, policy pair and domain assignment")
    sub.add_parser("sweep", parents=[common], help="objective traces under a one-parameter ratio drift")
    sub.add_parser("simplex-map", parents=[common], help="regime labels over the three-token ratio simplex")
    v = sub.add_parser("verify", parents=[common], help="run the verification suites")
    v.add_argument("--inject-fault", choices=FAULTS, help="add a deliberately broken object to exercise failure reporting")
    e = sub.add_parser("equivalence", parents=[common], help="clipping objective versus its closed-form maximizer")
    e.add_argument("--data", type=Path, help="directory written by 'gen'; random instances when omitted")
    sub.add_parser("gradcheck", parents=[common], help="first-order agreement and Jacobian checks")
    return p


def _resolve(args: argparse.Namespace) -> tuple[ExperimentConfig, Path, str]:
    cfg = ExperimentConfig.load(args.config) if args.config is not None else ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = ExperimentConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, "seed": args.seed})
    out = args.out if args.out is not None else Path(cfg.out)
    method = args.method if args.method is not None else cfg.methods[0]
    return cfg, out, method


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        cfg, out, method = _resolve(args)
        if args.command == "gen":
            if args.method is not None:
                cfg = ExperimentConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, "methods": (method,)})
            return cmd_gen(cfg, out)
        if args.command == "sweep":
            return cmd_sweep(cfg, out, method)
        if args.command == "simplex-map":
            return cmd_simplex_map(cfg, out)
        if args.command == "verify":
            return cmd_verify(cfg, out, args.inject_fault)
        if args.command == "equivalence":
            return cmd_equivalence(cfg, out, args.data)
        return cmd_gradcheck(cfg, out, method)
    except RatiogateError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
