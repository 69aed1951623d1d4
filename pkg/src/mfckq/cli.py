"""Batch front-end: ``mfckq {solve,evaluate,compare,covering-time,meanfield-gap}``.

Exit codes: 0 success, 2 configuration error, 3 coverage failure,
4 non-convergence, 5 resource cap, 6 load error.
"""
from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import sys
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .env import CongestionEnv, CongestionParams, ModelEnv, TabularModel
from .errors import ConfigurationError, ConvergenceError, CoverageError, ResourceError
from .kernels import KernelSpec
from .nagent import evaluate_c1, evaluate_c2, loglog_slope, meanfield_gap
from .solver import (
    SolverConfig,
    explore_and_collect,
    extract_policy,
    make_net,
    measure_covering_time,
    solve_fixed_point,
)
from .storage import LoadError, load_qtable, read_csv, save_qtable, save_store, write_csv, write_json

log = logging.getLogger("mfckq")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_COVERAGE, EXIT_CONVERGENCE, EXIT_RESOURCE, EXIT_LOAD = 0, 2, 3, 4, 5, 6
MANIFEST = "manifest.json"


@dataclass
class EnvironmentSection:
    kind: str = "congestion"      # "congestion" or "constant" (single state, fixed reward)
    num_states: int = 3
    num_actions: int = 3
    a: float = 30.0
    b: float = 10.0
    d: float = 50.0
    c: float = 0.4
    reward: float = 1.0           # kind="constant" only


@dataclass
class SolverSection:
    gamma: float = 0.5
    epsilon: float = 0.25
    explore_epsilon: float = 1.0
    kernel: str = "triangular"
    bandwidth: float | None = None
    metric: str = "lifted"
    fp_tolerance: float = 1e-6
    max_fp_iters: int = 500
    max_explore_steps: int = 2_000_000
    explore_mode: str = "anchors"
    restart_prob: float = 0.3
    record_current_state: bool = False
    grid: str = "spacing"
    max_net_points: int = 2_000_000
    initial_mu: list | None = None


@dataclass
class EvaluationSection:
    n_list: list = field(default_factory=lambda: [5 * n for n in range(1, 21)])
    rollouts: int = 500
    horizon: int = 30
    repeats: int = 20
    kernels: list = field(default_factory=lambda: ["triangular", "1-nn", "3-nn"])
    explore_epsilons: list = field(default_factory=lambda: [0.5, 1.0])
    covering_seeds: int = 20
    covering_epsilon: float = 0.5
    gap_n_list: list = field(default_factory=lambda: [10, 20, 40, 80, 160, 320])
    gap_seeds: int = 20
    gap_rollouts: int = 20
    initial_mu: list | None = None


@dataclass
class OutputSection:
    directory: str = "runs"
    formats: list = field(default_factory=lambda: ["csv", "json"])


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    master_seed: int = 0
    environment: EnvironmentSection = field(default_factory=EnvironmentSection)
    solver: SolverSection = field(default_factory=SolverSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigurationError("config must be a JSON object")
        raw = dict(raw)
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {version}")
        sections = {
            "environment": EnvironmentSection,
            "solver": SolverSection,
            "evaluation": EvaluationSection,
            "output": OutputSection,
        }
        known = {"schema_version", "master_seed", *sections}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        built = {name: _section(kind, raw.get(name, {}), name) for name, kind in sections.items()}
        seed = raw.get("master_seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigurationError("master_seed must be a nonnegative integer")
        cfg = cls(schema_version=version, master_seed=seed, **built)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.env()
        self.solver_config()
        ev = self.evaluation
        if not ev.n_list or any(not isinstance(n, int) or n < 1 for n in ev.n_list):
            raise ConfigurationError("evaluation.n_list must hold positive integers")
        if ev.rollouts < 1 or ev.horizon < 1 or ev.repeats < 1:
            raise ConfigurationError("rollouts, horizon and repeats must be positive")
        for name in ev.kernels:
            KernelSpec.parse(name)

    def env(self):
        e = self.environment
        if e.kind == "congestion":
            return CongestionEnv(CongestionParams(e.num_states, e.num_actions, e.a, e.b, e.d, e.c))
        if e.kind == "constant":
            reward = float(e.reward)
            model = TabularModel(
                1, e.num_actions, lambda x, mu, u, nu: [1.0], lambda x, mu, u, nu: reward, abs(reward)
            )
            return ModelEnv(model)
        raise ConfigurationError(f"unknown environment kind {e.kind!r}")

    def kernel(self, name: str | None = None) -> KernelSpec:
        s = self.solver
        spec = KernelSpec.parse(name or s.kernel)
        return replace(spec, bandwidth=s.bandwidth, metric=s.metric)

    def solver_config(self, seed: int = 0, kernel: str | None = None) -> SolverConfig:
        s = self.solver
        return SolverConfig(
            gamma=s.gamma,
            epsilon=s.epsilon,
            explore_epsilon=s.explore_epsilon,
            kernel=self.kernel(kernel),
            fp_tolerance=s.fp_tolerance,
            max_fp_iters=s.max_fp_iters,
            max_explore_steps=s.max_explore_steps,
            rng_seed=seed,
            explore_mode=s.explore_mode,
            restart_prob=s.restart_prob,
            record_current_state=s.record_current_state,
            grid=s.grid,
            max_net_points=s.max_net_points,
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_SCALARS = {"int": int, "float": (int, float), "bool": bool, "str": str}


def _section(kind, raw, name):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"section {name!r} must be an object")
    allowed = {f.name: f for f in fields(kind)}
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown keys in {name!r}: {sorted(unknown)}")
    for key, value in raw.items():
        declared = allowed[key].type
        base = declared.split("|")[0].strip()
        if value is None:
            if "None" not in declared:
                raise ConfigurationError(f"{name}.{key} may not be null")
            continue
        if base == "list":
            ok = isinstance(value, list)
        else:
            ok = isinstance(value, _SCALARS[base]) and not (base != "bool" and isinstance(value, bool))
        if not ok:
            raise ConfigurationError(f"{name}.{key} must be of type {declared}, got {value!r}")
    values = dict(raw)
    for key, f in allowed.items():
        if key in values and f.type.startswith("float") and isinstance(values[key], int):
            values[key] = float(values[key])
    return kind(**values)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def derive_seed(master: int, name: str) -> int:
    """Named sub-stream of the master seed."""
    seq = np.random.SeedSequence(master, spawn_key=(zlib.crc32(name.encode()),))
    return int(seq.generate_state(1, dtype=np.uint32)[0])


class Run:
    """Tracks produced files and seeds; writes the manifest last."""

    def __init__(self, command: str, cfg: ExperimentConfig, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.seeds: dict[str, int] = {"master": cfg.master_seed}
        self.started = time.time()

    def seed(self, name: str) -> int:
        value = derive_seed(self.cfg.master_seed, name)
        self.seeds[name] = value
        return value

    def path(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.out / name

    def finish(self) -> Path:
        listed = {p.name for p in self.out.iterdir() if p.is_file() and not p.name.endswith(".tmp")}
        listed.add(MANIFEST)
        return write_json(self.out / MANIFEST, {
            "command": self.command,
            "config_hash": self.cfg.digest(),
            "toolkit_version": __version__,
            "wall_clock_seconds": round(time.time() - self.started, 3),
            "seeds": self.seeds,
            "files": sorted(listed),
            "produced": list(self.files),
        })


def _check_dims(table, env, path):
    net = table.net
    if (net.num_states, net.num_actions) != (env.num_states, env.num_actions):
        raise LoadError(
            f"{path}: table is for |X|={net.num_states}, |U|={net.num_actions}; "
            f"environment has |X|={env.num_states}, |U|={env.num_actions}"
        )
    if not np.array_equal(net.support_mask, env.support_mask):
        raise LoadError(f"{path}: action mask differs from the environment's")


def _initial_mu(cfg: ExperimentConfig, values):
    return None if values is None else np.asarray(values, dtype=float)


def _solve(cfg: ExperimentConfig, run: Run, kernel: str | None = None, tag: str = ""):
    env = cfg.env()
    scfg = cfg.solver_config(run.seed("exploration" + tag), kernel)
    net = make_net(env, scfg)
    store = explore_and_collect(env, net, scfg, _initial_mu(cfg, cfg.solver.initial_mu))
    table = solve_fixed_point(store, net, scfg)
    return env, net, store, table


def cmd_solve(cfg: ExperimentConfig, run: Run, args) -> None:
    env, net, store, table = _solve(cfg, run)
    save_qtable(run.path("qtable.json"), table)
    save_store(run.path("samplestore.json"), store, net)
    write_csv(run.path("deltas.csv"), ["sweep", "delta"], [(i + 1, d) for i, d in enumerate(table.deltas)])
    write_csv(
        run.path("solve_summary.csv"),
        ["net_size", "actions", "epsilon", "covering_radius", "covering_step", "sweeps", "contraction_ok"],
        [(len(net), net.n_actions_net, net.epsilon, net.covering_radius, store.covering_step, table.sweeps,
          table.contraction_ok())],
    )
    log.info("solved: %d net points, %d sweeps", len(net), table.sweeps)


def _params(cfg: ExperimentConfig) -> CongestionParams:
    env = cfg.env()
    if not isinstance(env, CongestionEnv):
        raise ConfigurationError("N-agent evaluation needs the congestion environment")
    return env.params


def cmd_evaluate(cfg: ExperimentConfig, run: Run, args) -> None:
    params = _params(cfg)
    table = load_qtable(args.qtable)
    _check_dims(table, cfg.env(), args.qtable)
    policy = extract_policy(table)
    ev = cfg.evaluation
    seed = run.seed("rollouts")
    rows = []
    for n in ev.n_list:
        est = evaluate_c1(policy, params, n, ev.rollouts, ev.horizon, cfg.solver.gamma, seed, ev.repeats, args.threads)
        rows.append((n, est.mean, est.ci_low, est.ci_high, ev.repeats, ev.rollouts, ev.horizon))
    write_csv(run.path("c1.csv"), ["n_agents", "c1", "ci_low", "ci_high", "repeats", "rollouts", "horizon"], rows)


def cmd_compare(cfg: ExperimentConfig, run: Run, args) -> None:
    params = _params(cfg)
    env = cfg.env()
    policies = []
    if args.qtable:
        for p in args.qtable:
            table = load_qtable(p)
            _check_dims(table, env, p)
            policies.append((Path(p).stem, extract_policy(table)))
    else:
        for name in cfg.evaluation.kernels:
            _, _, _, table = _solve(cfg, run, kernel=name, tag=":" + name)
            policies.append((cfg.kernel(name).label, extract_policy(table)))
    if len(policies) < 2:
        raise ConfigurationError("compare needs at least two policies")
    ev = cfg.evaluation
    seed = run.seed("rollouts")
    rows = []
    for (l1, p1), (l2, p2) in itertools.combinations(policies, 2):
        for n in ev.n_list:
            est = evaluate_c2(p1, p2, params, n, ev.rollouts, ev.horizon, cfg.solver.gamma, seed, ev.repeats,
                              args.threads)
            rows.append((l1, l2, n, est.mean, est.ci_low, est.ci_high, est.excluded))
    write_csv(run.path("c2.csv"), ["policy1", "policy2", "n_agents", "c2", "ci_low", "ci_high", "excluded"], rows)


def cmd_covering_time(cfg: ExperimentConfig, run: Run, args) -> None:
    env = cfg.env()
    ev = cfg.evaluation
    base = cfg.solver_config(run.seed("covering"))
    base = replace(base, epsilon=ev.covering_epsilon)
    net = make_net(env, base)
    q = None
    if args.qtable:
        q = load_qtable(args.qtable)
        _check_dims(q, env, args.qtable)
        if len(q.net) != len(net) or q.net.epsilon != net.epsilon:
            raise LoadError(f"{args.qtable}: table net does not match covering_epsilon={ev.covering_epsilon}")
        q.net = net
    per_seed, summary = [], []
    for ee in ev.explore_epsilons:
        stats = measure_covering_time(env, net, replace(base, explore_epsilon=ee), ev.covering_seeds,
                                      _initial_mu(cfg, cfg.solver.initial_mu), q=q)
        for s, steps in zip(stats.seeds, stats.steps):
            per_seed.append((ee, s, steps, "ok" if steps is not None else "coverage_failure"))
        summary.append((ee, len(stats.seeds), len(stats.failures), stats.mean, stats.median, stats.max,
                        stats.quantile(0.1), stats.quantile(0.9)))
    write_csv(run.path("covering_time.csv"), ["explore_epsilon", "seed", "covering_step", "status"], per_seed)
    write_csv(run.path("covering_summary.csv"),
              ["explore_epsilon", "runs", "failures", "mean", "median", "max", "q10", "q90"], summary)


def cmd_meanfield_gap(cfg: ExperimentConfig, run: Run, args) -> None:
    params = _params(cfg)
    table = load_qtable(args.qtable)
    _check_dims(table, cfg.env(), args.qtable)
    ev = cfg.evaluation
    base = run.seed("gap")
    seeds = [base + s for s in range(ev.gap_seeds)]
    rows = meanfield_gap(extract_policy(table), params, ev.gap_n_list, ev.horizon, cfg.solver.gamma, seeds,
                         ev.gap_rollouts, _initial_mu(cfg, ev.initial_mu), args.threads)
    write_csv(run.path("gap.csv"), ["n_agents", "seed", "nagent_value", "meanfield_value", "gap", "tail_bound"],
              [(r.n_agents, r.seed, r.nagent_value, r.meanfield_value, r.gap, r.tail_bound) for r in rows])
    slope, medians = loglog_slope(rows)
    write_csv(run.path("gap_summary.csv"), ["n_agents", "median_gap", "loglog_slope"],
              [(n, m, slope) for n, m in medians.items()])


COMMANDS = {
    "solve": cmd_solve,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "covering-time": cmd_covering_time,
    "meanfield-gap": cmd_meanfield_gap,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfckq", description="Kernel-based Q-learning for mean-field control")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--out", help="output directory (overrides output.directory)")
        p.add_argument("--threads", type=int, default=1, help="worker threads; never changes results")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("evaluate", "meanfield-gap"):
            p.add_argument("--qtable", required=True)
        elif name == "compare":
            p.add_argument("--qtable", nargs="*", default=[], help="tables to compare; default solves config kernels")
        elif name == "covering-time":
            p.add_argument("--qtable", help="table for the greedy part of exploration")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigurationError("--seed must be nonnegative")
            cfg = replace(cfg, master_seed=args.seed)
        if args.threads < 1:
            raise ConfigurationError("--threads must be positive")
        run = Run(args.command, cfg, Path(args.out or cfg.output.directory))
        COMMANDS[args.command](cfg, run, args)
        run.finish()
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CoverageError as exc:
        print(f"coverage failure: {exc}; first unvisited cells {list(exc.unvisited[:10])}", file=sys.stderr)
        return EXIT_COVERAGE
    except ConvergenceError as exc:
        print(f"non-convergence: {exc}; deltas {exc.deltas[-5:]}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except ResourceError as exc:
        print(f"resource cap: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except LoadError as exc:
        print(f"load error: {exc}", file=sys.stderr)
        return EXIT_LOAD
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
