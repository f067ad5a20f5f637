"""Command-line entry point: ``lidarunc (sim|gradcheck|bench)``.

Every subcommand reads an optional JSON config (``--config``), applies
``--seed`` and ``--set key=value`` overrides on top, and prints a summary as
``key=value`` lines on stdout.

Exit codes: 0 ok, 1 tolerance or timing contract breached, 2 bad config,
3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import statistics
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import eigen_jacobian
from .sim import (
    ConfigError,
    OutputError,
    SimConfig,
    generate_scenario,
    relative_gaps,
    run_comparison,
    time_propagators,
    write_csv,
)

log = logging.getLogger("lidarunc")

EXIT_OK = 0
EXIT_BREACH = 1
EXIT_CONFIG = 2
EXIT_IO = 3


@dataclass(frozen=True)
class GradcheckConfig:
    k: tuple = (5, 20, 100)
    n_seeds: int = 3
    seed: int = 0
    h_rel: float = 1e-6
    tol_lambda: float = 1e-5
    tol_vec: float = 1e-4

    def __post_init__(self):
        ks = (self.k,) if isinstance(self.k, int) else tuple(self.k)
        if not ks or any(not isinstance(k, int) or k < 3 for k in ks):
            raise ConfigError("k", f"cloud sizes must be integers >= 3, got {self.k!r}")
        object.__setattr__(self, "k", ks)
        if self.n_seeds < 1:
            raise ConfigError("n_seeds", f"must be >= 1, got {self.n_seeds}")
        for key in ("h_rel", "tol_lambda", "tol_vec"):
            if not getattr(self, key) > 0:
                raise ConfigError(key, f"must be positive, got {getattr(self, key)}")


@dataclass(frozen=True)
class BenchConfig:
    ks: tuple = (300, 600, 900)
    repeats: int = 100
    seed: int = 0
    rigorous_only: bool = False
    lufa_max_ratio: float = 1.5  # fast step, largest k over smallest k
    rigorous_min_ratio: float = 2.0
    multiplier: float = 1.0  # loosens both contracts on noisy machines

    def __post_init__(self):
        ks = tuple(self.ks)
        if len(ks) < 2 or any(not isinstance(k, int) or k < 4 for k in ks):
            raise ConfigError("ks", f"need at least two integer sizes >= 4, got {self.ks!r}")
        object.__setattr__(self, "ks", tuple(sorted(ks)))
        if self.repeats < 1:
            raise ConfigError("repeats", f"must be >= 1, got {self.repeats}")
        if not self.multiplier >= 1.0:
            raise ConfigError("multiplier", f"must be >= 1, got {self.multiplier}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, pairs) -> dict:
    """Apply ``key=value`` strings; dotted keys reach nested sections."""
    data = json.loads(json.dumps(data))
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(pair, "override must look like key=value")
        *parents, leaf = key.split(".")
        node = data
        for p in parents:
            if not isinstance(node.get(p), dict):
                raise ConfigError(key, "unknown config key")
            node = node[p]
        if leaf not in node:
            raise ConfigError(key, "unknown config key")
        node[leaf] = _parse_value(value)
    return data


def _build(kind, data: dict):
    if kind is SimConfig:
        return SimConfig.from_dict(data)
    known = {f.name for f in dataclasses.fields(kind)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown config key")
    try:
        return kind(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("config", str(exc)) from exc


def load_config(kind, path=None, seed=None, overrides=()):
    base = dataclasses.asdict(kind())
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise OutputError(f"cannot read {path}: {exc.strerror or exc}") from exc
        try:
            loaded = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(str(path), "config must be a JSON object")
        for key, value in loaded.items():
            if key not in base:
                raise ConfigError(key, "unknown config key")
            if isinstance(base[key], dict) and isinstance(value, dict):
                for sub in value:
                    if sub not in base[key]:
                        raise ConfigError(f"{key}.{sub}", "unknown config key")
                base[key].update(value)
            else:
                base[key] = value
    data = apply_overrides(base, overrides)
    if seed is not None:
        data["seed"] = seed
    return _build(kind, data)


def _emit(lines: dict, out=None):
    text = "".join(f"{k}={_fmt(v)}\n" for k, v in lines.items())
    sys.stdout.write(text)
    if out is not None:
        try:
            Path(out).write_text(text, encoding="ascii")
        except OSError as exc:
            raise OutputError(f"cannot write {out}: {exc.strerror or exc}") from exc


def _fmt(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def cmd_sim(args) -> int:
    cfg = load_config(SimConfig, args.config, args.seed, args.set)
    out = Path(args.out or "sim.csv")
    if not out.parent.is_dir():
        raise OutputError(f"cannot write {out}: directory does not exist")
    records = run_comparison(generate_scenario(cfg), cfg)
    write_csv(records, out)
    summary = {"csv": out, "seed": cfg.seed, "rows": len(records)}
    summary.update({f"max_rel_gap_{name}": v for name, v in relative_gaps(records).items()})
    for mode in ("fast", "rigorous", "frozen"):
        t = [r.t_lufa_ns for r in records if r.mode == mode]
        summary[f"steps_{mode}"] = len(t)
        if t:
            summary[f"median_t_lufa_ns_{mode}"] = int(statistics.median(t))
    t_rig = [r.t_rig_ns for r in records]
    if t_rig:
        summary["median_t_rig_ns"] = int(statistics.median(t_rig))
    _emit(summary)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(GradcheckConfig, args.config, args.seed, args.set)
    worst_lam = worst_vec = 0.0
    failures = []
    for k in cfg.k:
        for seed in range(cfg.seed, cfg.seed + cfg.n_seeds):
            pts = eigen_jacobian.seeded_cloud(seed, k)
            e_lam, e_vec = eigen_jacobian.gradcheck_cloud(pts, cfg.h_rel)
            worst_lam = max(worst_lam, e_lam)
            worst_vec = max(worst_vec, e_vec)
            if not (e_lam < cfg.tol_lambda and e_vec < cfg.tol_vec):
                failures.append((seed, k, e_lam, e_vec))
    summary = {"clouds": len(cfg.k) * cfg.n_seeds,
               "max_rel_err_lambda": worst_lam, "max_rel_err_vec": worst_vec,
               "tol_lambda": cfg.tol_lambda, "tol_vec": cfg.tol_vec,
               "failures": len(failures)}
    for n, (seed, k, e_lam, e_vec) in enumerate(failures):
        summary[f"fail_{n}"] = f"seed:{seed},k:{k},err_lambda:{e_lam:.3g},err_vec:{e_vec:.3g}"
    summary["ok"] = not failures
    _emit(summary, args.out)
    return EXIT_OK if not failures else EXIT_BREACH


def cmd_bench(args) -> int:
    cfg = load_config(BenchConfig, args.config, args.seed, args.set)
    rigorous_only = cfg.rigorous_only or args.rigorous_only
    if cfg.repeats == 1:
        log.warning("repeats=1: a single timing sample is unstable; use >= 100")
    samples = generate_scenario(SimConfig(seed=cfg.seed, points_per_lidar=_per_lidar(max(cfg.ks))))
    times = time_propagators(samples, cfg.ks, cfg.repeats, rigorous_only)
    lo, hi = cfg.ks[0], cfg.ks[-1]
    summary = {"repeats": cfg.repeats}
    for k, (t_fast, t_rig) in times.items():
        if not rigorous_only:
            summary[f"median_lufa_ns_k{k}"] = t_fast
        summary[f"median_rigorous_ns_k{k}"] = t_rig
    rig_ratio = times[hi][1] / times[lo][1]
    rig_ok = rig_ratio >= cfg.rigorous_min_ratio / cfg.multiplier
    ok = rig_ok
    if not rigorous_only:
        lufa_ratio = times[hi][0] / times[lo][0]
        lufa_ok = lufa_ratio <= cfg.lufa_max_ratio * cfg.multiplier
        summary[f"lufa_ratio_{hi}_{lo}"] = lufa_ratio
        summary["lufa_constant_ok"] = lufa_ok
        ok = ok and lufa_ok
    summary[f"rigorous_ratio_{hi}_{lo}"] = rig_ratio
    summary["rigorous_linear_ok"] = rig_ok
    summary["ok"] = ok
    _emit(summary, args.out)
    return EXIT_OK if ok else EXIT_BREACH


def _per_lidar(n_points: int, n_lidars: int = SimConfig.n_lidars) -> int:
    return max(SimConfig.points_per_lidar, -(-n_points // n_lidars))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidarunc",
        description="LiDAR point uncertainty and fast covariance propagation tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "sim": "run the plane simulation and write the comparison CSV",
        "gradcheck": "check the rigorous Jacobians against finite differences",
        "bench": "time the fast step against the rigorous pass",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--out", type=Path,
                       help="output path (CSV for sim, summary copy otherwise)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable, dotted for nested)")
        if name == "bench":
            p.add_argument("--rigorous-only", action="store_true",
                           help="time only the rigorous pass")
    return parser


COMMANDS = {"sim": cmd_sim, "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OutputError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
