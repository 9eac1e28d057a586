"""Command-line experiment runner.

    rwre <subcommand> [--config FILE] [--set key=value ...] [--seed N]
                      [--out-dir DIR] [--workers N] [--dry-run]

The config file (YAML or JSON) is merged over the subcommand defaults, then
``--set`` and the dedicated flags override it.  The merged config is written
to ``<out-dir>/config.json`` and its hash stamped on every artifact.
Exit status: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import datetime
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, criteria, reporting, theory
from .environment import Environment, EnvironmentLaw, LawError, save_environment
from .geometry import (BoxSpec, Direction, GeometryError, Slab, build_box,
                       rotation_from_direction)
from .quenched import ExitProblem, SolverConfig, SolverError, exit_distribution
from .walker import (STOP_REASONS, StopRule, annealed_batch, regeneration_times,
                     simulate_quenched, walk_seeds, asymptotic_direction)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
HASH_EXCLUDED = ("out_dir", "workers")

log = logging.getLogger("rwre")

COMMON = {
    "d": 2,
    "seed": 0,
    "law": {"kind": "drift", "kappa": 0.05},
    "solver": {"mode": "sweeps", "tolerance": 1e-12, "max_sweeps": 1000000},
    "out_dir": "rwre-out",
    "workers": None,
}

DEFAULTS = {
    "theory": {"gamma_d": None, "gamma": None, "beta": None, "safety": 0.01,
               "literal_stop": False},
    "quenched-exit": {"box": {"neg_extent": 1, "pos_extent": 1, "transverse": 1,
                              "direction": None}, "start": None},
    "simulate": {"mode": "annealed", "n_walks": 100, "start": None, "export_paths": 5,
                 "stop": {"kind": "slab", "b": 1.0, "L": 10, "direction": None,
                          "level": 10.0, "overshoot": 0.0, "n_steps": 100,
                          "step_cap": 10 ** 8}},
    "regen": {"n_walks": 100, "direction": None, "level": 50.0, "overshoot": 10.0,
              "margin": None},
    "effective-criterion": {"direction": None, "L_grid": [6, 10, 14], "ltilde_rule": "3L",
                            "alphas": list(criteria.DEFAULT_ALPHAS), "c1": 1.0, "c2": 5.0,
                            "n_env": 100},
    "tgamma-fit": {"direction": None, "gamma": 0.4, "b": 1.0, "L_grid": [4, 6, 8, 10],
                   "n_walks": 10000},
    "atypical-tail": {"direction": None, "beta": 0.8, "c": 0.5, "zeta": 0.5, "gamma": 0.45,
                      "L_grid": [4, 6, 8], "n_env": 100, "c_d": None},
    "seed-check": {"direction": None, "beta0": 0.6, "beta": 0.6, "rho_coef": 5.0,
                   "gamma": 0.45, "L_grid": [6, 10], "n_env": 100},
    "decompose": {"direction": None, "L": 6, "transverse": None, "alpha": 0.3, "a": None,
                  "gamma": 0.45, "betas": None, "ks": None, "n_env": 100},
    "env-snapshot": {"box": {"neg_extent": 4, "pos_extent": 8, "transverse": 18,
                             "direction": None}, "include_boundary": False,
                     "file": "environment.csv"},
}


class ConfigError(ValueError):
    pass


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a mapping")
    node[keys[-1]] = value


def load_config(subcommand: str, path=None, overrides=(), flags=None) -> dict:
    cfg = deep_merge(COMMON, DEFAULTS[subcommand])
    if path:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        cfg = deep_merge(cfg, data)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        _set_path(cfg, key.strip(), yaml.safe_load(raw))
    for k, v in (flags or {}).items():
        if v is not None:
            _set_path(cfg, k, v)
    if os.environ.get("RWRE_OUT_DIR") and not (flags or {}).get("out_dir"):
        cfg["out_dir"] = os.environ["RWRE_OUT_DIR"]
    if os.environ.get("RWRE_WORKERS") and not (flags or {}).get("workers"):
        cfg["workers"] = int(os.environ["RWRE_WORKERS"])
    if cfg["workers"] is None:
        cfg["workers"] = os.cpu_count() or 1
    return cfg


def hashed_view(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k not in HASH_EXCLUDED}


# --- config interpretation ----------------------------------------------------

def make_law(cfg: dict) -> EnvironmentLaw:
    d = int(cfg["d"])
    spec = cfg["law"]
    kind = spec.get("kind")
    kappa = float(spec["kappa"])
    if kind == "dirichlet":
        alpha = spec.get("alpha") or [1.0] * (2 * d)
        law = EnvironmentLaw.dirichlet(alpha, kappa)
    elif kind == "eps":
        law = EnvironmentLaw.epsilon_biased(d, float(spec.get("delta", 0.0)), kappa)
    elif kind == "drift":
        law = EnvironmentLaw.deterministic_drift(d, kappa)
    else:
        raise ConfigError(f"unknown law kind {kind!r}")
    if law.d != d:
        raise ConfigError("law dimension does not match d")
    return law


def make_direction(cfg: dict, value) -> Direction:
    d = int(cfg["d"])
    if value is None:
        return Direction.axis(d)
    if len(value) != d:
        raise ConfigError("direction length does not match d")
    return Direction.of(value)


def make_solver(cfg: dict) -> SolverConfig:
    s = cfg["solver"]
    return SolverConfig(float(s["tolerance"]), int(s["max_sweeps"]), s["mode"])


def make_box_spec(cfg: dict, box: dict) -> BoxSpec:
    rot = rotation_from_direction(make_direction(cfg, box.get("direction")))
    return BoxSpec(rot, float(box["neg_extent"]), float(box["pos_extent"]),
                   float(box["transverse"]))


def _start(cfg, value):
    d = int(cfg["d"])
    return np.zeros(d, dtype=np.int64) if value is None else np.array(value, dtype=np.int64)


def make_stop(cfg: dict, stop: dict, box=None) -> StopRule:
    kind = stop["kind"]
    cap = int(stop.get("step_cap", 10 ** 8))
    direction = make_direction(cfg, stop.get("direction"))
    if kind == "slab":
        return StopRule.for_slab(Slab(direction, float(stop["b"]), float(stop["L"])), cap)
    if kind == "level":
        return StopRule.for_level(direction, float(stop["level"]), float(stop["overshoot"]), cap)
    if kind == "steps":
        return StopRule.for_steps(int(stop["n_steps"]))
    if kind == "box":
        return StopRule.for_box(build_box(make_box_spec(cfg, stop["box"])), cap)
    raise ConfigError(f"unknown stop kind {kind!r}")


# --- subcommands ----------------------------------------------------------------

class Run:
    def __init__(self, subcommand: str, cfg: dict):
        self.sub = subcommand
        self.cfg = cfg
        self.chash = reporting.config_hash(hashed_view(cfg))
        self.prov = reporting.provenance(subcommand, self.chash, cfg["seed"])
        self.out = Path(cfg["out_dir"])
        self.artifacts = []

    def path(self, name: str) -> Path:
        return self.out / name

    def json(self, name, payload):
        self.artifacts.append(reporting.write_json(self.path(name), self.prov, payload))

    def csv(self, name, columns, rows, trailer=None):
        self.artifacts.append(reporting.write_csv(self.path(name), self.prov, columns, rows,
                                                  trailer))

    def dat(self, name, xs, ys):
        self.artifacts.append(reporting.write_dat(self.path(name), self.prov, xs, ys))


def cmd_theory(run: Run) -> str:
    c = run.cfg
    out = {}
    summary = []
    if c["gamma_d"] is not None:
        g = theory.gamma_d(int(c["gamma_d"]))
        out["gamma_d"] = {"d": int(c["gamma_d"]), "value": g}
        summary.append(f"{g:.6f}")
    if c["gamma"] is not None:
        gam, d = float(c["gamma"]), int(c["d"])
        lad = theory.build_ladder(gam, d, float(c["safety"]), bool(c["literal_stop"]))
        out["fixed_point"] = theory.fixed_point(gam, d)
        out["ladder"] = lad.to_record()
        if c["beta"] is not None:
            out["f_beta"] = theory.f_beta(gam, d, float(c["beta"]))
        summary.append(f"x*={out['fixed_point']:.6f} feasible={lad.feasible} n={lad.n}")
    if not out:
        raise ConfigError("theory needs gamma_d or gamma")
    run.json("theory.json", out)
    return " ".join(summary)


def cmd_quenched_exit(run: Run) -> str:
    c = run.cfg
    law = make_law(c)
    spec = make_box_spec(c, c["box"])
    box = build_box(spec)
    env = Environment(law, int(c["seed"]))
    start = _start(c, c["start"])
    ed = exit_distribution(ExitProblem(env, box, start), make_solver(c))
    rows = [list(s) + [int(t), p] for s, t, p in zip(box.boundary, box.target, ed.probs)]
    cols = [f"x{i + 1}" for i in range(box.d)] + ["plus", "prob"]
    run.csv("exit_distribution.csv", cols, rows)
    run.json("exit.json", {"box": spec.to_record(), "start": start, "p_plus": ed.p_plus,
                           "p_other": ed.p_other, "rho": ed.rho,
                           "solver_residual": ed.solver_residual,
                           "n_interior": len(box.interior), "n_boundary": len(box.boundary)})
    return f"p_plus={ed.p_plus:.17g} rho={ed.rho:.17g}"


def cmd_simulate(run: Run) -> str:
    c = run.cfg
    law = make_law(c)
    stop = make_stop(c, c["stop"])
    n = int(c["n_walks"])
    if n < 1:
        raise ConfigError("n_walks must be positive")
    seeds = walk_seeds(int(c["seed"]), np.arange(n))
    start = _start(c, c["start"])
    if c["mode"] == "annealed":
        batch = annealed_batch(law, start, stop, seeds, record=True)
    elif c["mode"] == "quenched":
        env = Environment(law, int(c["seed"]))
        from .walker import run_walks, _step_key
        keys = np.array([_step_key(int(s)) for s in seeds], dtype=np.uint64)
        batch = run_walks(lambda ids, sites: env.kernels(sites),
                          np.repeat(start[None, :], n, axis=0), keys, stop, record=True)
    else:
        raise ConfigError("mode must be annealed or quenched")
    counts = {r: batch.count(r) for r in STOP_REASONS}
    rows = [[i, int(seeds[i]), STOP_REASONS[batch.reasons[i]], int(batch.n_steps[i])]
            + list(batch.terminal[i]) for i in range(n)]
    run.csv("walks.csv", ["walk", "seed", "stop_reason", "steps"]
            + [f"x{i + 1}" for i in range(law.d)], rows)
    for i in range(min(n, int(c["export_paths"]))):
        p = batch.paths[i]
        run.csv(f"path_{i:04d}.csv", ["step"] + [f"x{j + 1}" for j in range(law.d)],
                [[k] + list(s) for k, s in enumerate(p)])
    run.json("simulate.json", {"counts": counts, "n_walks": n})
    return " ".join(f"{k}={v}" for k, v in counts.items() if v)


def cmd_regen(run: Run) -> str:
    c = run.cfg
    law = make_law(c)
    l = make_direction(c, c["direction"])
    stop = StopRule.for_level(l, float(c["level"]), float(c["overshoot"]))
    n = int(c["n_walks"])
    batch = annealed_batch(law, _start(c, None), stop, walk_seeds(int(c["seed"]), np.arange(n)),
                           record=True)
    rows = []
    n_conf = 0
    for i, p in enumerate(batch.paths):
        rec = regeneration_times(p, l, c["margin"])
        n_conf += len(rec.confirmed_times)
        for k, t in enumerate(rec.confirmed_times):
            rows.append([i, k, t, float(p[t] @ l.vector)])
    run.csv("regenerations.csv", ["walk", "index", "time", "level"], rows)
    est = asymptotic_direction(batch.terminal)
    run.json("regen.json", {"n_walks": n, "n_confirmed": n_conf,
                            "direction_estimate": est.direction, "dispersion": est.dispersion})
    return f"confirmed={n_conf} direction={np.round(est.direction, 6).tolist()}"


def _fit_outputs(run: Run, name: str, fit: criteria.DecayFit) -> str:
    rows = [[L, cnt, m, f, lf] for L, cnt, m, f, lf in
            zip(fit.levels, fit.counts, fit.n, fit.freqs, fit.log_freqs)]
    summary = (f"fit exponent={fit.exponent:.17g} delta={fit.slope:.17g} "
               f"delta_ci={fit.slope_ci:.17g} available={fit.fit_available} {fit.note}").strip()
    run.csv(f"{name}.csv", ["L", "count", "n", "freq", "log_freq"], rows, trailer=[summary])
    keep = [i for i, c in enumerate(fit.counts) if c > 0]
    run.dat(f"{name}.dat", [fit.levels[i] ** fit.exponent for i in keep],
            [fit.log_freqs[i] for i in keep])
    run.json(f"{name}.json", fit.to_record())
    return summary


def cmd_effective_criterion(run: Run) -> str:
    c = run.cfg
    law = make_law(c)
    rep = criteria.effective_criterion(
        law, make_direction(c, c["direction"]), c["L_grid"], c["ltilde_rule"], c["alphas"],
        float(c["c1"]), float(c["c2"]), int(c["n_env"]), int(c["seed"]), make_solver(c),
        int(c["workers"]))
    cols = ["L", "Ltilde", "a", "mean", "ci", "prefactor", "product"]
    run.csv("criterion.csv", cols, [[e[k] for k in cols] for e in rep.entries])
    run.json("criterion.json", rep.to_record())
    return f"inf_product={rep.inf_product:.6g} verdict={rep.verdict}"


def cmd_tgamma_fit(run: Run) -> str:
    c = run.cfg
    fit = criteria.tgamma_backexit_fit(make_law(c), make_direction(c, c["direction"]),
                                       float(c["gamma"]), float(c["b"]), c["L_grid"],
                                       int(c["n_walks"]), int(c["seed"]))
    return _fit_outputs(run, "tgamma_fit", fit)


def cmd_atypical_tail(run: Run) -> str:
    c = run.cfg
    fit = criteria.atypical_tail(make_law(c), make_direction(c, c["direction"]),
                                 float(c["beta"]), float(c["c"]), float(c["zeta"]), c["L_grid"],
                                 int(c["n_env"]), int(c["seed"]), c["gamma"], c["c_d"],
                                 make_solver(c), int(c["workers"]))
    return _fit_outputs(run, "atypical_tail", fit)


def cmd_seed_check(run: Run) -> str:
    c = run.cfg
    fit = criteria.seed_estimate_check(make_law(c), make_direction(c, c["direction"]),
                                       float(c["beta0"]), float(c["beta"]), float(c["rho_coef"]),
                                       c["L_grid"], int(c["n_env"]), int(c["seed"]),
                                       float(c["gamma"]), make_solver(c), int(c["workers"]))
    return _fit_outputs(run, "seed_check", fit)


def _decompose_params(c: dict):
    L = float(c["L"])
    gamma = float(c["gamma"])
    a = float(c["a"]) if c["a"] is not None else L ** (-float(c["alpha"]))
    betas = c["betas"]
    if betas is None:
        lad = theory.build_ladder(gamma, int(c["d"]))
        if not lad.feasible:
            raise ConfigError("no feasible ladder for this gamma; give betas explicitly")
        betas = lad.betas + [1.0]
    ks = c["ks"] if c["ks"] is not None else [1.0] * (len(betas) + 1)
    Lt = float(c["transverse"]) if c["transverse"] is not None else 3.0 * L
    return L, Lt, a, gamma, [float(b) for b in betas], [float(k) for k in ks]


def cmd_decompose(run: Run) -> str:
    c = run.cfg
    L, Lt, a, gamma, betas, ks = _decompose_params(c)
    spec = BoxSpec.criterion(rotation_from_direction(make_direction(c, c["direction"])), L, Lt)
    dec = criteria.decompose_rho_expectation(make_law(c), spec, a, gamma, betas, ks,
                                             int(c["n_env"]), int(c["seed"]), make_solver(c),
                                             int(c["workers"]))
    bounds = [None] + dec.thresholds
    rows = [[nm, up, lo, cnt, s] for nm, up, lo, cnt, s in
            zip(dec.names, bounds, dec.thresholds + [0.0], dec.counts, dec.partial_sums)]
    run.csv("decomposition.csv", ["band", "upper", "lower", "count", "partial_sum"], rows,
            trailer=[f"total={dec.total:.17g}"])
    run.json("decomposition.json", dec.to_record())
    return f"total={dec.total:.6g} counts={dec.counts}"


def cmd_env_snapshot(run: Run) -> str:
    c = run.cfg
    box = build_box(make_box_spec(c, c["box"]))
    region = box.interior
    if c["include_boundary"]:
        region = np.concatenate([box.interior, box.boundary])
    env = Environment(make_law(c), int(c["seed"]))
    path = save_environment(env, region, run.path(c["file"]))
    run.artifacts.append(path)
    return f"sites={len(region)} file={path.name}"


COMMANDS = {
    "theory": cmd_theory,
    "quenched-exit": cmd_quenched_exit,
    "simulate": cmd_simulate,
    "regen": cmd_regen,
    "effective-criterion": cmd_effective_criterion,
    "tgamma-fit": cmd_tgamma_fit,
    "atypical-tail": cmd_atypical_tail,
    "seed-check": cmd_seed_check,
    "decompose": cmd_decompose,
    "env-snapshot": cmd_env_snapshot,
}


def dry_run_summary(sub: str, cfg: dict) -> str:
    make_law(cfg) if sub != "theory" else None
    grid = {}
    if "L_grid" in cfg:
        grid["L_grid"] = list(cfg["L_grid"])
    if sub == "effective-criterion":
        grid["points"] = [
            {"L": L, "Ltilde": criteria.transverse_for(L, cfg["ltilde_rule"]),
             "a": [round(a, 12) for _, a in criteria.a_values(L, cfg["alphas"])]}
            for L in cfg["L_grid"]]
    if sub == "decompose":
        L, Lt, a, gamma, betas, ks = _decompose_params(cfg)
        grid.update({"L": L, "Ltilde": Lt, "a": a, "betas": betas, "ks": ks,
                     "thresholds": criteria.band_thresholds(L, gamma, betas, ks)})
    return reporting.canonical_json({"subcommand": sub, "config": hashed_view(cfg),
                                     "grids": grid})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rwre", description="RWRE experiment runner")
    p.add_argument("--version", action="version", version=f"rwre {__version__}")
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML or JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a (dotted) config key; value parsed as YAML")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--dry-run", action="store_true")
        if name == "theory":
            sp.add_argument("--gamma-d", type=int)
            sp.add_argument("--gamma", type=float)
            sp.add_argument("--d", type=int)
            sp.add_argument("--beta", type=float)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {"seed": args.seed, "out_dir": args.out_dir, "workers": args.workers}
    if args.subcommand == "theory":
        flags.update({"gamma_d": args.gamma_d, "gamma": args.gamma, "d": args.d,
                      "beta": args.beta})
    handler = logging.NullHandler()
    try:
        cfg = load_config(args.subcommand, args.config, args.set, flags)
        if args.dry_run:
            print(dry_run_summary(args.subcommand, cfg))
            return EXIT_OK
        run = Run(args.subcommand, cfg)
        run.out.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(run.out / "run.log", mode="a", encoding="utf-8")
        log.addHandler(handler)
        log.setLevel(logging.INFO)
        log.info("%s start %s config_hash=%s", datetime.datetime.now().isoformat(),
                 args.subcommand, run.chash)
        reporting.write_json(run.path("config.json"), run.prov, {"config": hashed_view(cfg)})
        summary = COMMANDS[args.subcommand](run)
        log.info("done: %s", summary)
        print(summary)
        return EXIT_OK
    except (SolverError, criteria.EstimationError) as exc:
        log.error("numerical failure: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, GeometryError, LawError, theory.DomainError, ValueError,
            KeyError, TypeError) as exc:
        log.error("validation error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    finally:
        log.removeHandler(handler)
        handler.close()


if __name__ == "__main__":
    sys.exit(main())
