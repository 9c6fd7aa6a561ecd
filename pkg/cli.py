# cli.py
"""openfock command line.

    openfock solve    --config exp.toml --out runs/a
    openfock sample   --config exp.toml --seed 7 --trajectories 10000
    openfock reduce   --config runs/a/manifest.json
    openfock validate --config configs/dimerization.toml
    openfock init-db

A `.json` config is read as a run manifest and reproduces that run.
"""

import argparse
import csv
import json
import logging
import os
from pathlib import Path
import sys

from dotenv import load_dotenv
load_dotenv()

import numpy as np
from sqlalchemy.exc import SQLAlchemyError

import db
from config import load_config, load_manifest
from errors import ConfigError, OpenFockError
from fockspace import marginal_copy_number
from init_db import init_db
from models import ExperimentRun, RunCheck
from reduction import cme_generator, cme_solve, mean_field_ode, ssa_run
from sampler import SamplerRun, ensemble_run
from solver import integrate, stationary
from suites import Registry
from suites import invariants

VERSION = "0.1.0"
LOG_FORMAT = "%(asctime)s [%(filename)s:%(lineno)s] %(message)s"

logger = logging.getLogger("openfock")

# ---------------- Suites ----------------
registry = Registry()
registry.register_suite(invariants.suite)


# ---------------- Output helpers ----------------

def _key_name(key):
    return str(key[0]) if len(key) == 1 else "_".join(str(c) for c in key)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_manifest(out, cfg, subcommand, artifacts):
    manifest = {
        "name": cfg.name,
        "subcommand": subcommand,
        "seed": cfg.seed,
        "version": VERSION,
        "config": cfg.resolved,
        "artifacts": sorted(artifacts),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------- Subcommands ----------------

def run_solve(cfg, out, threads):
    prob = cfg.problem(threads)
    _, report = integrate(prob)
    write_csv(out / "solve.csv", report.header(), report.rows())
    artifacts = ["solve.csv"]
    if cfg.solver["stationary"]:
        f = stationary(prob)
        p = marginal_copy_number(f, cfg.grid)
        write_csv(out / "stationary.csv", ["key", "p"], [[_key_name(k), v] for k, v in zip(f.keys, p)])
        artifacts.append("stationary.csv")
    logger.info("solve: %d checkpoints, max mass residual %.3e, leakage %.3e",
                len(report.times), max(report.mass_residual), report.leakage[-1])
    return 0, artifacts, []


def sampler_run(cfg, threads):
    s = cfg.sampler
    return SamplerRun(cfg.grid, cfg.transport, s["dynamics"], float(s["dt"]), float(s["t_final"]), cfg.initial,
                      cfg.couplings, cfg.seed, s["trajectories"], cfg.species, cfg.nmax, s["record_every"],
                      threads)


def run_sample(cfg, out, threads):
    report = ensemble_run(sampler_run(cfg, threads))
    write_csv(out / "sample.csv", report.header(), report.rows())
    events = []
    for traj, log in enumerate(report.logs):
        for ev in log:
            events.append([traj, ev.time, ev.kind, " ".join(map(str, ev.reactants)),
                           " ".join(map(str, ev.products))])
    write_csv(out / "events.csv", ["trajectory", "time", "kind", "reactants", "products"], events)
    species = list(report.density)
    cells = np.array([report.density[s].ravel() for s in species]) if species else np.zeros((0, 0))
    write_csv(out / "density.csv", ["cell", *species], [[i, *cells[:, i]] for i in range(cells.shape[1])])
    overflow = float(report.overflow.max()) if len(report.overflow) else 0.0
    if overflow:
        logger.warning("sample: %.3g of trajectories above the level cap", overflow)
    logger.info("sample: %d trajectories, %d events", report.n_trajectories, len(events))
    return 0, ["sample.csv", "events.csv", "density.csv"], []


def run_reduce(cfg, out, threads):
    grid = cfg.grid
    t_final = float(cfg.solver["t_final"])
    times = np.linspace(0.0, t_final, max(2, cfg.output["checkpoints"]))
    model = cme_generator(cfg.couplings, grid.domain_volume, cfg.nmax, cfg.species)
    p0 = marginal_copy_number(cfg.initial, grid)
    cme = cme_solve(model, p0, times)
    _, ssa = ssa_run(model, p0, t_final, cfg.seed, cfg.sampler["trajectories"], times, threads)
    n0 = np.array(model.keys, dtype=float).T @ p0
    mf = mean_field_ode(cfg.couplings, grid.domain_volume, n0, times, cfg.species)
    names = [_key_name(k) for k in model.keys]
    header = ["time", *[f"cme_p_{n}" for n in names], *[f"ssa_p_{n}" for n in names],
              *[f"mf_{s}" for s in cfg.species]]
    rows = [[t, *cme[i], *ssa[i], *mf[:, i]] for i, t in enumerate(times)]
    write_csv(out / "reduce.csv", header, rows)
    logger.info("reduce: %d states, %d SSA paths", len(model.keys), cfg.sampler["trajectories"])
    return 0, ["reduce.csv"], []


def run_validate(cfg, out, threads):
    results = registry.run(invariants.ValidationContext(cfg, threads))
    passed = all(r.passed for r in results)
    with open(out / "validate.json", "w", encoding="utf-8") as fh:
        json.dump({"passed": passed, "checks": [r.as_dict() for r in results]}, fh, indent=2)
        fh.write("\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error("validate: failed %s", ", ".join(failed))
    else:
        logger.info("validate: %d checks passed", len(results))
    return (0 if passed else 1), ["validate.json"], results


COMMANDS = {
    "solve": run_solve,
    "sample": run_sample,
    "reduce": run_reduce,
    "validate": run_validate,
}


# ---------------- Run registry ----------------

def record_run(subcommand, cfg, out, status, checks):
    session = db.SessionLocal()
    try:
        run = ExperimentRun(subcommand=subcommand, seed=str(cfg.seed), version=VERSION,
                            config=cfg.resolved, out_dir=str(out), status=status)
        for r in checks:
            run.checks.append(RunCheck(name=r.name, value=r.value, threshold=r.threshold, passed=r.passed))
        session.add(run)
        session.commit()
        logger.debug("recorded run %s", run.id)
    except SQLAlchemyError as exc:
        session.rollback()
        logger.warning("could not record run: %s", exc)
    finally:
        session.close()


# ---------------- Entry point ----------------

def _threads():
    raw = os.getenv("OPENFOCK_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError("environment", "OPENFOCK_THREADS", f"expected an integer, got {raw!r}") from None


def _overrides(args):
    section = "sampler" if args.command == "sample" else "solver"
    return {
        ("", "seed"): args.seed,
        ("state", "nmax"): args.nmax,
        (section, "dt"): args.dt,
        (section, "t_final"): args.t_final,
        ("sampler", "trajectories"): args.trajectories,
    }


def build_parser():
    parser = argparse.ArgumentParser(prog="openfock", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment TOML or a run manifest (.json)")
    common.add_argument("--out", help="output directory (default: [output] dir)")
    common.add_argument("--seed", type=int)
    common.add_argument("--nmax", type=int)
    common.add_argument("--dt", type=float)
    common.add_argument("--t-final", type=float, dest="t_final")
    common.add_argument("--trajectories", type=int)
    common.add_argument("--no-record", action="store_true", help="skip the run registry")

    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    sub.add_parser("init-db", help="create the run registry tables")
    return parser


def main(argv=None):
    logging.basicConfig(level=os.getenv("OPENFOCK_LOG_LEVEL", "INFO").upper(), format=LOG_FORMAT)
    args = build_parser().parse_args(argv)

    if args.command == "init-db":
        try:
            init_db()
        except SQLAlchemyError as exc:
            logger.error("init-db failed: %s", exc)
            return 2
        logger.info("registry tables created")
        return 0

    try:
        threads = _threads()
        overrides = _overrides(args)
        if args.config.endswith(".json"):
            cfg = load_manifest(args.config, overrides, threads)
        else:
            cfg = load_config(args.config, overrides, threads)
        out = Path(args.out or cfg.output["dir"])
        out.mkdir(parents=True, exist_ok=True)
        status, artifacts, checks = COMMANDS[args.command](cfg, out, threads)
        write_manifest(out, cfg, args.command, artifacts)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return 2
    except OpenFockError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 2
    except OSError as exc:
        logger.error("filesystem error: %s", exc)
        return 2

    if not args.no_record and cfg.output["record"]:
        record_run(args.command, cfg, out, status, checks)
    return status


if __name__ == "__main__":
    sys.exit(main())
