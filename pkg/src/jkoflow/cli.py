"""Command-line entry point: ``jkoflow train|rollout|eval|oracle``.

Exit codes: 0 success, 2 configuration error, 3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .checkpoint import (Checkpoint, CheckpointError, load_module, load_optimizer,
                         module_tensors, optimizer_tensors)
from .energy import Interaction, KL, ParameterError, energy_from_dict, evaluate_energy
from .geometry import NumericError, ParticleEnsemble, StructuralError, chamfer_distance, recenter
from .operator import NeuralJKO
from .oracles import (BarenblattSpec, EquilibriumNotFound, ErrorReport, barenblatt_sample,
                      gaussian_kl, integrate_particle_ode, relative_errors, ring_points, ring_radius)
from .runlog import EventWriter, LedgerWriter
from .training import (ConfigError, Trainer, TrainingDiverged, generate_batch, rng_for,
                       sample_initials, train_baseline)

log = logging.getLogger("jkoflow")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
THREADS_ENV = "JKOFLOW_THREADS"

CONFIG_NAME = "config.toml"
LEDGER_NAME = "ledger.csv"
EVENTS_NAME = "events.log"
CHECKPOINT_NAME = "checkpoint.bin"
MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    """Bad command-line input; maps to the configuration exit code."""


def _resolve(args, path):
    p = Path(path)
    return p if p.is_absolute() else Path(args.workdir) / p


# ------------------------------------------------------------------- train

def _save_checkpoint(path, trainer, config_text):
    tensors = module_tensors(trainer.op)
    tensors.update(optimizer_tensors(trainer.opt))
    ctl = {"outer": trainer.state.outer, "S": trainer.state.S,
           "fingerprint": cfgmod.content_hash(config_text)}
    Checkpoint(config_text, ctl, tensors).save(path)


def load_operator(path, with_optimizer=False):
    """Rebuild (config, operator[, optimizer], checkpoint) from a checkpoint file."""
    ckpt = Checkpoint.load(path)
    config = cfgmod.build_config(cfgmod.tomli.loads(ckpt.config_text), str(path))
    op = NeuralJKO(config.operator, seed=config.seed)
    load_module(op, ckpt.tensors)
    if with_optimizer:
        from .training import make_optimizer
        opt = make_optimizer(op, config)
        load_optimizer(opt, ckpt.tensors)
        return config, op, opt, ckpt
    return config, op, ckpt


def _baseline_dataset(config, path):
    if path:
        files = sorted(Path(path).glob("*.txt"))
        if not files:
            raise ConfigError(f"baseline dataset {path} holds no ensemble files")
        rng = rng_for(config.seed, 0, 0, "baseline")
        out = []
        for f in files:
            spec, cond = config.energy.draw(rng)
            out.append((ParticleEnsemble.load(f), cond, spec))
        return out
    return sample_initials(config.family, config.B, rng_for(config.seed, 0, 0, "initials"),
                           config.energy, n=config.particles, seed=config.seed)


def cmd_train(args):
    config, _ = cfgmod.load_config(_resolve(args, args.config), args.set)
    text = cfgmod.dump_config(config)
    if args.dry_run:
        sys.stdout.write(text)
        return EXIT_OK
    digest = cfgmod.content_hash(text)
    run_dir = _resolve(args, args.run_dir or f"runs/{digest[:12]}-seed{config.seed}")
    if run_dir.exists() and any(run_dir.iterdir()):
        raise UsageError(f"run directory {run_dir} already holds a finished run; choose a new one")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CONFIG_NAME).write_text(text)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    events = EventWriter(run_dir / EVENTS_NAME)
    ledger = LedgerWriter(run_dir / LEDGER_NAME)
    ckpt_path = run_dir / CHECKPOINT_NAME
    hooks = dict(on_event=events, on_ledger=ledger,
                 on_checkpoint=lambda tr: _save_checkpoint(ckpt_path, tr, text))
    status = EXIT_OK
    try:
        if config.mode == "baseline":
            train_baseline(config, _baseline_dataset(config, config.baseline_data), **hooks)
        else:
            Trainer(config, **hooks).run()
    except TrainingDiverged as exc:
        log.error("training aborted: %s; last good checkpoint kept at %s", exc, ckpt_path)
        status = EXIT_RUNTIME
        if not ckpt_path.exists():
            trainer = Trainer(config)
            trainer.op.load_state_dict(exc.last_good)
            _save_checkpoint(ckpt_path, trainer, text)
    finally:
        events.close()
        ledger.close()
    manifest = {"config": CONFIG_NAME, "config_hash": digest, "seed": config.seed,
                "started": started, "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                "checkpoints": [CHECKPOINT_NAME], "artifacts": [LEDGER_NAME, EVENTS_NAME],
                "status": "ok" if status == EXIT_OK else "aborted"}
    (run_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    print(run_dir)
    return status


# ----------------------------------------------------------------- rollout

def _oracle_columns(config, initial, cond, spec):
    """Per-state metric function for the summary CSV, when an oracle applies."""
    fam = config.family
    if fam.kind == "barenblatt" and "C" in initial.meta:
        bspec = BarenblattSpec(float(fam.params.get("m", 2.0)), initial.dim, initial.meta["C"],
                               float(fam.params.get("t0", 1e-3)))

        def barenblatt(step, ens):
            l1, linf = relative_errors(ens, bspec, step * config.dt)
            return {"L1": l1, "Linf": linf}

        return barenblatt
    if isinstance(spec, Interaction) and initial.dim == 2:
        try:
            r0 = ring_radius(spec.p, spec.q)
        except EquilibriumNotFound:
            return None

        def ring(step, ens):
            ref = ring_points(r0, 1024, center=ens.points.mean(0))
            return {"chamfer": chamfer_distance(ens, ref)}

        return ring
    return None


def write_trajectory(out_dir, states, rows):
    out_dir.mkdir(parents=True, exist_ok=True)
    for st in states:
        st.save(out_dir / f"state_{st.step:04d}.txt")
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = list(rows[0])
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys])


def read_trajectory(path):
    files = sorted(Path(path).glob("state_*.txt"))
    if not files:
        raise StructuralError(f"no state_*.txt files in {path}")
    return [ParticleEnsemble.load(f) for f in files]


def cmd_rollout(args):
    config, op, ckpt = load_operator(_resolve(args, args.checkpoint))
    if args.config:
        other, _ = cfgmod.load_config(_resolve(args, args.config), ())
        mine, theirs = cfgmod.fingerprint(config), cfgmod.fingerprint(other)
        if mine != theirs:
            raise UsageError(f"config fingerprint {theirs} does not match checkpoint fingerprint {mine}")
    if args.set:
        raw = cfgmod.apply_overrides(cfgmod.tomli.loads(ckpt.config_text), args.set)
        config = cfgmod.build_config(raw, "rollout overrides")
    if args.steps < 1:
        raise UsageError("--steps must be at least 1")
    n = args.samples or config.particles
    rng = rng_for(args.seed, 0, 0, "rollout")
    (initial, cond, spec), = sample_initials(config.family, 1, rng, config.energy, n=n, seed=config.seed)
    if args.initial:
        initial = ParticleEnsemble.load(_resolve(args, args.initial))
    if args.recenter:
        initial = recenter(initial)
    traj = generate_batch(op, [initial], [cond], args.steps, [spec])[0]
    if traj.error:
        raise NumericError(traj.error)
    metric = _oracle_columns(config, initial, cond, spec)
    rows = []
    for st in traj.states:
        row = {"step": st.step, "t": st.step * config.dt, "energy": evaluate_energy(spec, st)}
        if metric:
            row.update(metric(st.step, st))
        rows.append(row)
    out = _resolve(args, args.out)
    write_trajectory(out, traj.states, rows)
    print(out)
    return EXIT_OK


# -------------------------------------------------------------------- eval

def cmd_eval(args):
    states = read_trajectory(_resolve(args, args.trajectory))
    out = _resolve(args, args.out)
    if args.oracle == "barenblatt":
        spec = BarenblattSpec(args.m, args.d, args.C, args.t0)
        if states[0].dim != spec.dim:
            raise StructuralError(f"trajectory has dimension {states[0].dim}, oracle expects {spec.dim}")
        rep = ErrorReport()
        for st in states:
            t = st.step * args.dt
            rep.add(t, *relative_errors(st, spec, t))
        rep.write_csv(out)
        print(json.dumps(rep.summary()))
        return EXIT_OK
    rows = []
    if args.oracle == "ring":
        if states[0].dim != 2:
            raise StructuralError(f"ring oracle needs dimension 2, trajectory has {states[0].dim}")
        r0 = ring_radius(args.p, args.q)
        for st in states:
            ref = ring_points(r0, args.ring_points, center=st.points.mean(0))
            rows.append({"step": st.step, "chamfer": chamfer_distance(st, ref)})
    else:
        spec = energy_from_dict(cfgmod.parse_value(args.energy), rng_for(args.seed, 0, 0, "target"))
        for st in states:
            rows.append({"step": st.step, "energy": evaluate_energy(spec, st)})
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = list(rows[0])
        w.writerow(keys)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in keys[1:]])
        w.writerow(["mean_" + k for k in keys[1:]])
        w.writerow([repr(float(np.mean([r[k] for r in rows]))) for k in keys[1:]])
    print(out)
    return EXIT_OK


# ------------------------------------------------------------------ oracle

def cmd_oracle(args):
    rng = np.random.default_rng(args.seed)
    if args.kind == "ring":
        r = ring_radius(args.p, args.q, nodes=args.nodes)
        print(repr(r))
        if args.out:
            pts = ring_points(r, args.n)
            ParticleEnsemble(pts, np.ones(args.n)).save(_resolve(args, args.out))
        return EXIT_OK
    if args.kind == "barenblatt":
        spec = BarenblattSpec(args.m, args.d, args.C, args.t0)
        ens = barenblatt_sample(spec, args.t, args.n, rng)
        out = _resolve(args, args.out or "barenblatt.txt")
        ens.save(out)
        print(out)
        return EXIT_OK
    if args.kind == "ode":
        x0 = rng.uniform(-1.0, 1.0, (args.n, 2))
        steps = int(round(args.t / args.dt_ode))
        x = integrate_particle_ode(x0, args.p, args.q, args.dt_ode, steps)
        out = _resolve(args, args.out or "ode.txt")
        ParticleEnsemble(x, np.ones(args.n)).save(out)
        r = np.linalg.norm(x - x.mean(0), axis=1)
        print(json.dumps({"path": str(out), "mean_radius": float(r.mean())}))
        return EXIT_OK
    kl = gaussian_kl(cfgmod.parse_value(args.mean0), cfgmod.parse_value(args.cov0),
                     cfgmod.parse_value(args.mean1), cfgmod.parse_value(args.cov1))
    print(repr(kl))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="base directory for relative paths")
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (dotted keys for tables)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="jkoflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", parents=[common], help="run Learn-to-Evolve or the baseline")
    tr.add_argument("--run-dir", help="output directory (default runs/<hash>-seed<seed>)")
    tr.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
    tr.set_defaults(func=cmd_train)

    ro = sub.add_parser("rollout", parents=[common], help="apply a trained operator repeatedly")
    ro.add_argument("--checkpoint", required=True)
    ro.add_argument("--steps", type=int, required=True)
    ro.add_argument("--initial", help="ensemble file; default draws from the training family")
    ro.add_argument("--samples", type=int, help="number of particles to draw")
    ro.add_argument("--seed", type=int, default=0)
    ro.add_argument("--recenter", action=argparse.BooleanOptionalAction, default=True)
    ro.add_argument("--out", default="rollout")
    ro.set_defaults(func=cmd_rollout)

    ev = sub.add_parser("eval", parents=[common], help="score a trajectory against an oracle")
    ev.add_argument("--trajectory", required=True)
    ev.add_argument("--oracle", choices=("barenblatt", "ring", "energy"), required=True)
    ev.add_argument("--out", default="eval.csv")
    ev.add_argument("--d", type=int, default=1)
    ev.add_argument("--m", type=float, default=2.0)
    ev.add_argument("--C", type=float, default=0.5)
    ev.add_argument("--t0", type=float, default=1e-3)
    ev.add_argument("--dt", type=float, default=0.0, help="time per trajectory step")
    ev.add_argument("--p", type=float, default=0.5)
    ev.add_argument("--q", type=float, default=3.0)
    ev.add_argument("--ring-points", type=int, default=1024)
    ev.add_argument("--energy", default='{kind = "external", potential = "quadratic"}',
                    help="energy as a TOML inline table")
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=cmd_eval)

    orc = sub.add_parser("oracle", parents=[common], help="reference solutions")
    orc.add_argument("kind", choices=("barenblatt", "ring", "ode", "kl"))
    orc.add_argument("--p", type=float, default=0.5)
    orc.add_argument("--q", type=float, default=3.0)
    orc.add_argument("--nodes", type=int, default=64)
    orc.add_argument("--d", type=int, default=1)
    orc.add_argument("--m", type=float, default=2.0)
    orc.add_argument("--C", type=float, default=0.5)
    orc.add_argument("--t0", type=float, default=1e-3)
    orc.add_argument("--t", type=float, default=0.0)
    orc.add_argument("--n", type=int, default=1024)
    orc.add_argument("--dt-ode", type=float, default=1e-3)
    orc.add_argument("--seed", type=int, default=0)
    orc.add_argument("--mean0", default="[0.0, 0.0]")
    orc.add_argument("--cov0", default="[[1.0, 0.0], [0.0, 1.0]]")
    orc.add_argument("--mean1", default="[0.0, 0.0]")
    orc.add_argument("--cov1", default="[[1.0, 0.0], [0.0, 1.0]]")
    orc.add_argument("--out")
    orc.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        torch.set_num_threads(int(threads))
    try:
        return args.func(args)
    except (ConfigError, ParameterError, UsageError, EquilibriumNotFound) as exc:
        print(f"jkoflow: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, StructuralError, CheckpointError, TrainingDiverged, ArithmeticError,
            OSError) as exc:
        print(f"jkoflow: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
