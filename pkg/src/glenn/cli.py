"""Command line interface: ``glenn solve|train|hybrid|export|config``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fileio
from .mesh import generate_mesh
from .network import GlennNet, TrainingDiverged, train
from .pipeline import (
    RunConfig,
    config_to_ini,
    export_fields,
    interpolate_nn,
    load_config,
    run_baseline,
    run_hybrid,
)

log = logging.getLogger("glenn")


def _kappa_list(text):
    try:
        return tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glenn", description="Ginzburg-Landau minimizers by Sobolev gradients and deep Ritz networks")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    for name, help_ in (
        ("solve", "baseline runs from the heuristic initial values"),
        ("train", "train a network over the configured kappa range"),
        ("hybrid", "solve from the interpolated network prediction"),
        ("export", "write the interpolated network fields as VTK and CSV"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="INI file (see `glenn config --dump-defaults`)")
        s.add_argument("--kappa", type=_kappa_list, help="comma-separated kappa values")
        s.add_argument("--mesh-n", type=int, help="cells per side of the structured mesh")
        s.add_argument("--out", type=Path, help="output directory")
        s.add_argument("--seed", type=int, help="random seed for training")
        s.add_argument("--model", choices=("full", "reduced"))
        s.add_argument("--checkpoint", type=Path, help="network checkpoint (hybrid/export input)")

    c = sub.add_parser("config", help="configuration utilities")
    c.add_argument("--dump-defaults", action="store_true", help="print the default configuration")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(
        args.config,
        mode=args.command,
        kappas=args.kappa,
        mesh_n=args.mesh_n,
        out_dir=None if args.out is None else str(args.out),
        seed=args.seed,
        model=args.model,
        checkpoint=None if args.checkpoint is None else str(args.checkpoint),
    )
    return cfg


def _status(table) -> int:
    """Failed runs (no energy) make the command fail; unconverged ones only warn."""
    code = 0
    for r in table.rows:
        if not np.isfinite(r.energy):
            print(f"glenn: run {r.label} kappa={r.kappa:g} failed: {r.message}", file=sys.stderr)
            code = 3
        elif not r.converged:
            print(f"glenn: warning: run {r.label} kappa={r.kappa:g} stopped unconverged ({r.message})", file=sys.stderr)
    return code


def _cmd_solve(cfg: RunConfig, out: Path):
    table = run_baseline(cfg, out_dir=out)
    for r in table.rows:
        print(f"{r.label:10s} kappa={r.kappa:g}  E={r.energy:.8f}  iterations={r.iterations}  converged={r.converged}")
    return _status(table)


def _cmd_train(cfg: RunConfig, out: Path):
    tcfg = replace(cfg.train, seed=cfg.seed)
    net_cfg = replace(cfg.network, model=cfg.model, kappa_min=tcfg.kappa_min, kappa_max=tcfg.kappa_max)
    net = GlennNet(net_cfg, seed=cfg.seed)
    res = train(net, tcfg, cfg.problem)
    path = fileio.save_checkpoint(out / "checkpoint.glenn", res.net)
    with open(out / "train_history.csv", "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i},{v:.12g}\n" for i, v in enumerate(res.losses))
    print(f"trained {net.n_parameters()} parameters for {len(res.losses)} steps; final loss {res.losses[-1]:.6f}")
    print(f"checkpoint written to {path}")
    return 0


def _cmd_hybrid(cfg: RunConfig, out: Path):
    table = run_hybrid(cfg, out_dir=out)
    for r in table.rows:
        print(f"{r.label:10s} kappa={r.kappa:g}  E0={r.initial_energy:.8f}  E={r.energy:.8f}  iterations={r.iterations}")
    return _status(table)


def _cmd_export(cfg: RunConfig, out: Path):
    net = fileio.load_checkpoint(cfg.checkpoint)
    mesh = generate_mesh(cfg.domain, cfg.mesh_n)
    for kappa in cfg.kappas:
        state = interpolate_nn(net, kappa, mesh, cfg.problem)
        for f in export_fields(mesh, state, out / f"field_nn_{kappa:g}"):
            print(f)
    return 0


COMMANDS = {"solve": _cmd_solve, "train": _cmd_train, "hybrid": _cmd_hybrid, "export": _cmd_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "config":
            if not args.dump_defaults:
                print("nothing to do; try --dump-defaults", file=sys.stderr)
                return 2
            sys.stdout.write(config_to_ini(RunConfig()))
            return 0
        cfg = _config(args)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except TrainingDiverged as exc:
        print(f"glenn: training aborted: {exc}", file=sys.stderr)
        return 4
    except (OSError, ValueError, KeyError) as exc:
        print(f"glenn: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
