"""Baseline and hybrid runs, run configuration and result tables.

A baseline run starts the conjugate Sobolev gradient solver from each of the
heuristic initial values; a hybrid run starts it from a trained network
interpolated into the finite element spaces.
"""
from __future__ import annotations

import configparser
import csv
import logging
import math
import warnings
from io import StringIO
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch

from . import fem, fileio
from .gl import GLState, ProblemSpec, compute_energy, initial_value, make_state, standard_problem
from .mesh import Mesh2D, generate_mesh
from .minimizer import SolveReport, SolverConfig, solve
from .network import GlennNet, NetConfig, TrainConfig

log = logging.getLogger(__name__)

MODES = ("solve", "train", "hybrid", "export")
PHI_LABELS = tuple(f"phi_{j}" for j in range(1, 6))
MIN_INITIAL_NORM = 1e-10


# ------------------------------------------------------------------- config


@dataclass
class RunConfig:
    mode: str = "solve"
    model: str = "reduced"
    domain: str = "unit_square"
    mesh_n: int = 64
    kappas: Tuple[float, ...] = (10.0,)
    initializers: Tuple[str, ...] = PHI_LABELS
    checkpoint: str = "checkpoint.glenn"
    out_dir: str = "out"
    seed: int = 0
    write_fields: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)
    hybrid_tol: float = 1e-12
    network: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        for lab in self.initializers:
            if lab not in PHI_LABELS and lab != "constant":
                raise ValueError(f"unknown initializer {lab!r}")
        if any(not k > 0 for k in self.kappas):
            raise ValueError("kappa values must be positive")
        self.kappas = tuple(float(k) for k in self.kappas)
        self.initializers = tuple(self.initializers)

    @property
    def problem(self) -> ProblemSpec:
        return standard_problem(self.model, self.domain)


_SECTIONS = {"run": None, "solver": SolverConfig, "network": NetConfig, "train": TrainConfig}
_RUN_KEYS = ("mode", "model", "domain", "mesh_n", "kappas", "initializers", "checkpoint",
             "out_dir", "seed", "write_fields", "hybrid_tol")


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _parse(text, like):
    if isinstance(like, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        return tuple(float(s) for s in items) if like and isinstance(like[0], float) else tuple(items)
    return text.strip()


def config_to_ini(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser()
    cp["run"] = {k: _fmt(getattr(cfg, k)) for k in _RUN_KEYS}
    for sec in ("solver", "network", "train"):
        obj = getattr(cfg, sec)
        cp[sec] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}
    buf = StringIO()
    cp.write(buf)
    return "# glenn run configuration; every key shown with its default\n" + buf.getvalue()


def load_config(path=None, **overrides) -> RunConfig:
    """Read an INI file (sections run/solver/network/train); unknown keys are errors."""
    base = RunConfig()
    run_kw = {}
    sub_kw = {"solver": {}, "network": {}, "train": {}}
    if path is not None:
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(f"cannot read config file {path}")
        for sec in cp.sections():
            if sec not in _SECTIONS:
                raise ValueError(f"unknown config section [{sec}]")
            target = base if sec == "run" else getattr(base, sec)
            for key, text in cp[sec].items():
                if not hasattr(target, key) or (sec == "run" and key not in _RUN_KEYS):
                    raise ValueError(f"unknown key {key!r} in [{sec}]")
                value = _parse(text, getattr(target, key))
                (run_kw if sec == "run" else sub_kw[sec])[key] = value
    run_kw.update({k: v for k, v in overrides.items() if v is not None})
    defaults = {"solver": base.solver, "network": base.network, "train": base.train}
    subs = {}
    for sec, kw in sub_kw.items():
        d = {f.name: getattr(defaults[sec], f.name) for f in fields(defaults[sec])}
        d.update(kw)
        subs[sec] = type(defaults[sec])(**d)
    if "model" in run_kw and "model" not in sub_kw["network"]:
        subs["network"] = NetConfig(**{**{f.name: getattr(subs["network"], f.name) for f in fields(NetConfig)},
                                       "model": run_kw["model"]})
    return RunConfig(**run_kw, **subs)


# -------------------------------------------------------------------- tables


@dataclass
class EnergyRow:
    label: str
    kappa: float
    energy: float
    iterations: int
    converged: bool
    initial_energy: float = math.nan
    message: str = ""


@dataclass
class EnergyTable:
    rows: List[EnergyRow] = field(default_factory=list)

    def add(self, row: EnergyRow):
        if any(r.label == row.label and r.kappa == row.kappa for r in self.rows):
            raise ValueError(f"duplicate row ({row.label}, {row.kappa})")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def get(self, label, kappa) -> EnergyRow:
        for r in self.rows:
            if r.label == label and r.kappa == kappa:
                return r
        raise KeyError((label, kappa))

    def best(self, kappa) -> Optional[EnergyRow]:
        cands = [r for r in self.rows if r.kappa == kappa and np.isfinite(r.energy)]
        return min(cands, key=lambda r: r.energy) if cands else None

    def write_csv(self, path):
        """Energies with 8 decimals; ``is_min`` marks the lowest level per kappa."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["initializer", "kappa", "energy", "iterations", "converged", "initial_energy", "is_min"])
            for r in self.rows:
                best = self.best(r.kappa)
                w.writerow([
                    r.label, f"{r.kappa:g}", f"{r.energy:.8f}", r.iterations, int(r.converged),
                    f"{r.initial_energy:.8f}", int(best is r),
                ])
        return Path(path)

    @classmethod
    def read_csv(cls, path) -> "EnergyTable":
        t = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                t.add(EnergyRow(rec["initializer"], float(rec["kappa"]), float(rec["energy"]),
                                int(rec["iterations"]), rec["converged"] == "1", float(rec["initial_energy"])))
        return t


# ---------------------------------------------------------------------- runs


def heuristic_state(mesh, label, spec: ProblemSpec, kappa) -> GLState:
    """phi_j (or the constant alpha for ``constant``) for u, zero or the fixed A for A."""
    j = 5 if label == "constant" else int(label.split("_")[1])
    u0 = fem.interpolate_order(mesh, initial_value(j, spec.domain))
    return make_state(mesh, u0, spec, kappa)


def _write_outputs(out_dir, label, kappa, mesh, report: SolveReport):
    if out_dir is None:
        return
    out = Path(out_dir)
    fileio.write_history_csv(out / f"history_{label}_{kappa:g}.csv", report.energies, report.gamma_history,
                         report.tau_history, report.divergence_history)


def _run_one(table, mesh, spec, label, kappa, state, solver_cfg, out_dir, write_fields):
    try:
        e0 = compute_energy(mesh, state, spec)
        rep = solve(mesh, state, spec, solver_cfg)
    except Exception as exc:  # recorded, the sweep goes on
        log.error("run %s kappa=%g failed: %s", label, kappa, exc)
        table.add(EnergyRow(label, kappa, math.nan, 0, False, message=str(exc)))
        return None
    table.add(EnergyRow(label, kappa, rep.energy, rep.iterations, rep.converged, e0, rep.message))
    _write_outputs(out_dir, label, kappa, mesh, rep)
    if out_dir is not None and write_fields:
        export_fields(mesh, rep.final_state, Path(out_dir) / f"field_{label}_{kappa:g}", csv_density=False)
    log.info("%s kappa=%g: E=%.8f after %d iterations", label, kappa, rep.energy, rep.iterations)
    return rep


def run_baseline(config: RunConfig, out_dir=None, mesh: Optional[Mesh2D] = None) -> EnergyTable:
    """Solve from every heuristic initializer at every kappa."""
    spec = config.problem
    mesh = mesh or generate_mesh(config.domain, config.mesh_n)
    table = EnergyTable()
    for kappa in config.kappas:
        for label in config.initializers:
            state = heuristic_state(mesh, label, spec, kappa)
            _run_one(table, mesh, spec, label, kappa, state, config.solver, out_dir, config.write_fields)
    if out_dir is not None:
        table.write_csv(Path(out_dir) / "energies.csv")
    return table


def interpolate_nn(net: GlennNet, kappa, mesh: Mesh2D, spec: ProblemSpec) -> GLState:
    """Network values at the P2 nodes for u; edge moments of the network A, projected."""
    if net.config.model != spec.model:
        raise ValueError(f"network predicts the {net.config.model} model, problem is {spec.model}")
    nodes = fem.p2_nodes(mesh)
    with torch.no_grad():
        y = net.values(nodes, float(kappa)).numpy()
    u0 = y[:, 0] + 1j * y[:, 1]
    if fem.l2_norm_order(mesh, u0) < MIN_INITIAL_NORM:
        raise ValueError("interpolated order parameter vanishes; the solver needs u0 != 0")
    if spec.reduced:
        return make_state(mesh, u0, spec, kappa)
    pts, tang = fem.edge_gauss_points(mesh)
    with torch.no_grad():
        yA = net.values(pts.reshape(-1, 2), float(kappa)).numpy()[:, 2:4]
    A = fem.moments_from_values(yA.reshape(-1, 2, 2), tang)
    return make_state(mesh, u0, spec, kappa, A=fem.project_div_free(mesh, A))


def run_hybrid(config: RunConfig, net: Optional[GlennNet] = None, out_dir=None,
               mesh: Optional[Mesh2D] = None, label="nn") -> EnergyTable:
    """Interpolate the network at every kappa and solve from there."""
    spec = config.problem
    if net is None:
        net = fileio.load_checkpoint(config.checkpoint)
    if net.config.model != spec.model:
        raise ValueError(
            f"checkpoint {config.checkpoint} holds a {net.config.model}-model network, config asks for {spec.model}"
        )
    mesh = mesh or generate_mesh(config.domain, config.mesh_n)
    solver_cfg = SolverConfig(**{**{f.name: getattr(config.solver, f.name) for f in fields(SolverConfig)},
                                 "tol": config.hybrid_tol})
    table = EnergyTable()
    for kappa in config.kappas:
        if not net.config.kappa_min <= kappa <= net.config.kappa_max:
            warnings.warn(f"kappa={kappa:g} lies outside the trained range "
                          f"[{net.config.kappa_min:g}, {net.config.kappa_max:g}]")
        try:
            state = interpolate_nn(net, kappa, mesh, spec)
        except ValueError as exc:
            table.add(EnergyRow(label, kappa, math.nan, 0, False, message=str(exc)))
            continue
        _run_one(table, mesh, spec, label, kappa, state, solver_cfg, out_dir, config.write_fields)
    if out_dir is not None:
        table.write_csv(Path(out_dir) / "energies.csv")
    return table


def export_fields(mesh: Mesh2D, state: GLState, path, csv_density=True):
    """Write ``<path>.vtk`` and, optionally, ``<path>.csv`` with nodal |u|^2."""
    path = str(path)
    written = [fileio.write_state_vtk(path + ".vtk", mesh, state.u, state.A,
                                  title=f"GL state kappa={state.kappa:g}")]
    if csv_density:
        written.append(fileio.write_density_csv(path + ".csv", mesh, state.u))
    return written
