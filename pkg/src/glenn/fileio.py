"""File formats: legacy VTK fields, CSV tables and network checkpoints."""
from __future__ import annotations

import csv
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .fem import fe_data, p2_nodes
from .mesh import Mesh2D
from .network import DTYPE, GlennNet, NetConfig, parameter_names, parameter_shapes

CHECKPOINT_MAGIC = b"GLENNCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


# ------------------------------------------------------------------------ VTK


def write_vtk(path, mesh: Mesh2D, point_data=None, cell_data=None, title="glenn field"):
    """Legacy ASCII unstructured grid with triangle cells (type 5)."""
    path = Path(path)
    nv, nt = mesh.n_vertices, mesh.n_triangles
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in mesh.vertices]
    lines.append(f"CELLS {nt} {4 * nt}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {nt}")
    lines += ["5"] * nt
    for header, n, data in (("POINT_DATA", nv, point_data), ("CELL_DATA", nt, cell_data)):
        if not data:
            continue
        lines.append(f"{header} {n}")
        for name, values in data.items():
            values = np.asarray(values, dtype=float)
            if values.shape != (n,):
                raise ValueError(f"{name}: expected {n} values, got shape {values.shape}")
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [f"{v:.17g}" for v in values]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_vtk_scalars(path):
    """Scalar arrays of a file written by :func:`write_vtk`, keyed by name."""
    tokens = Path(path).read_text().split("\n")
    out, i = {}, 0
    while i < len(tokens):
        line = tokens[i].split()
        if line and line[0] in ("POINT_DATA", "CELL_DATA"):
            count = int(line[1])
        elif line and line[0] == "SCALARS":
            name = line[1]
            out[name] = np.array([float(v) for v in tokens[i + 2 : i + 2 + count]])
            i += 1 + count
        i += 1
    return out


def state_fields(mesh: Mesh2D, u, A):
    """Point data (|u|^2, Re u, Im u at vertices) and cell data (A at centroids, curl A)."""
    fe = fe_data(mesh)
    uv = np.asarray(u)[: mesh.n_vertices]
    centroid = fe._nd_vertex_vectors(A).mean(axis=1)
    points = {"density": np.abs(uv) ** 2, "u_real": uv.real, "u_imag": uv.imag}
    cells = {"A1": centroid[:, 0], "A2": centroid[:, 1], "curl_A": fe.eval_nd_curl(A)}
    return points, cells


def write_state_vtk(path, mesh: Mesh2D, u, A, title="glenn field"):
    points, cells = state_fields(mesh, u, A)
    return write_vtk(path, mesh, points, cells, title)


# ------------------------------------------------------------------------ CSV


def write_density_csv(path, mesh: Mesh2D, u):
    """|u|^2 at every quadratic Lagrange node (vertices first, then edge midpoints)."""
    nodes = p2_nodes(mesh)
    dens = np.abs(np.asarray(u)) ** 2
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "density"])
        for (x, y), d in zip(nodes, dens):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(d))])
    return Path(path)


def read_density_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :2], data[:, 2]


def write_history_csv(path, energies, gammas=(), taus=(), divergence=()):
    """One row per iterate; gamma and tau belong to the step that produced it."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "energy", "gamma", "tau", "div_residual"])
        for k, e in enumerate(energies):
            g = f"{gammas[k - 1]:.10g}" if 0 < k <= len(gammas) else ""
            t = f"{taus[k - 1]:.10g}" if 0 < k <= len(taus) else ""
            d = f"{divergence[k]:.3e}" if k < len(divergence) else ""
            w.writerow([k, f"{e:.14f}", g, t, d])
    return Path(path)


# ----------------------------------------------------------------- checkpoint


def save_checkpoint(path, net: GlennNet):
    """Magic, version, JSON header length, sorted-key JSON header, raw little-endian float64.

    Parameters follow the declared order of :func:`glenn.network.parameter_names`.
    """
    cfg = net.config
    header = {
        "config": {k: getattr(cfg, k) for k in sorted(cfg.__dataclass_fields__)},
        "parameters": [[n, list(parameter_shapes(cfg)[n])] for n in parameter_names(cfg)],
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(
        np.ascontiguousarray(net.params[n].detach().numpy(), dtype="<f8").tobytes() for n in parameter_names(cfg)
    )
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(body)
    return Path(path)


def load_checkpoint(path) -> GlennNet:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a glenn checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(raw[off : off + hlen])
    off += hlen
    cfg = NetConfig(**header["config"])
    expected = [[n, list(s)] for n, s in parameter_shapes(cfg).items()]
    if header["parameters"] != expected:
        raise CheckpointError(f"{path}: parameter layout does not match the declared architecture")
    total = sum(int(np.prod(shape)) for _, shape in header["parameters"])
    if len(raw) - off != 8 * total:
        raise CheckpointError(f"{path}: expected {8 * total} parameter bytes, found {len(raw) - off}")
    params = OrderedDict()
    for name, shape in header["parameters"]:
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
        params[name] = torch.tensor(arr.copy(), dtype=DTYPE)
        off += 8 * n
    return GlennNet(cfg, params)
