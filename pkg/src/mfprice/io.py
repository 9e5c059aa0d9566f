"""CSV/JSON emission and the run manifest.

Floats are written with 17 significant digits so a CSV round-trips to the
same doubles; nothing time- or host-dependent goes into the CSVs.
"""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return "" if x is None else "nan"
    return format(float(x), ".17g")


def write_csv(path, header: list, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


def write_json(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# module exports


def solution_rows(solution, strategy=None, atom=None):
    """Rows ``(k, common_idx, idio_idx, Y, Z0..., Z1..., p_star...)``; terminal rows leave Z and p empty."""
    lat = solution.lattice
    K = lat.steps
    pick = (lambda x: x) if atom is None else (lambda x: x[atom])
    for k in range(K + 1):
        Y = pick(solution.Y[k])
        nc, ni = Y.shape
        if k < K:
            z0, z1 = pick(solution.Z0[k]), pick(solution.Z1[k])
            p = pick(strategy.p[k]) if strategy is not None else None
        for c in range(nc):
            for i in range(ni):
                lead = [] if atom is None else [atom]
                row = lead + [k, c, i, Y[c, i]]
                if k < K:
                    row += list(z0[c, i]) + list(z1[c, i])
                    row += list(p[c, i]) if p is not None else []
                else:
                    row += [""] * (lat.d0 + lat.d + (lat.d0 if strategy is not None else 0))
                yield row


def solution_header(lattice, strategy=True, atoms=False) -> list:
    h = (["atom"] if atoms else []) + ["k", "common_idx", "idio_idx", "Y"]
    h += [f"Z0_{j}" for j in range(lattice.d0)] + [f"Z1_{j}" for j in range(lattice.d)]
    return h + ([f"p_star_{j}" for j in range(lattice.d0)] if strategy else [])


def write_solution(path, solution, strategy=None, n_atoms=None) -> Path:
    """Single solution, or a batched one with ``n_atoms`` leading entries."""
    header = solution_header(solution.lattice, strategy is not None, n_atoms is not None)
    if n_atoms is None:
        rows = solution_rows(solution, strategy)
    else:
        rows = (r for a in range(n_atoms) for r in solution_rows(solution, strategy, a))
    return write_csv(path, header, rows)


def write_theta(path, theta: list) -> Path:
    d0 = theta[0].shape[-1]
    rows = ([k, c] + list(t[c]) for k, t in enumerate(theta) for c in range(t.shape[0]))
    return write_csv(path, ["k", "common_idx"] + [f"theta_{j}" for j in range(d0)], rows)


def write_diagnostics(path, diags: list) -> Path:
    return write_csv(path, ["iter", "delta", "ratio", "in_ball"],
                     ([d.iteration, d.delta, d.ratio, bool(d.in_ball)] for d in diags))


def write_clearing(path, report) -> Path:
    return write_csv(path, ["N", "estimate", "stderr", "n_outer"],
                     ([r.N, r.estimate, r.stderr, r.n_outer] for r in report.rows))


# --------------------------------------------------------------------------
# manifest


def blob_hash(data: bytes) -> str:
    """Git-style object hash (sha256 over ``blob <size>\\0<data>``)."""
    return hashlib.sha256(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(files: list) -> tuple:
    """Per-file hashes and a tree hash over ``(name, hash)`` sorted by name."""
    per = {Path(f).name: blob_hash(Path(f).read_bytes()) for f in files}
    tree = "".join(f"{name}\0{h}\n" for name, h in sorted(per.items()))
    return hashlib.sha256(tree.encode()).hexdigest(), per


def write_manifest(out_dir, command: str, config: dict, seed: int, threads: int,
                   wall_time: float, files: list) -> Path:
    from . import __version__
    tree, per = content_hash(files)
    return write_json(Path(out_dir) / "manifest.json", {
        "command": command, "config": config, "seed": seed, "threads": threads,
        "wall_time_s": wall_time, "version": __version__,
        "content_hash": tree, "files": per})
