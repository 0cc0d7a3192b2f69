"""File formats written by the command-line tool.

All writers go through :func:`atomic_write`, so a reader never sees a
half-written file.  Floats are written with ``%.17g`` (round-trip exact),
which together with the deterministic solver makes two runs of the same
problem byte-identical.

Density CSV columns: ``element, ix, iy, rho``.

History CSV columns: ``iteration, objective, mass_residual, active_box,
d_inf, orthogonality, step`` followed by ``dissipation_<k>, drift_<k>``
for every inelastic domain ``k``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

HISTORY_COLUMNS = ("iteration", "objective", "mass_residual", "active_box",
                   "d_inf", "orthogonality", "step")
DENSITY_COLUMNS = ("element", "ix", "iy", "rho")
MANIFEST_VERSION = 1


class FormatError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, path, line, message):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


def fmt(x: float) -> str:
    return "%.17g" % x


def atomic_write(path, data) -> None:
    """Write ``data`` (str or bytes) to ``path`` via a temp file and rename."""
    path = Path(path)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


# -- density ----------------------------------------------------------------------

def density_csv(rho: np.ndarray, nx: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DENSITY_COLUMNS)
    for e, r in enumerate(rho):
        w.writerow((e, e % nx, e // nx, fmt(r)))
    return buf.getvalue()


def read_density_csv(path):
    """Return ``(rho, nx, ny)`` from a density CSV.

    Rows may come in any order but must cover every element of a
    rectangular grid exactly once.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(c.strip() for c in rows[0]) != DENSITY_COLUMNS:
        raise FormatError(path, 1, f"expected header {','.join(DENSITY_COLUMNS)}")
    entries = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise FormatError(path, lineno, f"expected 4 fields, got {len(row)}")
        try:
            e, ix, iy = (int(c) for c in row[:3])
            r = float(row[3])
        except ValueError as exc:
            raise FormatError(path, lineno, f"bad value ({exc})") from None
        if not math.isfinite(r) or min(e, ix, iy) < 0:
            raise FormatError(path, lineno, "negative index or non-finite density")
        if e in entries:
            raise FormatError(path, lineno, f"duplicate element {e}")
        entries[e] = (ix, iy, r)
    if not entries:
        raise FormatError(path, None, "no density rows")
    nx = max(v[0] for v in entries.values()) + 1
    ny = max(v[1] for v in entries.values()) + 1
    if len(entries) != nx * ny:
        raise FormatError(path, None, f"{len(entries)} rows do not fill a {nx}x{ny} grid")
    rho = np.empty(nx * ny)
    for e, (ix, iy, r) in entries.items():
        if e != iy * nx + ix:
            raise FormatError(path, None, f"element {e} does not match ix={ix}, iy={iy}")
        rho[e] = r
    return rho, nx, ny


# -- images -------------------------------------------------------------------------

def gray_levels(rho: np.ndarray, rho_min: float) -> np.ndarray:
    """Pixel value 255 * (1 - (rho - rho_min) / (1 - rho_min)), so solid is black."""
    t = (np.asarray(rho, dtype=float) - rho_min) / (1.0 - rho_min)
    return np.clip(np.rint(255.0 * (1.0 - t)), 0, 255).astype(int)


def pgm_image(rho: np.ndarray, nx: int, ny: int, rho_min: float) -> str:
    """Plain (P2) PGM with one pixel per element; the first row is the mesh top."""
    grid = gray_levels(rho, rho_min).reshape(ny, nx)[::-1]
    lines = ["P2", f"{nx} {ny}", "255"]
    lines += [" ".join(map(str, row)) for row in grid]
    return "\n".join(lines) + "\n"


def read_pgm(path) -> np.ndarray:
    """Parse a plain PGM into an integer array of shape (rows, columns)."""
    tokens = []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            tokens += line.split("#", 1)[0].split()
    if not tokens or tokens[0] != "P2":
        raise FormatError(path, 1, "not a plain PGM (P2)")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.array([int(t) for t in tokens[4:]])
    if pixels.size != w * h:
        raise FormatError(path, None, f"expected {w * h} pixels, found {pixels.size}")
    return pixels.reshape(h, w)


# -- history ----------------------------------------------------------------------

def history_columns(n_domains: int) -> list:
    cols = list(HISTORY_COLUMNS)
    for k in range(n_domains):
        cols += [f"dissipation_{k}", f"drift_{k}"]
    return cols


def history_csv(history, n_domains: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(history_columns(n_domains))
    for rec in history:
        row = [rec.iteration, fmt(rec.objective), fmt(rec.mass_residual), rec.active_box,
               fmt(rec.d_inf), fmt(rec.orthogonality), fmt(rec.step)]
        for rate, drift in zip(rec.dissipation, rec.drift):
            row += [fmt(rate), fmt(drift)]
        values = [float(v) for v in row]
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"non-finite value in history record {rec.iteration}")
        w.writerow(row)
    return buf.getvalue()


# -- manifest -----------------------------------------------------------------------

def manifest(result, files) -> dict:
    """Run summary: resolved parameters, domains, termination and outputs."""
    pd = result.problem
    return {
        "manifest_version": MANIFEST_VERSION,
        "schema_version": pd.schema_version,
        "problem": pd.to_dict(),
        "resolved": {
            "tensile_strength": result.tensile_strength,
            "initial_max_sigma1": result.initial_max_sigma1,
            "target_mass": result.target_mass,
            "n_elements": result.mesh.n_elements,
            "void_elements": [int(e) for e in result.mesh.void_elements],
        },
        "domains": [
            {"id": d.id, "elements": [int(e) for e in d.elements],
             "reference_rate": d.reference_rate}
            for d in result.domains
        ],
        "degenerate_elements": [int(e) for e in result.degenerate_elements],
        "termination": result.termination,
        "iterations": len(result.history),
        "final_objective": result.final.objective,
        "files": sorted(files),
    }


def manifest_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
