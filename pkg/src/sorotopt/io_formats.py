"""File formats: waveforms, density volumes, surface meshes, run exports.

Formats are chosen to be diff-friendly and language-neutral:

* waveform CSV: two columns ``time_s,pressure_pa`` (header optional), an
  optional ``# period_s = <value>`` comment pins the period;
* density volume: a 16-byte magic followed by int64 ndim and dims, float64
  spacing and origin, then float64 cell values in C order (a CSV fallback
  exists for inspection);
* surface meshes: ASCII STL in 3D, closed polyline CSV in 2D;
* history CSV with the fixed column set
  ``iter,L_m,C,xg_x,xg_y,xg_z,mass_kg,gravity,lambda_c,rho_p,seconds``.

All exports are atomic (write to a temporary name, then rename) and the run
manifest is written last, so a partially written output directory never
carries a manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.sparse import coo_array
from scipy.sparse.csgraph import connected_components

from .constitutive import ActuationWaveform
from .errors import ConfigurationError, ScenarioParseError

DENSITY_VOLUME_MAGIC = b"SOROTOPT-DVOL-1\n"  # exactly 16 bytes

HISTORY_COLUMNS = "iter,L_m,C,xg_x,xg_y,xg_z,mass_kg,gravity,lambda_c,rho_p,seconds"


def _fmt(x) -> str:
    """Full-precision decimal text for a scalar (plain float repr)."""
    return repr(float(x))


# ---------------------------------------------------------------------------
# waveform CSV
# ---------------------------------------------------------------------------

def load_waveform(path) -> ActuationWaveform:
    """Read a measured pressure waveform (``time_s,pressure_pa``).

    Times must be strictly increasing. The period is taken from a
    ``# period_s = <value>`` comment when present, otherwise inferred as the
    last sample time plus the mean sample spacing (i.e. the table is assumed
    to cover exactly one period). Times are shifted so the table starts at 0.
    """
    path = Path(path)
    period = None
    rows = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if body.replace(" ", "").lower().startswith("period_s="):
                period = float(body.split("=", 1)[1])
            continue
        parts = [p for p in line.replace(",", " ").split() if p]
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except (ValueError, IndexError):
            if not rows:
                continue  # header row
            raise ScenarioParseError("expected two numeric columns",
                                     key=path.name, line=lineno) from None
    if not rows:
        raise ScenarioParseError("waveform file is empty", key=path.name)
    data = np.asarray(rows, dtype=float)
    times, pressures = data[:, 0], data[:, 1]
    if np.any(np.diff(times) <= 0):
        raise ScenarioParseError("waveform times must be strictly increasing",
                                 key=path.name)
    times = times - times[0]
    if period is None:
        spacing = np.diff(times).mean() if times.size > 1 else 1.0
        period = float(times[-1] + spacing)
    return ActuationWaveform(times=times, pressures=pressures, period=period)


def write_waveform(waveform: ActuationWaveform, path):
    lines = [f"# period_s = {_fmt(waveform.period)}", "time_s,pressure_pa"]
    lines += [f"{_fmt(t)},{_fmt(p)}" for t, p in zip(waveform.times, waveform.pressures)]
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def load_master_curve(path):
    """Read a modulus master curve CSV: ``omega_rad_s,G_storage,G_loss``."""
    from .prony import MasterCurve

    path = Path(path)
    rows = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p for p in line.replace(",", " ").split() if p]
        try:
            rows.append([float(p) for p in parts[:3]])
        except ValueError:
            if not rows:
                continue
            raise ScenarioParseError("expected three numeric columns",
                                     key=path.name, line=lineno) from None
    if not rows:
        raise ScenarioParseError("master curve file is empty", key=path.name)
    data = np.asarray(rows, dtype=float)
    return MasterCurve(data[:, 0], data[:, 1], data[:, 2])


# ---------------------------------------------------------------------------
# density volume
# ---------------------------------------------------------------------------

@dataclass
class DensityVolume:
    """Fictitious density resampled onto a regular cell grid.

    Values live at cell centers: cell (i, j[, k]) is centered at
    ``origin + (index + 0.5) * spacing``.
    """

    spacing: float
    origin: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != self.origin.size:
            raise ConfigurationError("origin dimension must match the value array")
        if np.any(self.values < -1e-12) or np.any(self.values > 1 + 1e-12):
            raise ConfigurationError("density values must lie in [0, 1]")
        self.values = np.clip(self.values, 0.0, 1.0)

    @property
    def dims(self) -> tuple:
        return self.values.shape

    @property
    def dim(self) -> int:
        return self.values.ndim

    def cell_centers_axis(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.spacing

    def sample_at(self, points: np.ndarray) -> np.ndarray:
        """Multilinear interpolation at world points, clamped at the border."""
        pts = np.asarray(points, dtype=float)
        frac = (pts - self.origin) / self.spacing - 0.5
        frac = np.clip(frac, 0.0, np.asarray(self.dims) - 1.000001)
        base = np.floor(frac).astype(int)
        base = np.minimum(base, np.asarray(self.dims) - 2)
        base = np.maximum(base, 0)
        t = frac - base
        out = np.zeros(len(pts))
        for corner in range(2**self.dim):
            offs = np.array([(corner >> a) & 1 for a in range(self.dim)])
            weight = np.prod(np.where(offs, t, 1.0 - t), axis=1)
            idx = tuple((base + offs).T)
            out += weight * self.values[idx]
        return out


def save_density_volume(volume: DensityVolume, path):
    """Binary layout: magic, int64 ndim + dims, float64 spacing + origin, values."""
    path = Path(path)
    with _atomic_binary(path) as fh:
        fh.write(DENSITY_VOLUME_MAGIC)
        np.asarray([volume.dim], dtype="<i8").tofile(fh)
        np.asarray(volume.dims, dtype="<i8").tofile(fh)
        np.asarray([volume.spacing], dtype="<f8").tofile(fh)
        np.asarray(volume.origin, dtype="<f8").tofile(fh)
        np.ascontiguousarray(volume.values, dtype="<f8").tofile(fh)


def load_density_volume(path) -> DensityVolume:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:16] == DENSITY_VOLUME_MAGIC:
        offset = 16
        ndim = int(np.frombuffer(raw, "<i8", 1, offset)[0]); offset += 8
        dims = np.frombuffer(raw, "<i8", ndim, offset); offset += 8 * ndim
        spacing = float(np.frombuffer(raw, "<f8", 1, offset)[0]); offset += 8
        origin = np.frombuffer(raw, "<f8", ndim, offset); offset += 8 * ndim
        values = np.frombuffer(raw, "<f8", int(np.prod(dims)), offset)
        return DensityVolume(spacing, origin.copy(), values.reshape(dims).copy())
    return _load_density_csv(path)


def save_density_csv(volume: DensityVolume, path):
    """Inspection-friendly fallback: header comment plus index/value rows."""
    dims = ",".join(str(d) for d in volume.dims)
    origin = ",".join(_fmt(v) for v in volume.origin)
    lines = [f"# dims={dims} spacing={_fmt(volume.spacing)} origin={origin}"]
    lines.append(",".join(f"i{a}" for a in range(volume.dim)) + ",gamma")
    for idx in np.ndindex(volume.dims):
        lines.append(",".join(str(i) for i in idx) + f",{_fmt(volume.values[idx])}")
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def _load_density_csv(path: Path) -> DensityVolume:
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ScenarioParseError("not a density volume file", key=path.name)
    header = dict(part.split("=", 1) for part in lines[0].lstrip("#").split())
    dims = tuple(int(v) for v in header["dims"].split(","))
    spacing = float(header["spacing"])
    origin = np.asarray([float(v) for v in header["origin"].split(",")])
    values = np.zeros(dims)
    for line in lines[2:]:
        if not line.strip():
            continue
        parts = line.split(",")
        values[tuple(int(p) for p in parts[:-1])] = float(parts[-1])
    return DensityVolume(spacing, origin, values)


def density_volume_from_particles(positions, values, origin, size, spacing,
                                  fill=0.0) -> DensityVolume:
    """Average per-particle densities into lattice cells spanning a box."""
    dims = tuple(np.maximum(1, np.round(np.asarray(size) / spacing)).astype(int))
    grid_sum = np.zeros(dims)
    grid_cnt = np.zeros(dims)
    idx = np.floor((np.asarray(positions) - np.asarray(origin)) / spacing).astype(int)
    ok = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
    np.add.at(grid_sum, tuple(idx[ok].T), np.asarray(values)[ok])
    np.add.at(grid_cnt, tuple(idx[ok].T), 1.0)
    vals = np.where(grid_cnt > 0, grid_sum / np.maximum(grid_cnt, 1.0), fill)
    return DensityVolume(spacing, np.asarray(origin, dtype=float), vals)


# ---------------------------------------------------------------------------
# isosurface extraction
# ---------------------------------------------------------------------------

@dataclass
class SurfaceMesh:
    """Isosurface geometry: triangles in 3D, line segments in 2D."""

    vertices: np.ndarray
    faces: np.ndarray  # (k, 3) triangles or (k, 2) segments
    watertight: bool = False
    n_components: int = 0

    @property
    def dim(self) -> int:
        return self.vertices.shape[1] if self.vertices.size else 0

    @property
    def empty(self) -> bool:
        return self.faces.size == 0


def extract_isosurface(volume: DensityVolume, level: float = 0.5) -> SurfaceMesh:
    """Contour the density at ``level`` with linear interpolation along edges.

    The volume is padded with one layer of void so surfaces close at the
    data boundary; a uniform field therefore yields an empty mesh only when
    it never crosses the level. Watertightness is checked in 3D.
    """
    if not 0.0 < level < 1.0:
        raise ConfigurationError("isosurface level must lie in (0, 1)")
    padded = np.pad(volume.values, 1, constant_values=0.0)
    if padded.min() >= level or padded.max() < level:
        return SurfaceMesh(np.empty((0, volume.dim)),
                           np.empty((0, volume.dim), dtype=int))
    shift = volume.origin - 0.5 * volume.spacing
    if volume.dim == 2:
        from skimage.measure import find_contours

        verts_list, segs = [], []
        base = 0
        for contour in find_contours(padded, level):
            closed = np.allclose(contour[0], contour[-1])
            pts = contour[:-1] if closed else contour
            n = len(pts)
            verts_list.append(pts * volume.spacing + shift)
            idx = base + np.arange(n)
            nxt = np.roll(idx, -1) if closed else idx[1:]
            cur = idx if closed else idx[:-1]
            segs.append(np.stack([cur, nxt], axis=1))
            base += n
        vertices = np.vstack(verts_list)
        faces = np.vstack(segs)
        mesh = SurfaceMesh(vertices, faces)
        mesh.n_components = _count_components(len(vertices), faces)
        counts = np.bincount(faces.ravel(), minlength=len(vertices))
        mesh.watertight = bool(np.all(counts == 2))
        return mesh

    from skimage.measure import marching_cubes

    verts, faces, _, _ = marching_cubes(padded, level=level)
    vertices = verts * volume.spacing + shift
    mesh = SurfaceMesh(vertices, faces.astype(int))
    mesh.n_components = _count_components(len(vertices), faces)
    mesh.watertight = _is_watertight(faces)
    return mesh


def _count_components(n_vertices: int, faces: np.ndarray) -> int:
    if faces.size == 0:
        return 0
    edges = np.vstack([faces[:, [i, (i + 1) % faces.shape[1]]]
                       for i in range(faces.shape[1])])
    graph = coo_array((np.ones(len(edges)), (edges[:, 0], edges[:, 1])),
                      shape=(n_vertices, n_vertices))
    n, _ = connected_components(graph, directed=False)
    # vertices not referenced by any face do not exist here by construction
    return int(n)


def _is_watertight(faces: np.ndarray) -> bool:
    """Every undirected edge borders exactly two faces, once per direction."""
    directed = {}
    for tri in faces:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (int(a), int(b))
            if key in directed:
                return False  # duplicated directed edge: inconsistent orientation
            directed[key] = True
    for (a, b) in directed:
        if (b, a) not in directed:
            return False
    return True


def isosurface_measure(volume: DensityVolume, level: float) -> float:
    """Enclosed area (2D) / volume (3D) above the level, by cell counting."""
    return float(np.sum(volume.values >= level)) * volume.spacing**volume.dim


# ---------------------------------------------------------------------------
# mesh writers
# ---------------------------------------------------------------------------

def write_stl(mesh: SurfaceMesh, path, name="sorotopt"):
    """ASCII STL with facet normals from the triangle winding."""
    if mesh.dim and mesh.dim != 3:
        raise ConfigurationError("STL export requires a 3D mesh")
    lines = [f"solid {name}"]
    v = mesh.vertices
    for tri in mesh.faces:
        a, b, c = v[tri[0]], v[tri[1]], v[tri[2]]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        n = n / norm if norm > 0 else np.zeros(3)
        lines.append(f"  facet normal {n[0]:.9e} {n[1]:.9e} {n[2]:.9e}")
        lines.append("    outer loop")
        for p in (a, b, c):
            lines.append(f"      vertex {p[0]:.9e} {p[1]:.9e} {p[2]:.9e}")
        lines.append("    endloop")
        lines.append("  endfacet")
    lines.append(f"endsolid {name}")
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def write_polyline_csv(mesh: SurfaceMesh, path):
    """2D contour as segment endpoints: x0,y0,x1,y1 per line."""
    lines = ["x0_m,y0_m,x1_m,y1_m"]
    for a, b in mesh.faces:
        p, q = mesh.vertices[a], mesh.vertices[b]
        lines.append(f"{_fmt(p[0])},{_fmt(p[1])},{_fmt(q[0])},{_fmt(q[1])}")
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# history CSV and snapshots
# ---------------------------------------------------------------------------

def history_csv(history, deterministic: bool = False) -> str:
    """Render the optimization history with the fixed column layout.

    In deterministic mode the wall-time column is written as 0.0 so that
    identical runs produce byte-identical files.
    """
    lines = [HISTORY_COLUMNS]
    for r in history.records:
        xg = np.zeros(3)
        xg[: len(r.xg)] = r.xg
        seconds = 0.0 if deterministic else r.seconds
        lines.append(
            f"{r.iteration},{_fmt(r.objective)},{_fmt(r.constraint)},"
            f"{_fmt(xg[0])},{_fmt(xg[1])},{_fmt(xg[2])},{_fmt(r.mass)},"
            f"{_fmt(r.gravity)},{_fmt(r.multiplier)},{_fmt(r.penalty)},"
            f"{_fmt(seconds)}"
        )
    return "\n".join(lines) + "\n"


def write_snapshot_csv(path, step, positions, phase, gamma_by_particle):
    coords = ["x_m", "y_m", "z_m"][: positions.shape[1]]
    lines = [f"# step = {step}", ",".join(coords) + ",phase,gamma"]
    for pos, ph, g in zip(positions, phase, gamma_by_particle):
        lines.append(",".join(_fmt(c) for c in pos) + f",{int(ph)},{_fmt(g)}")
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def write_gradient_csv(path, dphi):
    lines = ["index,dphi"] + [f"{i},{_fmt(v)}" for i, v in enumerate(dphi)]
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# optimizer checkpoint (resume file)
# ---------------------------------------------------------------------------

def save_checkpoint(path, design_values, adam, auglag, iteration, history, best):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(
        tmp,
        design_values=design_values,
        adam_m=adam.m, adam_v=adam.v, adam_count=adam.count,
        adam_lr=adam.learning_rate,
        auglag_multiplier=auglag.multiplier, auglag_penalty=auglag.penalty,
        auglag_c_max=auglag.c_max, auglag_growth=auglag.growth_factor,
        auglag_every=auglag.growth_every, auglag_activation=auglag.activation_iteration,
        iteration=iteration,
        best_values=best.values, best_objective=best.objective,
        best_iteration=best.iteration, best_feasible=best.feasible,
        history_rows=_history_rows(history),
    )
    os.replace(tmp, path)


def _history_rows(history) -> np.ndarray:
    rows = []
    for r in history.records:
        xg = np.zeros(3)
        xg[: len(r.xg)] = r.xg
        rows.append([r.iteration, r.objective, r.constraint, *xg, r.mass,
                     r.gravity, r.multiplier, r.penalty, r.seconds])
    return np.asarray(rows, dtype=float) if rows else np.zeros((0, 11))


def load_checkpoint(path) -> dict:
    with np.load(path) as data:
        return {key: data[key] for key in data.files}


# ---------------------------------------------------------------------------
# run export
# ---------------------------------------------------------------------------

def export_outputs(out_dir, scenario_echo: str, history=None,
                   final_volume: Optional[DensityVolume] = None,
                   best_volume: Optional[DensityVolume] = None,
                   mesh: Optional[SurfaceMesh] = None,
                   snapshots=None, gamma_by_particle=None,
                   deterministic: bool = False,
                   extra: Optional[dict] = None) -> dict:
    """Write the standard result set and, last of all, the manifest.

    Returns a mapping of artifact names to paths. The output directory is
    probed for writability first so nothing is half-written.
    """
    from . import __version__

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-probe"
    try:
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory not writable: {out}") from exc

    written = {}
    _atomic_write_text(out / "scenario.echo", scenario_echo)
    written["scenario"] = str(out / "scenario.echo")
    if history is not None:
        _atomic_write_text(out / "history.csv", history_csv(history, deterministic))
        written["history"] = str(out / "history.csv")
    if final_volume is not None:
        save_density_volume(final_volume, out / "density_final.dvol")
        written["density_final"] = str(out / "density_final.dvol")
    if best_volume is not None:
        save_density_volume(best_volume, out / "density_best.dvol")
        written["density_best"] = str(out / "density_best.dvol")
    if mesh is not None and not mesh.empty:
        if mesh.dim == 3:
            write_stl(mesh, out / "surface.stl")
            written["surface"] = str(out / "surface.stl")
        else:
            write_polyline_csv(mesh, out / "surface.csv")
            written["surface"] = str(out / "surface.csv")
    if snapshots:
        snap_dir = out / "snapshots"
        snap_dir.mkdir(exist_ok=True)
        for step, positions, phase in snapshots:
            write_snapshot_csv(snap_dir / f"step_{step:08d}.csv", step,
                               positions, phase, gamma_by_particle)
            written[f"snapshot_{step}"] = str(snap_dir / f"step_{step:08d}.csv")

    manifest = {
        "version": __version__,
        "deterministic": deterministic,
        "scenario": scenario_echo,
        "artifacts": sorted(written),
    }
    if extra:
        manifest.update(extra)
    _atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    written["manifest"] = str(out / "manifest.json")
    return written


# ---------------------------------------------------------------------------
# atomic write helpers
# ---------------------------------------------------------------------------

def _atomic_write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


class _atomic_binary:
    def __init__(self, path: Path):
        self.path = path
        self.tmp = path.with_name(path.name + ".tmp")

    def __enter__(self):
        self.fh = open(self.tmp, "wb")
        return self.fh

    def __exit__(self, exc_type, exc, tb):
        self.fh.close()
        if exc_type is None:
            os.replace(self.tmp, self.path)
        else:
            self.tmp.unlink(missing_ok=True)
        return False
