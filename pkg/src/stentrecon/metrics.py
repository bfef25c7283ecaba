"""Volumetric accuracy metrics.

Mesh volumes come from the divergence theorem; overlap volumes come from
voxelizing both meshes on one shared grid and counting voxel centers inside
each.  Inside tests use parity ray casting along +x, with a deterministic
jitter-and-retry pass for rays that graze edges or exit with odd parity.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .surface import StentMesh, signed_volume

MIN_FEATURE_MM = 0.15
_TRI_CHUNK = 16384
_BARY_TOL = 1e-9


class MetricsError(Exception):
    """Raised for open meshes, bad voxel sizes, or inconsistent volumes."""


@dataclass(frozen=True)
class AccuracyReport:
    v_reconstructed: float
    v_phantom: float
    v_overlap: float
    va: float
    pa: float
    voxel_size: float | None = None
    spacing: float | None = None

    def to_dict(self) -> dict:
        return {
            "spacing": self.spacing,
            "voxel_size": self.voxel_size,
            "v_r": self.v_reconstructed,
            "v_p": self.v_phantom,
            "v_o": self.v_overlap,
            "VA": self.va,
            "PA": self.pa,
        }


def _edge_codes(triangles: np.ndarray, n_vertices: int):
    tri = triangles.astype(np.int64)
    a = np.concatenate([tri[:, 0], tri[:, 1], tri[:, 2]])
    b = np.concatenate([tri[:, 1], tri[:, 2], tri[:, 0]])
    directed = a * n_vertices + b
    undirected = np.minimum(a, b) * n_vertices + np.maximum(a, b)
    return directed, undirected


def _boundary_edges(mesh: StentMesh) -> list[tuple[int, int]]:
    _, undirected = _edge_codes(mesh.triangles, len(mesh.vertices))
    codes, counts = np.unique(undirected, return_counts=True)
    bad = codes[counts != 2]
    n = len(mesh.vertices)
    return [(int(c // n), int(c % n)) for c in bad]


def mesh_volume(mesh: StentMesh) -> float:
    """Enclosed volume of a closed mesh, in mm^3.

    Open meshes are an error (the offending boundary edges are listed);
    inconsistent winding only warns, since the magnitude may still be usable.
    """
    boundary = _boundary_edges(mesh)
    if boundary:
        shown = ", ".join(str(e) for e in boundary[:8])
        tail = " ..." if len(boundary) > 8 else ""
        raise MetricsError(
            f"mesh is not closed: {len(boundary)} boundary/non-manifold edges: {shown}{tail}"
        )
    directed, _ = _edge_codes(mesh.triangles, len(mesh.vertices))
    _, counts = np.unique(directed, return_counts=True)
    if np.any(counts != 1):
        warnings.warn("mesh orientation is mixed; volume magnitude may be unreliable")
    return abs(signed_volume(mesh))


def _grid_geometry(bounds, voxel):
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    shape = np.maximum(np.ceil((hi - lo) / voxel).astype(int), 1)
    return lo, shape


def _cast_rays(mesh: StentMesh, origin, shape, voxel):
    """Per-ray crossing bins and suspect flags for +x parity casting.

    `crossings` has shape (ny, nz, nx + 1); slot i of a ray counts surface
    crossings that lie left of x-center i (slot nx holds crossings beyond the
    last center, so the ray's total is available for the exit-parity check).
    `suspects` marks rays that grazed a triangle edge within barycentric
    tolerance and need the jitter pass.
    """
    nx, ny, nz = int(shape[0]), int(shape[1]), int(shape[2])
    crossings = np.zeros((ny, nz, nx + 1), dtype=np.uint8)
    suspects = np.zeros((ny, nz), dtype=bool)
    tri_all = mesh.vertices[mesh.triangles]
    for start in range(0, len(tri_all), _TRI_CHUNK):
        t = tri_all[start : start + _TRI_CHUNK]
        e1y = t[:, 1, 1] - t[:, 0, 1]
        e1z = t[:, 1, 2] - t[:, 0, 2]
        e2y = t[:, 2, 1] - t[:, 0, 1]
        e2z = t[:, 2, 2] - t[:, 0, 2]
        denom = e1y * e2z - e2y * e1z
        keep = np.abs(denom) > 1e-14
        if not np.any(keep):
            continue
        t = t[keep]
        denom = denom[keep]
        e1y, e1z, e2y, e2z = e1y[keep], e1z[keep], e2y[keep], e2z[keep]

        ymin = t[:, :, 1].min(axis=1)
        ymax = t[:, :, 1].max(axis=1)
        zmin = t[:, :, 2].min(axis=1)
        zmax = t[:, :, 2].max(axis=1)
        jlo = np.maximum(np.ceil((ymin - origin[1]) / voxel - 0.5).astype(int), 0)
        jhi = np.minimum(np.floor((ymax - origin[1]) / voxel - 0.5).astype(int), ny - 1)
        klo = np.maximum(np.ceil((zmin - origin[2]) / voxel - 0.5).astype(int), 0)
        khi = np.minimum(np.floor((zmax - origin[2]) / voxel - 0.5).astype(int), nz - 1)
        counts = np.maximum(jhi - jlo + 1, 0) * np.maximum(khi - klo + 1, 0)
        total = int(counts.sum())
        if total == 0:
            continue

        # One row per (triangle, candidate ray) pair, rays taken from the
        # triangle's (y, z) bounding rectangle.
        idx = np.repeat(np.arange(len(t)), counts)
        offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        width = np.maximum(khi - klo + 1, 1)[idx]
        jq = jlo[idx] + offsets // width
        kq = klo[idx] + offsets % width
        yq = origin[1] + (jq + 0.5) * voxel
        zq = origin[2] + (kq + 0.5) * voxel

        dy = yq - t[idx, 0, 1]
        dz = zq - t[idx, 0, 2]
        ta = (dy * e2z[idx] - e2y[idx] * dz) / denom[idx]
        tb = (e1y[idx] * dz - dy * e1z[idx]) / denom[idx]
        inside = (ta > _BARY_TOL) & (tb > _BARY_TOL) & (ta + tb < 1.0 - _BARY_TOL)
        near = (
            (ta > -_BARY_TOL)
            & (tb > -_BARY_TOL)
            & (ta + tb < 1.0 + _BARY_TOL)
            & ~inside
        )
        if np.any(near):
            suspects[jq[near], kq[near]] = True
        if not np.any(inside):
            continue

        sel = idx[inside]
        x_hit = (
            t[sel, 0, 0]
            + ta[inside] * (t[sel, 1, 0] - t[sel, 0, 0])
            + tb[inside] * (t[sel, 2, 0] - t[sel, 0, 0])
        )
        bins = np.clip(
            np.floor((x_hit - origin[0]) / voxel - 0.5).astype(int) + 1, 0, nx
        )
        np.add.at(crossings, (jq[inside], kq[inside], bins), 1)
    return crossings, suspects


def _recast_ray(tri, yq, zq):
    """Crossing x positions for one ray; None when the ray still grazes."""
    y0 = tri[:, 0, 1]
    z0 = tri[:, 0, 2]
    e1y = tri[:, 1, 1] - y0
    e1z = tri[:, 1, 2] - z0
    e2y = tri[:, 2, 1] - y0
    e2z = tri[:, 2, 2] - z0
    denom = e1y * e2z - e2y * e1z
    keep = np.abs(denom) > 1e-14
    dy = yq - y0[keep]
    dz = zq - z0[keep]
    ta = (dy * e2z[keep] - e2y[keep] * dz) / denom[keep]
    tb = (e1y[keep] * dz - dy * e1z[keep]) / denom[keep]
    inside = (ta > _BARY_TOL) & (tb > _BARY_TOL) & (ta + tb < 1.0 - _BARY_TOL)
    near = (ta > -_BARY_TOL) & (tb > -_BARY_TOL) & (ta + tb < 1.0 + _BARY_TOL) & ~inside
    if np.any(near) or int(inside.sum()) % 2 == 1:
        return None
    sub = tri[keep][inside]
    return (
        sub[:, 0, 0]
        + ta[inside] * (sub[:, 1, 0] - sub[:, 0, 0])
        + tb[inside] * (sub[:, 2, 0] - sub[:, 0, 0])
    )


def voxelize(mesh: StentMesh, voxel: float, bounds=None) -> tuple[np.ndarray, np.ndarray]:
    """Boolean inside-grid sampled at voxel centers, plus the grid origin.

    The grid covers `bounds` (default: mesh bounding box padded by one
    voxel); cell (i, j, k) is centered at origin + (ijk + 0.5) * voxel.
    """
    if voxel <= 0.0:
        raise MetricsError("voxel size must be positive")
    if voxel > MIN_FEATURE_MM:
        raise MetricsError(
            f"voxel {voxel} mm exceeds the smallest strut feature ({MIN_FEATURE_MM} mm); "
            "pick a voxel no larger than the feature size, ideally a tenth of it"
        )
    if bounds is None:
        bounds = (mesh.vertices.min(axis=0) - voxel, mesh.vertices.max(axis=0) + voxel)
    origin, shape = _grid_geometry(bounds, voxel)
    crossings, suspects = _cast_rays(mesh, origin, shape, voxel)
    # uint8 accumulation wraps mod 256, which preserves parity.
    np.add.accumulate(crossings, axis=2, out=crossings)
    suspects |= crossings[:, :, -1] % 2 == 1
    inside = (crossings[:, :, :-1] & 1).astype(bool)

    if np.any(suspects):
        tri = mesh.vertices[mesh.triangles]
        nx = int(shape[0])
        x_centers = origin[0] + (np.arange(nx) + 0.5) * voxel
        for j, k in zip(*np.nonzero(suspects)):
            base_y = origin[1] + (j + 0.5) * voxel
            base_z = origin[2] + (k + 0.5) * voxel
            hits = None
            for attempt in range(1, 9):
                jit = voxel * 1e-3 * attempt
                hits = _recast_ray(tri, base_y + 0.11 * jit, base_z + 0.07 * jit)
                if hits is not None:
                    break
            if hits is None:
                raise MetricsError(
                    f"ray ({j}, {k}) kept grazing geometry after 8 jitter attempts"
                )
            inside[j, k, :] = (np.searchsorted(np.sort(hits), x_centers) % 2).astype(bool)
    return np.ascontiguousarray(np.moveaxis(inside, 2, 0)), origin


def _require_closed(mesh: StentMesh, name: str) -> None:
    if _boundary_edges(mesh):
        raise MetricsError(f"{name} mesh is not closed; parity casting needs a watertight surface")


def voxel_overlap(a: StentMesh, b: StentMesh, voxel: float) -> tuple[float, float, float]:
    """(V_a, V_b, V_o) in mm^3, counted on a shared grid covering both meshes."""
    _require_closed(a, "first")
    _require_closed(b, "second")
    lo = np.minimum(a.vertices.min(axis=0), b.vertices.min(axis=0)) - voxel
    hi = np.maximum(a.vertices.max(axis=0), b.vertices.max(axis=0)) + voxel
    grid_a, _ = voxelize(a, voxel, bounds=(lo, hi))
    grid_b, _ = voxelize(b, voxel, bounds=(lo, hi))
    cell = voxel**3
    v_a = float(grid_a.sum()) * cell
    v_b = float(grid_b.sum()) * cell
    v_o = float(np.logical_and(grid_a, grid_b).sum()) * cell
    return v_a, v_b, v_o


def accuracy(
    v_r: float,
    v_p: float,
    v_o: float,
    voxel_size: float | None = None,
    spacing: float | None = None,
) -> AccuracyReport:
    """Volumetric accuracy VA = 100 v_r / v_p and positional accuracy PA = 100 v_o / v_p."""
    if v_p <= 0.0:
        raise MetricsError("phantom volume must be positive")
    if v_o < 0.0 or v_o > min(v_r, v_p) * (1.0 + 1e-9) + 1e-12:
        raise MetricsError("overlap volume exceeds one of the operand volumes")
    return AccuracyReport(
        v_reconstructed=float(v_r),
        v_phantom=float(v_p),
        v_overlap=float(v_o),
        va=100.0 * v_r / v_p,
        pa=100.0 * v_o / v_p,
        voxel_size=voxel_size,
        spacing=spacing,
    )


def format_table(reports: list[AccuracyReport]) -> str:
    """Accuracy figures as a plain-text table, one column per run."""
    rows = [
        ("spacing (mm)", lambda r: r.spacing, "{:.2f}"),
        ("voxel (mm)", lambda r: r.voxel_size, "{:.3f}"),
        ("V_p (mm^3)", lambda r: r.v_phantom, "{:.4f}"),
        ("V_r (mm^3)", lambda r: r.v_reconstructed, "{:.4f}"),
        ("V_o (mm^3)", lambda r: r.v_overlap, "{:.4f}"),
        ("VA (%)", lambda r: r.va, "{:.2f}"),
        ("PA (%)", lambda r: r.pa, "{:.2f}"),
    ]
    lines = []
    for label, get, fmt in rows:
        cells = []
        for rep in reports:
            value = get(rep)
            cells.append("-" if value is None else fmt.format(value))
        lines.append(f"{label:<14}" + "".join(f"{c:>12}" for c in cells))
    return "\n".join(lines)
