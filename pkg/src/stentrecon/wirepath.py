"""Guide-wire centerline handling and frame placement.

The pullback geometry is recovered by sliding an orthonormal frame along the
wire centerline. Frames are transported with the double-reflection scheme
(rotation-minimizing), not a Frenet construction: Frenet normals are undefined
on straight runs and flip at inflections, which would spin the stent cloud
around the wire. Tangents come from centered finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class WirePathError(ValueError):
    pass


class PlacementError(ValueError):
    """A requested frame arclength falls off the wire."""

    def __init__(self, frame_indices, message):
        super().__init__(message)
        self.frame_indices = list(frame_indices)


@dataclass(frozen=True)
class WirePath:
    """Ordered centerline samples in mm."""

    samples: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.samples, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
            raise WirePathError("wire path needs at least two xyz samples")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if (seg == 0.0).any():
            raise WirePathError("wire path has duplicate consecutive samples")
        object.__setattr__(self, "samples", pts)

    @property
    def cumulative_arclength(self) -> np.ndarray:
        seg = np.linalg.norm(np.diff(self.samples, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.cumulative_arclength[-1])

    def point_at(self, s: float) -> np.ndarray:
        cum = self.cumulative_arclength
        s = float(np.clip(s, 0.0, cum[-1]))
        i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(cum) - 2))
        f = (s - cum[i]) / (cum[i + 1] - cum[i])
        return (1 - f) * self.samples[i] + f * self.samples[i + 1]


@dataclass(frozen=True)
class Landmark:
    """Anchors one frame index to one wire arclength."""

    frame_index: int
    arclength: float


@dataclass(frozen=True)
class FrameTransform:
    """Rigid map from in-plane frame coords to 3-d: p = R @ (u, v, 0) + t.

    Rotation columns are (normal, binormal, tangent).
    """

    frame_index: int
    rotation: np.ndarray
    translation: np.ndarray
    arclength: float


@dataclass(frozen=True)
class FrameField:
    """Transported frames at every sample of a resampled path."""

    arclengths: np.ndarray
    origins: np.ndarray
    tangents: np.ndarray
    normals: np.ndarray
    binormals: np.ndarray

    def __len__(self) -> int:
        return self.origins.shape[0]


def resample_by_arclength(path: WirePath, step: float) -> WirePath:
    """Uniformly respace samples along the polyline.

    The sample count is round(length / step) + 1, so the realized spacing is
    length / (count - 1), as close to the request as uniformity allows.
    Already-uniform paths with the same target count are returned unchanged,
    which makes repeated resampling a no-op.
    """
    if step <= 0.0:
        raise WirePathError("step must be positive")
    total = path.length
    if step > total:
        raise WirePathError(f"step {step} exceeds path length {total}")
    count = max(2, int(round(total / step)) + 1)
    cum = path.cumulative_arclength
    spacing = np.diff(cum)
    # Already at the requested resolution: re-chopping a uniform polyline can
    # only re-cut its corners, so hand it back and keep resampling idempotent.
    if len(path.samples) == count and np.ptp(spacing) <= 1e-3 * spacing.mean():
        return path
    targets = np.linspace(0.0, total, count)
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(cum) - 2)
    frac = (targets - cum[idx]) / (cum[idx + 1] - cum[idx])
    pts = (1 - frac)[:, None] * path.samples[idx] + frac[:, None] * path.samples[idx + 1]
    pts[0] = path.samples[0]
    pts[-1] = path.samples[-1]
    return WirePath(pts)


def _least_aligned_axis(t: np.ndarray) -> np.ndarray:
    return np.eye(3)[int(np.argmin(np.abs(t)))]


def frames_along(path: WirePath, roll_reference: np.ndarray | None = None) -> FrameField:
    """Rotation-minimizing frames at every path sample (double reflection).

    ``roll_reference`` fixes the global roll: the first normal is that vector
    projected perpendicular to the first tangent.  When omitted, the seed is
    the coordinate axis least aligned with the first tangent.
    """
    pts = path.samples
    n = pts.shape[0]
    tangents = np.empty_like(pts)
    tangents[1:-1] = pts[2:] - pts[:-2]
    tangents[0] = pts[1] - pts[0]
    tangents[-1] = pts[-1] - pts[-2]
    norms = np.linalg.norm(tangents, axis=1)
    if (norms == 0.0).any():
        raise WirePathError("degenerate tangent on the wire path")
    tangents /= norms[:, None]

    normals = np.empty_like(pts)
    if roll_reference is None:
        seed = _least_aligned_axis(tangents[0])
    else:
        seed = np.asarray(roll_reference, dtype=np.float64)
    n0 = seed - (seed @ tangents[0]) * tangents[0]
    n0_len = np.linalg.norm(n0)
    if n0_len < 1e-12:
        raise WirePathError("roll reference is parallel to the wire tangent")
    normals[0] = n0 / n0_len
    for i in range(n - 1):
        v1 = pts[i + 1] - pts[i]
        c1 = v1 @ v1
        n_l = normals[i] - (2.0 * (v1 @ normals[i]) / c1) * v1
        t_l = tangents[i] - (2.0 * (v1 @ tangents[i]) / c1) * v1
        v2 = tangents[i + 1] - t_l
        c2 = v2 @ v2
        if c2 < 1e-30:
            normals[i + 1] = n_l
        else:
            normals[i + 1] = n_l - (2.0 * (v2 @ n_l) / c2) * v2
        # Numerical hygiene: keep the normal exactly perpendicular and unit.
        nn = normals[i + 1] - (normals[i + 1] @ tangents[i + 1]) * tangents[i + 1]
        normals[i + 1] = nn / np.linalg.norm(nn)
    binormals = np.cross(tangents, normals)
    return FrameField(
        arclengths=path.cumulative_arclength,
        origins=pts.copy(),
        tangents=tangents,
        normals=normals,
        binormals=binormals,
    )


def _interpolated_frame(field: FrameField, s: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Origin, tangent, normal at arclength s (blend + re-orthonormalize)."""
    cum = field.arclengths
    s = float(np.clip(s, cum[0], cum[-1]))
    i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(cum) - 2))
    f = (s - cum[i]) / (cum[i + 1] - cum[i])
    origin = (1 - f) * field.origins[i] + f * field.origins[i + 1]
    t = (1 - f) * field.tangents[i] + f * field.tangents[i + 1]
    t = t / np.linalg.norm(t)
    nrm = (1 - f) * field.normals[i] + f * field.normals[i + 1]
    nrm = nrm - (nrm @ t) * t
    nrm = nrm / np.linalg.norm(nrm)
    return origin, t, nrm


def place_frames(
    path: WirePath,
    landmark: Landmark,
    spacing: float,
    frame_indices,
    direction: int = 1,
    roll_reference: np.ndarray | None = None,
) -> list[FrameTransform]:
    """Pin each frame index to its wire arclength and build its rigid map.

    Frame i sits at landmark.arclength + (i - landmark.frame_index) * spacing,
    walked in the pullback direction (+1 or -1).
    """
    if spacing <= 0.0:
        raise WirePathError("spacing must be positive")
    if direction not in (1, -1):
        raise WirePathError("direction must be +1 or -1")
    field = frames_along(path, roll_reference=roll_reference)
    total = path.length
    out = []
    bad = []
    tol = 1e-9
    for idx in frame_indices:
        s = landmark.arclength + (idx - landmark.frame_index) * spacing * direction
        if s < -tol or s > total + tol:
            bad.append(idx)
            continue
        origin, t, nrm = _interpolated_frame(field, s)
        b = np.cross(t, nrm)
        rotation = np.column_stack([nrm, b, t])
        out.append(FrameTransform(frame_index=int(idx), rotation=rotation, translation=origin, arclength=s))
    if bad:
        raise PlacementError(bad, f"frames {bad} fall outside the wire (length {total:.3f} mm)")
    return out


def register_cloud(
    inplane: np.ndarray,
    frame_indices: np.ndarray,
    transforms: list[FrameTransform],
) -> np.ndarray:
    """Map per-frame in-plane (u, v) mm points into wire space.

    Points keep their order; every frame index must have a transform.
    """
    inplane = np.asarray(inplane, dtype=np.float64)
    frame_indices = np.asarray(frame_indices)
    by_index = {t.frame_index: t for t in transforms}
    missing = sorted(set(frame_indices.tolist()) - set(by_index))
    if missing:
        raise PlacementError(missing, f"no transform for frames {missing}")
    out = np.empty((inplane.shape[0], 3))
    for k, (uv, fi) in enumerate(zip(inplane, frame_indices)):
        tr = by_index[int(fi)]
        out[k] = tr.rotation @ np.array([uv[0], uv[1], 0.0]) + tr.translation
    return out
