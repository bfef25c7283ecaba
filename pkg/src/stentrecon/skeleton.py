"""Stent wireframe assembly from a classified, registered strut cloud.

Rings become periodic cubic splines, beams natural ones, and each beam end is
tied to a ring at an explicit junction record. The assembly order matters:
rings first (they are the anchors), then junction resolution, then the beams
are refitted so their end knots sit exactly on the rings.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .splines import SplineCurve, fit_natural_spline, fit_periodic_spline
from .topology import ClassifiedCloud

DANGLING_MM = 1.0
_SCAN_POINTS = 1000


class SkeletonError(ValueError):
    def __init__(self, message: str, group_ids=()):
        super().__init__(message)
        self.group_ids = tuple(group_ids)


class DanglingBeamWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class JunctionRecord:
    beam_key: str
    end: str  # "start" or "end"
    ring_key: str
    ring_t: float
    point: np.ndarray
    distance: float
    dangling: bool = False


@dataclass(frozen=True)
class StentSkeleton:
    ring_keys: tuple[str, ...]
    rings: tuple[SplineCurve, ...]
    beam_keys: tuple[str, ...]
    beams: tuple[SplineCurve, ...]
    junctions: tuple[JunctionRecord, ...]
    lumen_axis: np.ndarray | None = None

    def ring(self, key: str) -> SplineCurve:
        return self.rings[self.ring_keys.index(key)]

    def beam(self, key: str) -> SplineCurve:
        return self.beams[self.beam_keys.index(key)]


def _golden_section(f, lo: float, hi: float, tol: float = 1e-10) -> float:
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def nearest_ring_parameter(ring: SplineCurve, point: np.ndarray) -> tuple[float, np.ndarray, float]:
    """Ring parameter, curve point, and distance closest to `point`.

    Dense scan picks the best span, golden section polishes inside the
    bracket; periodic evaluation makes the bracket safe across the seam.
    """
    point = np.asarray(point, dtype=np.float64)
    t0, t1 = ring.domain
    ts = np.linspace(t0, t1, _SCAN_POINTS, endpoint=False)
    d2 = ((ring.evaluate(ts) - point) ** 2).sum(axis=1)
    k = int(np.argmin(d2))
    step = (t1 - t0) / _SCAN_POINTS

    def objective(t):
        delta = ring.evaluate(t) - point
        return float(delta @ delta)

    t_best = _golden_section(objective, ts[k] - step, ts[k] + step)
    if ring.closed:
        t_best = t0 + (t_best - t0) % (t1 - t0)
    at = ring.evaluate(t_best)
    return float(t_best), at, float(np.linalg.norm(at - point))


def attach_beam_to_ring(
    beam: SplineCurve,
    ring: SplineCurve,
    end: str,
    beam_key: str = "",
    ring_key: str = "",
    shared_point: np.ndarray | None = None,
    dangling_threshold: float = DANGLING_MM,
) -> JunctionRecord:
    """Resolve one beam end against a ring curve.

    A shared junction point (a cloud point classified into both groups) wins
    outright: it is already a ring knot, so the parameter lookup is exact.
    Otherwise the beam endpoint is projected onto the ring by minimizing
    distance over the ring parameter.
    """
    if end not in ("start", "end"):
        raise SkeletonError(f"unknown beam end '{end}'")
    endpoint = beam.points[0] if end == "start" else beam.points[-1]
    if shared_point is not None:
        shared_point = np.asarray(shared_point, dtype=np.float64)
        gaps = np.linalg.norm(ring.points - shared_point, axis=1)
        j = int(np.argmin(gaps))
        if gaps[j] > 1e-9:
            raise SkeletonError(
                f"shared junction point for {beam_key or 'beam'} is not a knot of "
                f"{ring_key or 'the ring'} (nearest knot {gaps[j]:.2e} mm away)"
            )
        t = float(ring.knots[j])
        at = ring.points[j].copy()
        distance = float(np.linalg.norm(endpoint - at))
    else:
        t, at, distance = nearest_ring_parameter(ring, endpoint)
    dangling = distance > dangling_threshold
    if dangling:
        warnings.warn(
            f"beam {beam_key or '?'} {end} is {distance:.3f} mm from ring "
            f"{ring_key or '?'}; keeping the junction but flagging it",
            DanglingBeamWarning,
            stacklevel=2,
        )
    return JunctionRecord(
        beam_key=beam_key,
        end=end,
        ring_key=ring_key,
        ring_t=t,
        point=at,
        distance=distance,
        dangling=dangling,
    )


def _key_id(key: str) -> int:
    return int(key.split(":", 1)[1])


def _canonical_ring_order(refs, theta):
    """Sort by theta, then rotate so the list starts after the largest gap."""
    ordered = sorted(refs, key=lambda r: (theta[r], r))
    if len(ordered) < 2:
        return ordered
    th = [theta[r] for r in ordered]
    gaps = [(th[(i + 1) % len(th)] - th[i]) % (2.0 * np.pi) for i in range(len(th))]
    start = (int(np.argmax(gaps)) + 1) % len(ordered)
    return ordered[start:] + ordered[:start]


def build_skeleton(
    classified: ClassifiedCloud,
    positions: np.ndarray,
    lumen_axis: np.ndarray | None = None,
    beam_parameters: str = "centripetal",
    dangling_threshold: float = DANGLING_MM,
) -> StentSkeleton:
    """Fit rings, resolve junctions, then fit beams with junction end knots.

    `positions` is the registered 3D cloud indexed by point_ref. Member
    ordering is re-derived from the flattened coordinates (theta for rings,
    v for beams), so group tuple order in `classified` does not matter.
    `beam_parameters` picks the beam parameterization: "centripetal"
    (default) or "z", which uses the points' z coordinate directly and
    requires it to be strictly increasing along each beam.
    """
    if beam_parameters not in ("centripetal", "z"):
        raise SkeletonError(f"unknown beam parameterization '{beam_parameters}'")
    positions = np.asarray(positions, dtype=np.float64)
    theta = {p.point_ref: p.theta for p in classified.flat}
    v = {p.point_ref: p.v for p in classified.flat}

    ring_keys = sorted(
        (k for k in classified.groups if k.startswith("ring:")), key=_key_id
    )
    beam_keys = sorted(
        (k for k in classified.groups if k.startswith("beam:")), key=_key_id
    )
    undersized = [k for k in ring_keys if len(classified.groups[k]) < 4]
    undersized += [k for k in beam_keys if len(classified.groups[k]) < 2]
    if undersized:
        raise SkeletonError(
            f"groups too small to fit: {', '.join(undersized)}", undersized
        )

    rings = []
    ring_members = {}
    for key in ring_keys:
        refs = _canonical_ring_order(classified.groups[key], theta)
        ring_members[key] = refs
        rings.append(fit_periodic_spline(positions[refs]))
    by_key = dict(zip(ring_keys, rings))

    beams = []
    junctions = []
    for key in beam_keys:
        refs = sorted(classified.groups[key], key=lambda r: (v[r], r))
        pts = positions[refs]
        preliminary = fit_natural_spline(pts)
        ends = []
        for end, ref in (("start", refs[0]), ("end", refs[-1])):
            ring_key = None
            shared = None
            if classified.junction_flags[ref]:
                owners = [a for a in classified.assignments[ref] if a.startswith("ring:")]
                if owners and owners[0] in by_key:
                    ring_key = owners[0]
                    shared = positions[ref]
            if ring_key is None:
                endpoint = pts[0] if end == "start" else pts[-1]
                best = None
                for rk in ring_keys:
                    t, at, dist = nearest_ring_parameter(by_key[rk], endpoint)
                    if best is None or dist < best[3]:
                        best = (rk, t, at, dist)
                if best is None:
                    raise SkeletonError(f"no rings available to attach {key}")
                ring_key = best[0]
            record = attach_beam_to_ring(
                preliminary,
                by_key[ring_key],
                end,
                beam_key=key,
                ring_key=ring_key,
                shared_point=shared,
                dangling_threshold=dangling_threshold,
            )
            ends.append(record)
        start_rec, end_rec = ends
        refit_pts = pts
        if np.linalg.norm(refit_pts[0] - start_rec.point) > 1e-9:
            refit_pts = np.vstack([start_rec.point, refit_pts])
        if np.linalg.norm(refit_pts[-1] - end_rec.point) > 1e-9:
            refit_pts = np.vstack([refit_pts, end_rec.point])
        params = refit_pts[:, 2] if beam_parameters == "z" else None
        beams.append(fit_natural_spline(refit_pts, parameters=params))
        junctions.extend(ends)

    axis = None if lumen_axis is None else np.asarray(lumen_axis, dtype=np.float64)
    return StentSkeleton(
        ring_keys=tuple(ring_keys),
        rings=tuple(rings),
        beam_keys=tuple(beam_keys),
        beams=tuple(beams),
        junctions=tuple(junctions),
        lumen_axis=axis,
    )


def skeleton_to_dict(skeleton: StentSkeleton) -> dict:
    def curve_payload(curve: SplineCurve) -> dict:
        return {
            "kind": curve.kind,
            "knots": curve.knots.tolist(),
            "points": curve.points.tolist(),
        }

    return {
        "version": 1,
        "rings": [
            {"id": key, **curve_payload(c)}
            for key, c in zip(skeleton.ring_keys, skeleton.rings)
        ],
        "beams": [
            {"id": key, **curve_payload(c)}
            for key, c in zip(skeleton.beam_keys, skeleton.beams)
        ],
        "junctions": [
            {
                "beam": j.beam_key,
                "end": j.end,
                "ring": j.ring_key,
                "t": j.ring_t,
                "point": j.point.tolist(),
                "distance": j.distance,
                "dangling": j.dangling,
            }
            for j in skeleton.junctions
        ],
        "lumen_axis": None if skeleton.lumen_axis is None else skeleton.lumen_axis.tolist(),
    }


def save_skeleton(path, skeleton: StentSkeleton) -> dict:
    payload = skeleton_to_dict(skeleton)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return payload


def load_skeleton(path) -> StentSkeleton:
    """Rebuild curves from stored knots and points.

    Fitting from the stored data reproduces the original moments: the knot
    vector fully determines the tridiagonal system.
    """
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != 1:
        raise SkeletonError("unsupported skeleton file version")
    ring_keys, rings = [], []
    for entry in payload["rings"]:
        ring_keys.append(entry["id"])
        pts = np.asarray(entry["points"], dtype=np.float64)
        rings.append(fit_periodic_spline(pts[:-1]))  # stored with the wrap copy
    beam_keys, beams = [], []
    for entry in payload["beams"]:
        beam_keys.append(entry["id"])
        beams.append(
            fit_natural_spline(
                np.asarray(entry["points"], dtype=np.float64),
                parameters=np.asarray(entry["knots"], dtype=np.float64),
            )
        )
    junctions = tuple(
        JunctionRecord(
            beam_key=e["beam"],
            end=e["end"],
            ring_key=e["ring"],
            ring_t=float(e["t"]),
            point=np.asarray(e["point"], dtype=np.float64),
            distance=float(e["distance"]),
            dangling=bool(e["dangling"]),
        )
        for e in payload["junctions"]
    )
    axis = payload.get("lumen_axis")
    return StentSkeleton(
        ring_keys=tuple(ring_keys),
        rings=tuple(rings),
        beam_keys=tuple(beam_keys),
        beams=tuple(beams),
        junctions=junctions,
        lumen_axis=None if axis is None else np.asarray(axis, dtype=np.float64),
    )
