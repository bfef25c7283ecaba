"""Strut cloud flattening and annotation-driven classification.

Detected centroids become 3D points (frame plane spans x-y, pullback along z),
get unrolled onto the (r·theta, z) plane, and are grouped into rings, beams,
and junctions by proximity to operator-drawn polylines. The flattened plane is
where a human can actually see the stent pattern, so it is also the exchange
format with the annotation UI.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


class TopologyError(ValueError):
    """Raised for invalid manifests, clouds, or annotation lines."""


@dataclass(frozen=True)
class StrutPoint3D:
    position: tuple[float, float, float]
    frame_index: int
    source_id: int


@dataclass(frozen=True)
class FlattenedPoint:
    """One cloud point unrolled to the annotation plane.

    u = radius * theta, v = z. radius and theta are kept so ring
    classification can reason across the +-pi seam; degenerate marks points
    on the axis where theta defaults to 0.
    """

    u: float
    v: float
    point_ref: int
    radius: float
    theta: float
    degenerate: bool = False


@dataclass(frozen=True)
class AnnotationLine:
    kind: str
    polyline: np.ndarray
    line_id: int

    def __post_init__(self):
        if self.kind not in ("ring", "beam"):
            raise TopologyError(f"unknown line kind '{self.kind}'")
        poly = np.asarray(self.polyline, dtype=np.float64)
        if poly.ndim != 2 or poly.shape[1] != 2 or poly.shape[0] < 2:
            raise TopologyError("polyline needs at least 2 (u, v) vertices")
        if self.kind == "ring" and np.any(np.diff(poly[:, 0]) <= 0.0):
            raise TopologyError(f"ring {self.line_id} vertices must increase in u")
        object.__setattr__(self, "polyline", poly)

    @property
    def key(self) -> str:
        return f"{self.kind}:{self.line_id}"


@dataclass(frozen=True)
class ClassifiedCloud:
    """Per-point line assignments plus per-line ordered membership.

    assignments and junction_flags are indexed by point_ref (cloud order);
    groups map line keys ("ring:3", "beam:7") to point_refs ordered by theta
    for rings and by v for beams.
    """

    flat: tuple[FlattenedPoint, ...]
    assignments: tuple[frozenset[str], ...]
    junction_flags: tuple[bool, ...]
    groups: dict[str, tuple[int, ...]]
    unassigned: tuple[int, ...]


def lift_to_3d(results, manifest: dict, image_shape) -> list[StrutPoint3D]:
    """Accepted and manual centroids in mm, origin on the image center."""
    if "resolution" not in manifest:
        raise TopologyError("stack manifest missing 'resolution'")
    if "spacing" not in manifest:
        raise TopologyError("stack manifest missing 'spacing'")
    resolution = float(manifest["resolution"])
    spacing = float(manifest["spacing"])
    h, w = image_shape
    center_r = (h - 1) / 2.0
    center_c = (w - 1) / 2.0
    cloud = []
    for fr in results:
        z = fr.frame_index * spacing
        for c in fr.accepted():
            row, col = c.centroid_px
            cloud.append(
                StrutPoint3D(
                    position=((col - center_c) * resolution, (row - center_r) * resolution, z),
                    frame_index=fr.frame_index,
                    source_id=c.candidate_id,
                )
            )
    return cloud


def flatten(cloud) -> list[FlattenedPoint]:
    """Unroll the cloud about the vertical axis through its center of mass.

    Output is sorted by theta; v keeps the raw z coordinate. Points exactly on
    the axis cannot have an angle and come back flagged degenerate with
    theta = 0.
    """
    if not cloud:
        raise TopologyError("cannot flatten an empty cloud")
    positions = np.array([p.position for p in cloud], dtype=np.float64)
    com = positions.mean(axis=0)
    dx = positions[:, 0] - com[0]
    dy = positions[:, 1] - com[1]
    radius = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    theta[theta >= math.pi] = -math.pi  # atan2 returns +pi for (-r, 0)
    flat = []
    for i in range(len(cloud)):
        degenerate = radius[i] == 0.0
        th = 0.0 if degenerate else float(theta[i])
        flat.append(
            FlattenedPoint(
                u=float(radius[i]) * th,
                v=float(positions[i, 2]),
                point_ref=i,
                radius=float(radius[i]),
                theta=th,
                degenerate=bool(degenerate),
            )
        )
    flat.sort(key=lambda p: (p.theta, p.point_ref))
    return flat


def _point_to_polyline(point: np.ndarray, poly: np.ndarray) -> float:
    a = poly[:-1]
    b = poly[1:]
    ab = b - a
    ap = point[None, :] - a
    denom = (ab * ab).sum(axis=1)
    t = np.clip((ap * ab).sum(axis=1) / np.maximum(denom, 1e-30), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return float(np.sqrt(((point[None, :] - closest) ** 2).sum(axis=1)).min())


def _line_distance(fp: FlattenedPoint, line: AnnotationLine) -> float:
    """Distance in the (u, v) plane; ring lines are compared cyclically.

    A point just past the +-pi seam sits a full circumference away in u from
    a line vertex drawn on the other side, so ring distances also consider
    the point shifted by one circumference (2 pi times its own radius).
    """
    point = np.array([fp.u, fp.v])
    d = _point_to_polyline(point, line.polyline)
    if line.kind == "ring" and fp.radius > 0.0:
        circumference = 2.0 * math.pi * fp.radius
        for shift in (-circumference, circumference):
            d = min(d, _point_to_polyline(point + np.array([shift, 0.0]), line.polyline))
    return d


def classify_points(flat, lines, search_radius: float = 0.3) -> ClassifiedCloud:
    """Assign each point to its nearest ring and beam line within the radius.

    A point within reach of both kinds becomes a junction. Distance ties
    between same-kind lines resolve to the lowest line id. Points no line
    reaches are reported unassigned.
    """
    if search_radius <= 0.0:
        raise TopologyError("search_radius must be positive")
    keys = [ln.key for ln in lines]
    if len(set(keys)) != len(keys):
        raise TopologyError("duplicate annotation line ids within a kind")

    n = len(flat)
    assignments = [frozenset()] * n
    junction_flags = [False] * n
    members: dict[str, list] = {ln.key: [] for ln in lines}
    unassigned = []
    for fp in flat:
        chosen = []
        for kind in ("ring", "beam"):
            best = None
            for line in lines:
                if line.kind != kind:
                    continue
                dist = _line_distance(fp, line)
                if dist > search_radius:
                    continue
                if best is None or dist < best[0] - 1e-12 or (
                    abs(dist - best[0]) <= 1e-12 and line.line_id < best[1]
                ):
                    best = (dist, line.line_id, line.key)
            if best is not None:
                chosen.append(best[2])
        if chosen:
            assignments[fp.point_ref] = frozenset(chosen)
            junction_flags[fp.point_ref] = len(chosen) == 2
            for key in chosen:
                members[key].append(fp)
        else:
            unassigned.append(fp.point_ref)

    groups = {}
    for line in lines:
        group = members[line.key]
        if line.kind == "ring":
            group.sort(key=lambda p: (p.theta, p.point_ref))
        else:
            group.sort(key=lambda p: (p.v, p.point_ref))
        groups[line.key] = tuple(p.point_ref for p in group)
    return ClassifiedCloud(
        flat=tuple(flat),
        assignments=tuple(assignments),
        junction_flags=tuple(junction_flags),
        groups=groups,
        unassigned=tuple(sorted(unassigned)),
    )


def resolve_junction_bleed(
    classified: ClassifiedCloud, lines, tie_mm: float = 0.0
) -> ClassifiedCloud:
    """Strip beam points out of ring groups before the rings are fitted.

    Near a junction the search radius reaches across kinds: beam interior
    points one frame past the node also fall within reach of the ring line.
    A periodic ring spline through such points folds down the beam and back,
    so any dual-assigned point whose beam line is nearer by more than tie_mm
    loses its ring membership. The prune is one-sided on purpose: beams are
    short open chords that tolerate a near-node ring point, and at wide frame
    spacing they cannot spare any member, while noiseless shared nodes lie on
    both centerlines (both distances zero) and keep both memberships.
    """
    if tie_mm < 0.0:
        raise TopologyError("tie_mm must be non-negative")
    by_key = {ln.key: ln for ln in lines}
    assignments = list(classified.assignments)
    junction_flags = list(classified.junction_flags)
    dropped: dict[str, set] = {}
    for fp in classified.flat:
        keys = assignments[fp.point_ref]
        if len(keys) < 2:
            continue
        dists = {key: _line_distance(fp, by_key[key]) for key in keys}
        keep = set(keys)
        for ring_key in [k for k in keys if k.startswith("ring:")]:
            beam_dists = [d for k, d in dists.items() if k.startswith("beam:")]
            if beam_dists and min(beam_dists) < dists[ring_key] - tie_mm:
                keep.discard(ring_key)
                dropped.setdefault(ring_key, set()).add(fp.point_ref)
        assignments[fp.point_ref] = frozenset(keep)
        junction_flags[fp.point_ref] = len({k.split(":")[0] for k in keep}) == 2
    groups = {
        key: tuple(r for r in refs if r not in dropped.get(key, ()))
        for key, refs in classified.groups.items()
    }
    return ClassifiedCloud(
        flat=classified.flat,
        assignments=tuple(assignments),
        junction_flags=tuple(junction_flags),
        groups=groups,
        unassigned=classified.unassigned,
    )


def thin_ring_groups(
    classified: ClassifiedCloud, lines, min_gap_frac: float = 0.25
) -> ClassifiedCloud:
    """Collapse angular pile-ups in ring groups to their best single member.

    A ring centerline is single-valued in theta, so two members at nearly the
    same angle but different heights cannot both lie on it; interpolating
    through such a pair folds the spline into a near-vertical hairpin. Members
    whose angular gap is below min_gap_frac of the group's mean gap (cyclic)
    are clustered, and each cluster keeps only the member nearest its ring
    line. Beam groups are left alone: they are short open chords, ordered by
    height, and tolerate lateral noise.
    """
    if not 0.0 < min_gap_frac < 1.0:
        raise TopologyError("min_gap_frac must be in (0, 1)")
    by_key = {ln.key: ln for ln in lines}
    by_ref = {fp.point_ref: fp for fp in classified.flat}
    assignments = list(classified.assignments)
    junction_flags = list(classified.junction_flags)
    groups = dict(classified.groups)
    for key, refs in classified.groups.items():
        if not key.startswith("ring:") or len(refs) < 3:
            continue
        line = by_key[key]
        threshold = min_gap_frac * 2.0 * math.pi / len(refs)
        theta = [by_ref[r].theta for r in refs]
        # Cluster consecutive members (cyclically) separated by < threshold.
        # Gaps sum to 2 pi and threshold is below the mean gap, so at least
        # one break always exists.
        n = len(refs)
        breaks = [
            (i + 1) % n
            for i in range(n)
            if (theta[(i + 1) % n] - theta[i]) % (2.0 * math.pi) >= threshold
        ]
        if len(breaks) == n:
            continue
        clusters = []
        for k, start in enumerate(breaks):
            stop = breaks[(k + 1) % len(breaks)]
            idx = range(start, stop if stop > start else stop + n)
            clusters.append([i % n for i in idx])
        keep = set()
        for cluster in clusters:
            best = min(
                cluster, key=lambda i: (_line_distance(by_ref[refs[i]], line), refs[i])
            )
            keep.add(refs[best])
        for r in refs:
            if r in keep:
                continue
            assignments[r] = assignments[r] - {key}
            junction_flags[r] = len({k.split(":")[0] for k in assignments[r]}) == 2
        groups[key] = tuple(r for r in refs if r in keep)
    return ClassifiedCloud(
        flat=classified.flat,
        assignments=tuple(assignments),
        junction_flags=tuple(junction_flags),
        groups=groups,
        unassigned=classified.unassigned,
    )


def trim_beam_groups(classified: ClassifiedCloud, lines) -> ClassifiedCloud:
    """Restrict each beam group to the v-span of its line, one point per frame.

    Beam lines run node to node, so members above or below the line's v range
    are slices of the adjoining rings that fell inside the search radius; they
    drag the beam fit sideways into the ring face. Members sharing the same v
    come from one frame, where the physical beam contributes a single slice,
    so only the member nearest the line survives. Junction points rejoin the
    beam later as exact refit endpoints, which is why losing flush-with-node
    members here is safe.
    """
    by_key = {ln.key: ln for ln in lines}
    by_ref = {fp.point_ref: fp for fp in classified.flat}
    assignments = list(classified.assignments)
    junction_flags = list(classified.junction_flags)
    groups = dict(classified.groups)
    for key, refs in classified.groups.items():
        if not key.startswith("beam:") or not refs:
            continue
        line = by_key[key]
        v_lo = float(line.polyline[:, 1].min()) - 1e-9
        v_hi = float(line.polyline[:, 1].max()) + 1e-9
        best_at_v: dict[float, int] = {}
        for r in refs:
            fp = by_ref[r]
            if not v_lo <= fp.v <= v_hi:
                continue
            held = best_at_v.get(fp.v)
            if held is None or (
                _line_distance(fp, line),
                r,
            ) < (_line_distance(by_ref[held], line), held):
                best_at_v[fp.v] = r
        keep = set(best_at_v.values())
        for r in refs:
            if r in keep:
                continue
            assignments[r] = assignments[r] - {key}
            junction_flags[r] = len({k.split(":")[0] for k in assignments[r]}) == 2
        groups[key] = tuple(r for r in refs if r in keep)
    return ClassifiedCloud(
        flat=classified.flat,
        assignments=tuple(assignments),
        junction_flags=tuple(junction_flags),
        groups=groups,
        unassigned=classified.unassigned,
    )


def curate_classified(
    classified: ClassifiedCloud, lines, tie_mm: float = 0.0, min_gap_frac: float = 0.25
) -> ClassifiedCloud:
    """The full cleanup between raw classification and spline fitting.

    Order matters: cross-kind bleed is resolved first so ring thinning judges
    only plausible ring members, then each kind is reduced to a fit-safe
    sequence (rings single-valued in theta, beams single-valued in v).
    """
    classified = resolve_junction_bleed(classified, lines, tie_mm=tie_mm)
    classified = thin_ring_groups(classified, lines, min_gap_frac=min_gap_frac)
    return trim_beam_groups(classified, lines)


@dataclass(frozen=True)
class RingFill:
    """A ring member synthesized where its annotation line crosses a frame."""

    key: str
    frame_index: int
    u: float
    v: float
    theta: float
    radius: float


def fill_ring_gaps(
    classified: ClassifiedCloud, lines, frame_spacing: float, search_radius: float
) -> list[RingFill]:
    """Synthesize ring members where a whole sector of a ring went unseen.

    A drifting catheter shadow can hide every strut of a ring over a
    contiguous angular sector; a spline through the surviving members then
    shortcuts the hidden crowns and the swept solid loses their volume. The
    ring's annotation line still traverses the gap, so wherever the line
    crosses a frame height with no member within search_radius, a member is
    synthesized on the line. Its radius is interpolated cyclically from the
    surviving members, mirroring the radius a real detection there would
    have measured. Dense, fully observed rings produce no fills: every
    crossing already has a member in reach.
    """
    if frame_spacing <= 0.0:
        raise TopologyError("frame_spacing must be positive")
    by_ref = {fp.point_ref: fp for fp in classified.flat}
    fills = []
    for line in lines:
        key = line.key
        refs = classified.groups.get(key, ())
        if line.kind != "ring" or len(refs) < 3:
            continue
        member_theta = np.array([by_ref[r].theta for r in refs])
        member_v = np.array([by_ref[r].v for r in refs])
        member_r = np.array([by_ref[r].radius for r in refs])
        order = np.argsort(member_theta, kind="stable")
        ths, rs = member_theta[order], member_r[order]
        r_mean = float(member_r.mean())

        seg_u = line.polyline[:, 0]
        seg_v = line.polyline[:, 1]
        f_lo = int(math.ceil((seg_v.min() - 1e-9) / frame_spacing))
        f_hi = int(math.floor((seg_v.max() + 1e-9) / frame_spacing))
        for frame in range(f_lo, f_hi + 1):
            v_f = frame * frame_spacing
            crossings = []
            for (u1, v1), (u2, v2) in zip(line.polyline[:-1], line.polyline[1:]):
                d1, d2 = v1 - v_f, v2 - v_f
                if d1 == 0.0 and d2 == 0.0:
                    continue
                if d1 * d2 > 0.0:
                    continue
                t = d1 / (d1 - d2)
                crossings.append(u1 + t * (u2 - u1))
            crossings.sort()
            deduped = []
            for u_star in crossings:
                if not deduped or u_star - deduped[-1] > 1e-9:
                    deduped.append(u_star)
            for u_star in deduped:
                theta = u_star / r_mean
                for _ in range(2):
                    radius = float(np.interp(theta, ths, rs, period=2.0 * math.pi))
                    theta = u_star / radius
                theta = math.atan2(math.sin(theta), math.cos(theta))
                d_theta = (member_theta - theta + math.pi) % (2.0 * math.pi) - math.pi
                gap = np.hypot(radius * d_theta, member_v - v_f).min()
                if gap > search_radius:
                    fills.append(RingFill(key, frame, u_star, v_f, theta, radius))
    return fills


def apply_ring_fills(
    classified: ClassifiedCloud, fills: list[RingFill]
) -> tuple[ClassifiedCloud, dict[str, tuple[int, ...]]]:
    """Append synthesized members to the cloud and their ring groups.

    New points get refs continuing past the real cloud; ring groups are
    re-sorted by theta so downstream cyclic ordering still holds. Returns
    the extended cloud and the new refs per ring key, for the audit trail.
    """
    if not fills:
        return classified, {}
    flat = list(classified.flat)
    assignments = list(classified.assignments)
    junction_flags = list(classified.junction_flags)
    groups = {key: list(refs) for key, refs in classified.groups.items()}
    added: dict[str, list[int]] = {}
    for fill in fills:
        ref = len(flat)
        flat.append(
            FlattenedPoint(
                u=fill.u,
                v=fill.v,
                point_ref=ref,
                radius=fill.radius,
                theta=fill.theta,
            )
        )
        assignments.append(frozenset({fill.key}))
        junction_flags.append(False)
        groups.setdefault(fill.key, []).append(ref)
        added.setdefault(fill.key, []).append(ref)
    by_ref = {fp.point_ref: fp for fp in flat}
    for key in added:
        groups[key].sort(key=lambda r: (by_ref[r].theta, r))
    return (
        ClassifiedCloud(
            flat=tuple(flat),
            assignments=tuple(assignments),
            junction_flags=tuple(junction_flags),
            groups={key: tuple(refs) for key, refs in groups.items()},
            unassigned=classified.unassigned,
        ),
        {key: tuple(refs) for key, refs in added.items()},
    )


def wrap_ring_groups(classified: ClassifiedCloud) -> ClassifiedCloud:
    """Rotate each ring group's cyclic order to start after its largest gap.

    Members stay sorted by theta but the list boundary is placed across the
    widest angular gap, so points straddling the +-pi seam sit next to each
    other instead of at opposite ends.
    """
    by_ref = {fp.point_ref: fp for fp in classified.flat}
    groups = dict(classified.groups)
    for key, refs in classified.groups.items():
        if not key.startswith("ring:") or len(refs) < 2:
            continue
        theta = [by_ref[r].theta for r in refs]
        gaps = [
            (theta[(i + 1) % len(refs)] - theta[i]) % (2.0 * math.pi)
            for i in range(len(refs))
        ]
        start = (int(np.argmax(gaps)) + 1) % len(refs)
        groups[key] = tuple(refs[start:]) + tuple(refs[:start])
    return ClassifiedCloud(
        flat=classified.flat,
        assignments=classified.assignments,
        junction_flags=classified.junction_flags,
        groups=groups,
        unassigned=classified.unassigned,
    )


def lines_from_payload(payload: dict) -> list[AnnotationLine]:
    """Parse {"version": 1, "lines": [...]} into validated AnnotationLines."""
    if payload.get("version") != 1:
        raise TopologyError("unsupported annotation file version")
    lines = []
    for entry in payload.get("lines", []):
        lines.append(
            AnnotationLine(
                kind=entry["kind"],
                polyline=np.asarray(entry["vertices"], dtype=np.float64),
                line_id=int(entry["id"]),
            )
        )
    return lines


def load_annotations(path) -> list[AnnotationLine]:
    """Read the annotation exchange file ({"version": 1, "lines": [...]})."""
    with open(path) as fh:
        payload = json.load(fh)
    return lines_from_payload(payload)


def lift_manifest(resolution: float, spacing: float) -> dict:
    """The two geometry keys lift_to_3d reads, as a stack-manifest-shaped dict."""
    return {"resolution": resolution, "spacing": spacing}


def save_annotations(path, lines) -> dict:
    payload = {
        "version": 1,
        "lines": [
            {"kind": ln.kind, "id": ln.line_id, "vertices": ln.polyline.tolist()}
            for ln in lines
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return payload


def flattened_to_dict(cloud, flat) -> dict:
    """JSON form of the lifted cloud and its flattening, for the annotator."""
    return {
        "version": 1,
        "points": [
            {
                "position": list(p.position),
                "frame": p.frame_index,
                "source_id": p.source_id,
            }
            for p in cloud
        ],
        "flattened": [
            {
                "u": fp.u,
                "v": fp.v,
                "point_ref": fp.point_ref,
                "radius": fp.radius,
                "theta": fp.theta,
                "degenerate": fp.degenerate,
            }
            for fp in flat
        ],
    }


def load_flattened(path) -> tuple[list[StrutPoint3D], list[FlattenedPoint]]:
    with open(path) as fh:
        payload = json.load(fh)
    cloud = [
        StrutPoint3D(tuple(p["position"]), p["frame"], p["source_id"])
        for p in payload["points"]
    ]
    flat = [
        FlattenedPoint(
            u=fp["u"],
            v=fp["v"],
            point_ref=fp["point_ref"],
            radius=fp["radius"],
            theta=fp["theta"],
            degenerate=fp["degenerate"],
        )
        for fp in payload["flattened"]
    ]
    return cloud, flat


def save_flattened(path, cloud, flat) -> dict:
    payload = flattened_to_dict(cloud, flat)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return payload
