"""Synthetic deformed stent with exact ground truth.

Builds a parametric ring-and-beam stent, deforms it (twist about the axis,
then bend onto a circular arc), slices the solid perpendicular to its
centerline into binary frames, and optionally masks a drifting
catheter-shadow sector.  Frames mimic OCT geometry: strut cross-sections
appear as closed bright outlines with dark cores inside a bright vessel-wall
annulus.  Every frame carries the true section centers and component labels,
so detection and reconstruction can be scored exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .metrics import mesh_volume
from .raster import BinaryImage
from .splines import SplineCurve, fit_natural_spline, fit_periodic_spline
from .surface import StentAssembler, StentMesh, straight_z_axis
from .wirepath import Landmark, WirePath, place_frames


class PhantomDesignError(ValueError):
    """Raised for specs that cannot produce a valid solid."""


AXIS_MARGIN_MM = 0.05
"""Centerline overhang past the solid, so no slicing plane sits exactly on
the mesh extremes (planes there graze dozens of vertices at once)."""


@dataclass(frozen=True)
class StentDesignSpec:
    """Parametric surrogate for a ring-and-beam stent scaffold.

    Rings are sinusoidal hoops in antiphase; straight beams connect each
    ring's peaks to the next ring's troughs at a staggered subset of angles.
    """

    n_rings: int = 8
    ring_pitch: float = 1.05
    radius: float = 1.5
    sinusoid_peaks: int = 8
    sinusoid_amplitude: float = 0.3
    beams_per_pair: int = 3
    ring_dims: tuple[float, float] = (0.15, 0.15)
    beam_dims: tuple[float, float] = (0.20, 0.15)

    def __post_init__(self):
        if self.n_rings < 2:
            raise PhantomDesignError("need at least two rings")
        if self.ring_pitch <= 0 or self.radius <= 0 or self.sinusoid_amplitude <= 0:
            raise PhantomDesignError("lengths must be positive")
        if min(self.ring_dims) <= 0 or min(self.beam_dims) <= 0:
            raise PhantomDesignError("strut dimensions must be positive")
        if self.sinusoid_peaks < 1:
            raise PhantomDesignError("need at least one sinusoid peak")
        if not 1 <= self.beams_per_pair <= self.sinusoid_peaks:
            raise PhantomDesignError("beams_per_pair must be between 1 and the peak count")
        gap = self.ring_pitch - 2.0 * self.sinusoid_amplitude
        if gap <= self.ring_dims[0]:
            raise PhantomDesignError(
                f"adjacent rings intersect: peak-to-trough gap {gap:.3f} mm does not "
                f"clear the ring width {self.ring_dims[0]:.3f} mm"
            )
        wavelength = 2.0 * math.pi * self.radius / self.sinusoid_peaks
        if wavelength <= 2.0 * max(self.beam_dims[0], self.ring_dims[0]):
            raise PhantomDesignError("sinusoid peaks too dense for the strut widths")


@dataclass(frozen=True)
class RingTruth:
    ring_id: int
    curve: SplineCurve
    fit_points: np.ndarray
    phase: float
    z_center: float


@dataclass(frozen=True)
class BeamTruth:
    beam_id: int
    curve: SplineCurve
    fit_points: np.ndarray
    start_ring: int
    end_ring: int
    node_index: int


@dataclass(frozen=True)
class TruthLine:
    kind: str
    line_id: int
    vertices: np.ndarray


@dataclass(frozen=True)
class PhantomDesign:
    spec: StentDesignSpec
    rings: tuple[RingTruth, ...]
    beams: tuple[BeamTruth, ...]
    solid: StentMesh
    exact_volume: float
    centerline: WirePath
    flat_ring_points: tuple[np.ndarray, ...]
    flat_beam_points: tuple[np.ndarray, ...]
    axis_z_start: float = 0.0
    twist_applied: float = 0.0
    bend_applied: float = 0.0


@dataclass(frozen=True)
class TruthEntry:
    frame_index: int
    center_mm: tuple[float, float]
    center_px: tuple[float, float]
    labels: tuple[str, ...]
    area_px: float
    occluded: bool = False


@dataclass(frozen=True)
class PhantomStack:
    frames: tuple[BinaryImage, ...]
    spacing: float
    resolution: float
    centerline: WirePath
    truth: tuple[TruthEntry, ...]
    solid: StentMesh
    exact_volume: float
    wire_tips: tuple[tuple[int, int], ...]
    shadow: tuple[float, float, float] | None = None


def _node_indices(spec: StentDesignSpec, pair: int) -> list[int]:
    """Fit-grid indices of the connector nodes between rings pair and pair+1.

    Ring `pair` peaks toward the next ring exactly where that ring troughs
    back; with the 16-per-peak fit grid those angles land on grid knots, so
    beam endpoints coincide with ring fit points and junction parameters are
    exact spline knots.
    """
    k = spec.sinusoid_peaks
    m_grid = 16 * k
    base = 4 - 8 * (pair % 2)
    chosen = [(pair + (t * k) // spec.beams_per_pair) % k for t in range(spec.beams_per_pair)]
    return [(base + 16 * m) % m_grid for m in sorted(chosen)]


def generate_design(spec: StentDesignSpec, sections_per_curve: int = 2000) -> PhantomDesign:
    """Analytic skeleton plus the swept, welded solid for an undeformed stent."""
    k = spec.sinusoid_peaks
    m_grid = 16 * k
    theta = 2.0 * np.pi * np.arange(m_grid) / m_grid
    assembler = StentAssembler(
        straight_z_axis,
        ring_dims=spec.ring_dims,
        beam_dims=spec.beam_dims,
        sections_per_curve=sections_per_curve,
    )

    rings = []
    for i in range(spec.n_rings):
        phase = math.pi * i
        z = i * spec.ring_pitch + spec.sinusoid_amplitude * np.sin(k * theta + phase)
        pts = np.column_stack(
            [spec.radius * np.cos(theta), spec.radius * np.sin(theta), z]
        )
        curve = fit_periodic_spline(pts)
        assembler.add_ring(i, curve)
        rings.append(RingTruth(i, curve, pts, phase, i * spec.ring_pitch))

    beams = []
    beam_id = 0
    for pair in range(spec.n_rings - 1):
        for node in _node_indices(spec, pair):
            start = rings[pair].fit_points[node]
            end = rings[pair + 1].fit_points[node]
            fracs = np.linspace(0.0, 1.0, 9)[:, None]
            pts = start + fracs * (end - start)
            curve = fit_natural_spline(pts)
            assembler.add_beam(
                beam_id,
                curve,
                (pair, float(rings[pair].curve.knots[node])),
                (pair + 1, float(rings[pair + 1].curve.knots[node])),
            )
            beams.append(BeamTruth(beam_id, curve, pts, pair, pair + 1, node))
            beam_id += 1

    solid = assembler.finalize()
    z_lo = float(solid.vertices[:, 2].min()) - AXIS_MARGIN_MM
    z_hi = float(solid.vertices[:, 2].max()) + AXIS_MARGIN_MM
    axis = np.zeros((257, 3))
    axis[:, 2] = np.linspace(z_lo, z_hi, 257)
    return PhantomDesign(
        spec=spec,
        rings=tuple(rings),
        beams=tuple(beams),
        solid=solid,
        exact_volume=mesh_volume(solid),
        centerline=WirePath(axis),
        flat_ring_points=tuple(r.fit_points.copy() for r in rings),
        flat_beam_points=tuple(b.fit_points.copy() for b in beams),
        axis_z_start=z_lo,
    )


def _refit(design: PhantomDesign, mapper, centerline: WirePath, **changes) -> PhantomDesign:
    rings = []
    for ring in design.rings:
        pts = mapper(ring.fit_points)
        rings.append(replace(ring, curve=fit_periodic_spline(pts), fit_points=pts))
    beams = []
    for beam in design.beams:
        pts = mapper(beam.fit_points)
        beams.append(replace(beam, curve=fit_natural_spline(pts), fit_points=pts))
    solid = StentMesh(mapper(design.solid.vertices), design.solid.triangles, design.solid.tags)
    return replace(
        design,
        rings=tuple(rings),
        beams=tuple(beams),
        solid=solid,
        exact_volume=mesh_volume(solid),
        centerline=centerline,
        **changes,
    )


def twist(design: PhantomDesign, angle_deg: float) -> PhantomDesign:
    """Rotate cross-sections about the axis in proportion to their height."""
    if angle_deg == 0.0:
        return design
    if design.bend_applied != 0.0:
        raise PhantomDesignError("twist requires a straight, axis-aligned geometry")
    z = design.solid.vertices[:, 2]
    z_lo, z_hi = float(z.min()), float(z.max())
    total = math.radians(angle_deg)

    def mapper(pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        r = np.hypot(pts[:, 0], pts[:, 1])
        ang = np.arctan2(pts[:, 1], pts[:, 0])
        ang = ang + total * (pts[:, 2] - z_lo) / (z_hi - z_lo)
        return np.column_stack([r * np.cos(ang), r * np.sin(ang), pts[:, 2]])

    out = _refit(design, mapper, design.centerline, twist_applied=design.twist_applied + angle_deg)
    return replace(
        out,
        flat_ring_points=tuple(mapper(p) for p in design.flat_ring_points),
        flat_beam_points=tuple(mapper(p) for p in design.flat_beam_points),
    )


def bend(design: PhantomDesign, arc_deg: float) -> PhantomDesign:
    """Wrap the axis onto a circular arc, keeping sections perpendicular.

    The axis keeps its arclength and arcs within the y-z plane, so the x
    direction stays perpendicular to every tangent.  A rotation-minimizing
    frame seeded on x then carries the design (x, y) axes into each slicing
    plane with zero roll, which keeps flattened coordinates directly
    comparable to the pre-bend geometry.  Volume is preserved exactly: the
    Jacobian 1 - y/R integrates to 1 over the y-symmetric cross-sections.
    """
    if arc_deg == 0.0:
        return design
    if design.bend_applied != 0.0:
        raise PhantomDesignError("axis is already bent")
    axis_z = design.centerline.samples[:, 2]
    z_lo, z_hi = float(axis_z[0]), float(axis_z[-1])
    length = z_hi - z_lo
    phi_total = math.radians(arc_deg)
    r_bend = length / phi_total

    def mapper(pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        phi = (pts[:, 2] - z_lo) / r_bend
        cy = r_bend * (1.0 - np.cos(phi))
        cz = z_lo + r_bend * np.sin(phi)
        return np.column_stack(
            [
                pts[:, 0],
                cy + pts[:, 1] * np.cos(phi),
                cz - pts[:, 1] * np.sin(phi),
            ]
        )

    s = np.linspace(0.0, length, 2049)
    phi = s / r_bend
    axis = np.column_stack(
        [np.zeros_like(phi), r_bend * (1.0 - np.cos(phi)), z_lo + r_bend * np.sin(phi)]
    )
    return _refit(design, mapper, WirePath(axis), bend_applied=arc_deg)


def truth_lines(design: PhantomDesign, origin=(0.0, 0.0)) -> list[TruthLine]:
    """Ring and beam annotation polylines in flattened (r*theta, v) coordinates.

    Uses the pre-bend (twisted) geometry: slicing perpendicular to the bent
    centerline recovers exactly that cloud, so these lines overlay the
    flattened detections without further correction.  The v coordinate is
    arclength from the centerline start, matching per-frame z offsets.

    origin is the in-plane point angles and radii are measured from. The
    default is the design axis; pass the center of mass of the points a
    stack actually shows when the lines must overlay a flattened cloud
    whose own origin is displaced by occlusion.
    """
    ox, oy = float(origin[0]), float(origin[1])
    lines = []
    for ring, pts in zip(design.rings, design.flat_ring_points):
        ang = np.arctan2(pts[:, 1] - oy, pts[:, 0] - ox)
        order = np.argsort(ang, kind="stable")
        u = np.hypot(pts[order, 0] - ox, pts[order, 1] - oy) * ang[order]
        v = pts[order, 2] - design.axis_z_start
        lines.append(TruthLine("ring", ring.ring_id, np.column_stack([u, v])))
    for beam, pts in zip(design.beams, design.flat_beam_points):
        order = np.argsort(pts[:, 2], kind="stable")
        p = pts[order]
        # A beam near the +-pi seam wraps in raw atan2 output; unwrap to a
        # contiguous branch and recenter it on the principal range.
        # Classification measures u cyclically (points shifted by +-2*pi*r),
        # so a line nudged just past the seam still matches its points.
        ang = np.unwrap(np.arctan2(p[:, 1] - oy, p[:, 0] - ox))
        mean = float(ang.mean())
        ang += math.atan2(math.sin(mean), math.cos(mean)) - mean
        u = np.hypot(p[:, 0] - ox, p[:, 1] - oy) * ang
        v = p[:, 2] - design.axis_z_start
        lines.append(TruthLine("beam", beam.beam_id, np.column_stack([u, v])))
    return lines


def _loop_area_centroid(poly: np.ndarray) -> tuple[float, np.ndarray]:
    x, y = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x, -1), np.roll(y, -1)
    cross = x * y1 - x1 * y
    area = 0.5 * cross.sum()
    if abs(area) < 1e-18:
        return 0.0, poly.mean(axis=0)
    cx = ((x + x1) * cross).sum() / (6.0 * area)
    cy = ((y + y1) * cross).sum() / (6.0 * area)
    return float(area), np.array([cx, cy])


def _point_in_loop(point: np.ndarray, poly: np.ndarray) -> bool:
    x, y = point
    px, py = poly[:, 0], poly[:, 1]
    qx, qy = np.roll(px, -1), np.roll(py, -1)
    straddle = (py > y) != (qy > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_int = px + (y - py) / (qy - py) * (qx - px)
    return bool((straddle & (x_int > x)).sum() % 2)


def _slice_solid(solid: StentMesh, origin, axes, normal):
    """Closed section loops of the solid in plane coordinates, with tags.

    Segment endpoints are keyed by the mesh edge they lie on, so loops chain
    exactly: each crossing edge is shared by exactly two crossing triangles.
    Returns a list of (polygon, tag set) per loop, or None when a vertex sits
    on the plane and the caller should renudge.
    """
    verts = solid.vertices
    d = (verts - origin) @ normal
    if np.any(np.abs(d) < 1e-12):
        return None
    tri = solid.triangles
    sides = d[tri] > 0.0
    crossing = np.nonzero(sides.any(axis=1) & ~sides.all(axis=1))[0]
    if len(crossing) == 0:
        return []

    point_on_edge = {}

    def edge_point(a: int, b: int) -> tuple[int, int]:
        key = (a, b) if a < b else (b, a)
        if key not in point_on_edge:
            i, j = key
            f = d[i] / (d[i] - d[j])
            point_on_edge[key] = verts[i] + f * (verts[j] - verts[i])
        return key

    segments = []
    for t in crossing:
        ids = tri[t]
        keys = []
        for e in range(3):
            a, b = int(ids[e]), int(ids[(e + 1) % 3])
            if (d[a] > 0.0) != (d[b] > 0.0):
                keys.append(edge_point(a, b))
        segments.append((keys[0], keys[1], solid.tags[t]))

    by_key: dict[tuple[int, int], list[int]] = {}
    for s, (ka, kb, _) in enumerate(segments):
        by_key.setdefault(ka, []).append(s)
        by_key.setdefault(kb, []).append(s)

    e_a, e_b = axes
    visited = [False] * len(segments)
    loops = []
    for start in range(len(segments)):
        if visited[start]:
            continue
        keys = [segments[start][0], segments[start][1]]
        tags = {segments[start][2]}
        visited[start] = True
        while keys[-1] != keys[0]:
            nxt = [s for s in by_key[keys[-1]] if not visited[s]]
            if not nxt:
                raise PhantomDesignError("section loop failed to close; solid not watertight")
            ka, kb, tag = segments[nxt[0]]
            keys.append(kb if ka == keys[-1] else ka)
            visited[nxt[0]] = True
            tags.add(tag)
        pts3 = np.array([point_on_edge[k] for k in keys[:-1]])
        rel = pts3 - origin
        loops.append((np.column_stack([rel @ e_a, rel @ e_b]), tags))
    return loops


def _expand_tag(tag: str) -> tuple[str, ...]:
    """Map a mesh triangle tag to component labels (weld tris belong to both)."""
    if tag.startswith("joint:"):
        _, ring_id, beam_id = tag.split(":")
        return (f"ring:{ring_id}", f"beam:{beam_id}")
    return (tag,)


def _group_loops(loops):
    """Bundle loops into blobs: one outer boundary plus any nested holes."""
    polys = [p for p, _ in loops]
    n = len(polys)
    depth = [0] * n
    container = [[] for _ in range(n)]
    for i in range(n):
        probe = polys[i][0]
        for j in range(n):
            if i != j and _point_in_loop(probe, polys[j]):
                depth[i] += 1
                container[i].append(j)
    blobs = []
    owner = {}
    for i in range(n):
        if depth[i] % 2 == 0:
            owner[i] = len(blobs)
            blobs.append([i])
    for i in range(n):
        if depth[i] % 2 == 1:
            parents = [j for j in container[i] if depth[j] == depth[i] - 1]
            inner = min(parents, key=lambda j: abs(_loop_area_centroid(polys[j])[0]))
            blobs[owner[inner]].append(i)
    return blobs


def _stamp_segment(mask: np.ndarray, r0: float, c0: float, r1: float, c1: float) -> None:
    """Mark every pixel cell the segment passes through (4-connected walk)."""
    h, w = mask.shape

    def put(i: int, j: int) -> None:
        if 0 <= i < h and 0 <= j < w:
            mask[i, j] = True

    i, j = int(round(r0)), int(round(c0))
    i_end, j_end = int(round(r1)), int(round(c1))
    put(i, j)
    dr, dc = r1 - r0, c1 - c0
    step_i = 1 if dr > 0 else -1
    step_j = 1 if dc > 0 else -1
    t_max_r = ((i + 0.5 * step_i) - r0) / dr if dr != 0 else math.inf
    t_del_r = abs(1.0 / dr) if dr != 0 else math.inf
    t_max_c = ((j + 0.5 * step_j) - c0) / dc if dc != 0 else math.inf
    t_del_c = abs(1.0 / dc) if dc != 0 else math.inf
    guard = 4 * (abs(i_end - i) + abs(j_end - j) + 2)
    while (i != i_end or j != j_end) and guard > 0:
        if t_max_r < t_max_c:
            i += step_i
            t_max_r += t_del_r
        else:
            j += step_j
            t_max_c += t_del_c
        put(i, j)
        guard -= 1


def slice_stack(
    solid: StentMesh,
    centerline: WirePath,
    spacing: float,
    resolution: float = 0.01,
    image_size: int = 512,
    wall_inner_mm: float = 1.65,
    wall_outer_mm: float = 2.10,
) -> PhantomStack:
    """Binary frames perpendicular to the centerline, with exact truth.

    Frames sit at every arclength multiple of `spacing`.  Each section
    polygon is drawn as a closed 1 px outline (bright rim, dark core, the way
    a metal strut reflects in an OCT frame) inside a bright vessel-wall
    annulus centered on the catheter.  One truth entry is recorded per
    section blob whose interior could plausibly be detected: area minus
    perimeter at least 50 px, mirroring the detector's minimum region area.
    """
    if spacing <= 0.0:
        raise PhantomDesignError("spacing must be positive")
    if not 0.0 < wall_inner_mm < wall_outer_mm:
        raise PhantomDesignError("wall radii must satisfy 0 < inner < outer")
    center = (image_size - 1) / 2.0
    if wall_outer_mm >= center * resolution:
        raise PhantomDesignError("vessel wall does not fit in the image")
    n_frames = int(math.floor(centerline.length / spacing + 1e-9)) + 1
    transforms = place_frames(centerline, Landmark(0, 0.0), spacing, range(n_frames))
    min_interior_px = 50.0

    rows_px, cols_px = np.mgrid[0:image_size, 0:image_size]
    radius_px = np.hypot(rows_px - center, cols_px - center)
    wall = (radius_px >= wall_inner_mm / resolution) & (radius_px <= wall_outer_mm / resolution)

    frames = []
    truth = []
    for tr in transforms:
        normal = tr.rotation[:, 2]
        axes = (tr.rotation[:, 0], tr.rotation[:, 1])
        loops = None
        for attempt in range(8):
            loops = _slice_solid(solid, tr.translation + attempt * 1e-7 * normal, axes, normal)
            if loops is not None:
                break
        if loops is None:
            raise PhantomDesignError(
                f"frame {tr.frame_index}: slicing plane kept grazing mesh vertices"
            )

        mask = wall.copy()
        for poly, _ in loops:
            rows = center + poly[:, 1] / resolution
            cols = center + poly[:, 0] / resolution
            m = len(poly)
            for v in range(m):
                _stamp_segment(mask, rows[v], cols[v], rows[(v + 1) % m], cols[(v + 1) % m])
        frames.append(BinaryImage(mask))

        for members in _group_loops(loops):
            area = 0.0
            weighted = np.zeros(2)
            perimeter = 0.0
            labels: set[str] = set()
            for rank, li in enumerate(members):
                poly, tags = loops[li]
                a, c = _loop_area_centroid(poly)
                signed = abs(a) if rank == 0 else -abs(a)
                area += signed
                weighted += signed * c
                perimeter += float(
                    np.linalg.norm(np.diff(poly, axis=0, append=poly[:1]), axis=1).sum()
                )
                for tag in tags:
                    labels.update(_expand_tag(tag))
            if area <= 0.0:
                continue
            centroid = weighted / area
            interior_px = (area - perimeter * resolution) / resolution**2
            if interior_px < min_interior_px:
                continue
            truth.append(
                TruthEntry(
                    frame_index=tr.frame_index,
                    center_mm=(float(centroid[0]), float(centroid[1])),
                    center_px=(
                        float(center + centroid[1] / resolution),
                        float(center + centroid[0] / resolution),
                    ),
                    labels=tuple(sorted(labels)),
                    area_px=float(area / resolution**2),
                )
            )

    tip = (int(round(center)), int(round(center)))
    return PhantomStack(
        frames=tuple(frames),
        spacing=spacing,
        resolution=resolution,
        centerline=centerline,
        truth=tuple(truth),
        solid=solid,
        exact_volume=mesh_volume(solid),
        wire_tips=((tip,) * n_frames),
    )


def _wrap_degrees(delta):
    return (delta + 180.0) % 360.0 - 180.0


def add_shadow(
    stack: PhantomStack,
    sector_width: float = 30.0,
    drift_per_frame: float = 1.0,
    start_angle: float = 106.0,
) -> PhantomStack:
    """Mask a drifting angular sector and flag the truth entries inside it."""
    if sector_width < 0.0:
        raise PhantomDesignError("sector width must be nonnegative")
    if sector_width == 0.0:
        return stack
    size = stack.frames[0].mask.shape[0]
    center = (size - 1) / 2.0
    rows, cols = np.mgrid[0:size, 0:size]
    pixel_angle = np.degrees(np.arctan2(rows - center, cols - center))

    frames = []
    for f, frame in enumerate(stack.frames):
        sector_center = start_angle + drift_per_frame * f
        inside = np.abs(_wrap_degrees(pixel_angle - sector_center)) <= sector_width / 2.0
        frames.append(BinaryImage(frame.mask & ~inside))

    truth = []
    for entry in stack.truth:
        sector_center = start_angle + drift_per_frame * entry.frame_index
        ang = math.degrees(math.atan2(entry.center_mm[1], entry.center_mm[0]))
        inside = abs(_wrap_degrees(ang - sector_center)) <= sector_width / 2.0
        truth.append(replace(entry, occluded=bool(inside)))

    return replace(
        stack,
        frames=tuple(frames),
        truth=tuple(truth),
        shadow=(sector_width, drift_per_frame, start_angle),
    )


def beam_shadow_census(stack: PhantomStack) -> tuple[list[str], list[str]]:
    """(beams whose every truth appearance is occluded, all beams seen in truth).

    A beam counts as hidden only when the shadow covers it in every frame it
    appears in; a beam clipped in some frames but clear in others can still
    be annotated.
    """
    occluded_counts: dict[str, int] = {}
    total_counts: dict[str, int] = {}
    for entry in stack.truth:
        for label in entry.labels:
            if label.startswith("beam:"):
                total_counts[label] = total_counts.get(label, 0) + 1
                if entry.occluded:
                    occluded_counts[label] = occluded_counts.get(label, 0) + 1
    seen = sorted(total_counts)
    hidden = sorted(
        label for label, n in total_counts.items() if occluded_counts.get(label, 0) == n
    )
    return hidden, seen


def export_stack(stack: PhantomStack, directory) -> dict:
    """Write frame PNGs plus the manifest detection consumes; returns the manifest."""
    from PIL import Image

    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    frame_files = []
    for i, frame in enumerate(stack.frames):
        name = f"frames/frame_{i:04d}.png"
        img = frame.mask.astype(np.uint8) * 255
        Image.fromarray(img, mode="L").save(directory / name)
        frame_files.append(name)
    manifest = {
        "resolution": stack.resolution,
        "spacing": stack.spacing,
        "frames": frame_files,
        "wire_tips": [list(t) for t in stack.wire_tips],
        "crop": None,
    }
    with open(directory / "stack.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def export_annotations(
    stack: PhantomStack,
    design: PhantomDesign,
    path,
    min_visible: int = 2,
    shadow_margin_deg: float = 6.0,
) -> dict:
    """Write the annotation file an operator would produce from this stack.

    All ring lines are kept (rings are always partially visible); beam lines
    are kept only when at least `min_visible` of the beam's truth entries
    escaped the shadow, since nobody can trace an invisible beam.  A strut
    whose center clears the sector edge by less than `shadow_margin_deg`
    does not count toward that quota: the shadow clips part of its blob, so
    the operator sees a smeared fragment rather than a clean dot.

    The lines are flattened about the center of mass of the visible strut
    centers, not the design axis: the operator draws on the flattened view
    of the detected cloud, and occluded struts never enter that cloud, so
    its origin sits wherever the visible points put it.
    """
    if stack.shadow is not None:
        sector_width, drift_per_frame, start_angle = stack.shadow
    visible: dict[str, int] = {}
    centers = []
    for entry in stack.truth:
        if not entry.occluded:
            centers.append(entry.center_mm)
            clear = True
            if stack.shadow is not None:
                sector_center = start_angle + drift_per_frame * entry.frame_index
                ang = math.degrees(math.atan2(entry.center_mm[1], entry.center_mm[0]))
                edge = abs(_wrap_degrees(ang - sector_center)) - sector_width / 2.0
                clear = edge >= shadow_margin_deg
            if clear:
                for label in entry.labels:
                    visible[label] = visible.get(label, 0) + 1
    origin = np.mean(centers, axis=0) if centers else (0.0, 0.0)
    lines = []
    for ln in truth_lines(design, origin=origin):
        if ln.kind == "beam" and visible.get(f"beam:{ln.line_id}", 0) < min_visible:
            continue
        lines.append({"kind": ln.kind, "id": ln.line_id, "vertices": ln.vertices.tolist()})
    payload = {"version": 1, "lines": lines}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return payload


def export_truth(stack: PhantomStack, design: PhantomDesign, path) -> dict:
    """Write ground truth: entries, annotation lines, centerline, volumes."""
    lines = truth_lines(design)
    payload = {
        "exact_volume": stack.exact_volume,
        "spacing": stack.spacing,
        "resolution": stack.resolution,
        "shadow": list(stack.shadow) if stack.shadow else None,
        "centerline": stack.centerline.samples.tolist(),
        "entries": [
            {
                "frame": e.frame_index,
                "center_mm": list(e.center_mm),
                "center_px": list(e.center_px),
                "labels": list(e.labels),
                "area_px": e.area_px,
                "occluded": e.occluded,
            }
            for e in stack.truth
        ],
        "lines": [
            {"kind": ln.kind, "id": ln.line_id, "vertices": ln.vertices.tolist()}
            for ln in lines
        ],
        "beams_total": len(design.beams),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return payload


def reference_phantom(
    spacing: float,
    resolution: float = 0.01,
    image_size: int = 512,
    twist_deg: float = 60.0,
    bend_deg: float = 60.0,
    sections_per_curve: int = 2000,
    sector_width: float = 30.0,
    drift_per_frame: float = 1.0,
    start_angle: float = 106.0,
    spec: StentDesignSpec | None = None,
) -> tuple[PhantomDesign, PhantomStack]:
    """The deformed surrogate stent used for validation, sliced and shadowed."""
    design = generate_design(spec or StentDesignSpec(), sections_per_curve)
    design = twist(design, twist_deg)
    design = bend(design, bend_deg)
    stack = slice_stack(design.solid, design.centerline, spacing, resolution, image_size)
    stack = add_shadow(stack, sector_width, drift_per_frame, start_angle)
    return design, stack
