"""Swept-surface construction for stent struts.

Rectangular cross-sections are placed along skeleton curves, oriented so the
strut faces stay perpendicular to the local radial direction, then swept into
closed (ring) or open (beam) triangle tubes.  Beams are trimmed where they
meet a ring's side face and stitched into a hole carved from that face, so a
full stent becomes one watertight shell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SurfaceError(Exception):
    """Raised for degenerate sections, bad sweeps, or impossible joins."""


@dataclass(frozen=True)
class CrossSection:
    """Planar rectangle swept along a skeleton curve.

    Vertices are ordered (+width +depth), (-width +depth), (-width -depth),
    (+width -depth) where the depth direction is the outward radial unit
    vector and width runs along tangent x radial.
    """

    center: np.ndarray
    vertices: np.ndarray
    width: float
    depth: float


@dataclass(frozen=True)
class StentMesh:
    """Indexed triangle soup with a component tag per triangle."""

    vertices: np.ndarray
    triangles: np.ndarray
    tags: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "triangles", np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))
        if len(self.tags) != len(self.triangles):
            raise SurfaceError("one tag per triangle required")


def straight_z_axis(points: np.ndarray) -> np.ndarray:
    """Lumen axis for undeformed geometry: the z axis itself."""
    points = np.asarray(points, dtype=np.float64)
    out = np.zeros_like(points)
    out[:, 2] = points[:, 2]
    return out


def axis_from_curve(axis_curve, samples: int = 2048):
    """Foot-point lookup on an arbitrary lumen axis curve.

    Returns a callable mapping query points to their nearest points on the
    axis; the dense polyline is refined by exact projection onto the two
    segments flanking the best sample.
    """
    t0, t1 = axis_curve.domain
    ts = np.linspace(t0, t1, samples)
    poly = axis_curve.evaluate(ts)

    def lookup(points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        d2 = ((points[:, None, :] - poly[None, :, :]) ** 2).sum(axis=2)
        best = np.argmin(d2, axis=1)
        out = poly[best].copy()
        for k, i in enumerate(best):
            lo, hi = max(i - 1, 0), min(i + 1, len(poly) - 1)
            p = points[k]
            for a, b in ((lo, i), (i, hi)):
                if a == b:
                    continue
                seg = poly[b] - poly[a]
                f = np.clip((p - poly[a]) @ seg / (seg @ seg), 0.0, 1.0)
                cand = poly[a] + f * seg
                if np.linalg.norm(cand - p) < np.linalg.norm(out[k] - p):
                    out[k] = cand
        return out

    return lookup


def _section_frames(curve, params, lumen_axis):
    """Centers, unit tangents, radial and width unit vectors at parameters."""
    params = np.atleast_1d(np.asarray(params, dtype=np.float64))
    centers = curve.evaluate(params)
    tangents = curve.derivative(params)
    tn = np.linalg.norm(tangents, axis=1)
    if np.any(tn < 1e-12):
        raise SurfaceError("zero tangent on skeleton curve")
    tangents = tangents / tn[:, None]
    radial = centers - lumen_axis(centers)
    rn = np.linalg.norm(radial, axis=1)
    if np.any(rn < 1e-9):
        raise SurfaceError("section center lies on the lumen axis (degenerate radial)")
    radial = radial / rn[:, None]
    rp = radial - np.einsum("ij,ij->i", radial, tangents)[:, None] * tangents
    rpn = np.linalg.norm(rp, axis=1)
    if np.any(rpn < 1e-9):
        raise SurfaceError("radial direction parallel to curve tangent")
    rp = rp / rpn[:, None]
    e1 = np.cross(tangents, rp)
    return centers, tangents, rp, e1


def sample_sections(curve, n, dims, lumen_axis, span=None) -> list[CrossSection]:
    """Cross-sections at n arclength-uniform stations along the curve.

    Closed curves get n stations covering one period (no duplicate at the
    seam); open curves and explicit parameter spans include both endpoints.
    """
    if n < 2:
        raise SurfaceError("need at least 2 sections")
    width, depth = float(dims[0]), float(dims[1])
    if width <= 0 or depth <= 0:
        raise SurfaceError("section dims must be positive")
    table_t, table_s = curve.arclength_table()
    total = table_s[-1]
    if span is None and curve.closed:
        arcs = np.arange(n) * total / n
    else:
        if span is None:
            lo_s, hi_s = 0.0, total
        else:
            lo_s = float(np.interp(span[0], table_t, table_s))
            hi_s = float(np.interp(span[1], table_t, table_s))
            if hi_s <= lo_s:
                raise SurfaceError("empty section span")
        arcs = np.linspace(lo_s, hi_s, n)
    params = curve.params_at_arclengths(arcs)
    centers, _, rp, e1 = _section_frames(curve, params, lumen_axis)
    half_w, half_d = 0.5 * width, 0.5 * depth
    out = []
    for c, a, b in zip(centers, e1, rp):
        verts = np.array(
            [
                c + half_w * a + half_d * b,
                c - half_w * a + half_d * b,
                c - half_w * a - half_d * b,
                c + half_w * a - half_d * b,
            ]
        )
        out.append(CrossSection(center=c, vertices=verts, width=width, depth=depth))
    return out


def _check_correspondence(sections, closed):
    """Validate vertex correspondence between consecutive sections.

    Matching is by nearest vertex; any cyclic relabeling other than identity,
    or a rotation of 90 degrees or more, makes the strip construction
    ambiguous and is reported with the offending pair.
    """
    count = len(sections)
    pairs = [(i, (i + 1) % count) for i in range(count if closed else count - 1)]
    for i, j in pairs:
        a = sections[i].vertices - sections[i].center
        b = sections[j].vertices - sections[j].center
        cost = [np.linalg.norm(b - np.roll(a, -o, axis=0), axis=1).sum() for o in range(4)]
        if int(np.argmin(cost)) != 0:
            raise SurfaceError(f"section twist >= 90 degrees between sections {i} and {j}")


def _tube_arrays(sections, closed, tag):
    verts = np.concatenate([s.vertices for s in sections])
    n = len(sections)
    quads = n if closed else n - 1
    tris = np.empty((8 * quads if closed else 8 * (n - 1), 3), dtype=np.int64)
    k = 0
    for q in range(quads):
        i, j = q, (q + 1) % n
        for side in range(4):
            a = 4 * i + side
            b = 4 * i + (side + 1) % 4
            c = 4 * j + (side + 1) % 4
            d = 4 * j + side
            tris[k] = (a, b, c)
            tris[k + 1] = (a, c, d)
            k += 2
    return verts, tris, [tag] * len(tris)


def sweep_closed(sections, tag: str = "ring") -> StentMesh:
    """Sweep a cyclic list of sections into a closed tube (torus topology)."""
    if len(sections) < 3:
        raise SurfaceError("closed sweep needs at least 3 sections")
    _check_correspondence(sections, closed=True)
    verts, tris, tags = _tube_arrays(sections, closed=True, tag=tag)
    return orient_outward(StentMesh(verts, tris, tuple(tags)))


def sweep_open(sections, tag: str = "beam") -> StentMesh:
    """Sweep sections into an open tube; end loops stay unstitched."""
    if len(sections) < 2:
        raise SurfaceError("open sweep needs at least 2 sections")
    _check_correspondence(sections, closed=False)
    verts, tris, tags = _tube_arrays(sections, closed=False, tag=tag)
    return StentMesh(verts, tris, tuple(tags))


# ------------------------------------------------------------------ census


def edge_use_counts(triangles: np.ndarray):
    """Counts of directed and undirected edge uses across the mesh."""
    directed = {}
    undirected = {}
    for tri in triangles:
        a, b, c = (int(tri[0]), int(tri[1]), int(tri[2]))
        for u, v in ((a, b), (b, c), (c, a)):
            directed[(u, v)] = directed.get((u, v), 0) + 1
            key = (u, v) if u < v else (v, u)
            undirected[key] = undirected.get(key, 0) + 1
    return directed, undirected


def boundary_loops(mesh: StentMesh) -> list[list[int]]:
    """Closed vertex loops of boundary edges (edges used by one triangle)."""
    directed, undirected = edge_use_counts(mesh.triangles)
    border = {}
    for (u, v), cnt in undirected.items():
        if cnt == 1:
            if (u, v) in directed:
                border[u] = v
            else:
                border[v] = u
    loops = []
    seen = set()
    for start in sorted(border):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        cur = border[start]
        while cur != start:
            loop.append(cur)
            seen.add(cur)
            cur = border[cur]
        loops.append(loop)
    return loops


def is_closed_manifold(mesh: StentMesh) -> bool:
    """Every edge shared by exactly two triangles, with opposite windings."""
    directed, undirected = edge_use_counts(mesh.triangles)
    if any(cnt != 2 for cnt in undirected.values()):
        return False
    return all(cnt == 1 for cnt in directed.values())


def snap_vertices(mesh: StentMesh, tol: float = 1e-9) -> StentMesh:
    """Weld vertices closer than tol and drop the duplicates."""
    keys = np.round(mesh.vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    verts = mesh.vertices[first]
    tris = inverse.reshape(-1)[mesh.triangles]
    return StentMesh(verts, tris, mesh.tags)


def connected_triangle_components(mesh: StentMesh) -> list[np.ndarray]:
    """Groups of triangle indices connected through shared undirected edges."""
    edge_tris = {}
    for t, tri in enumerate(mesh.triangles):
        a, b, c = (int(tri[0]), int(tri[1]), int(tri[2]))
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            edge_tris.setdefault(key, []).append(t)
    seen = np.zeros(len(mesh.triangles), dtype=bool)
    comps = []
    for t0 in range(len(mesh.triangles)):
        if seen[t0]:
            continue
        stack = [t0]
        seen[t0] = True
        comp = []
        while stack:
            t = stack.pop()
            comp.append(t)
            tri = mesh.triangles[t]
            a, b, c = (int(tri[0]), int(tri[1]), int(tri[2]))
            for u, v in ((a, b), (b, c), (c, a)):
                key = (u, v) if u < v else (v, u)
                for other in edge_tris[key]:
                    if not seen[other]:
                        seen[other] = True
                        stack.append(other)
        comps.append(np.array(sorted(comp)))
    return comps


def signed_volume(mesh: StentMesh, triangle_ids=None) -> float:
    """Signed enclosed volume by the divergence theorem."""
    tris = mesh.triangles if triangle_ids is None else mesh.triangles[triangle_ids]
    v0 = mesh.vertices[tris[:, 0]]
    v1 = mesh.vertices[tris[:, 1]]
    v2 = mesh.vertices[tris[:, 2]]
    return float(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0)


def surface_area(mesh: StentMesh) -> float:
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    v1 = mesh.vertices[mesh.triangles[:, 1]]
    v2 = mesh.vertices[mesh.triangles[:, 2]]
    return float(0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1).sum())


def orient_outward(mesh: StentMesh) -> StentMesh:
    """Make windings consistent per component and signed volumes positive."""
    tris = mesh.triangles.copy()
    edge_tris = {}
    for t, tri in enumerate(tris):
        a, b, c = (int(tri[0]), int(tri[1]), int(tri[2]))
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            edge_tris.setdefault(key, []).append(t)

    def directed_edges(tri):
        a, b, c = (int(tri[0]), int(tri[1]), int(tri[2]))
        return ((a, b), (b, c), (c, a))

    seen = np.zeros(len(tris), dtype=bool)
    out = StentMesh(mesh.vertices, tris, mesh.tags)
    for t0 in range(len(tris)):
        if seen[t0]:
            continue
        comp = [t0]
        stack = [t0]
        seen[t0] = True
        while stack:
            t = stack.pop()
            own = set(directed_edges(tris[t]))
            for u, v in own:
                key = (u, v) if u < v else (v, u)
                for other in edge_tris[key]:
                    if seen[other]:
                        continue
                    # The neighbor must traverse the shared edge the other way.
                    if (u, v) in directed_edges(tris[other]):
                        tris[other] = tris[other][::-1]
                    seen[other] = True
                    stack.append(other)
                    comp.append(other)
        ids = np.array(comp)
        if signed_volume(out, ids) < 0.0:
            tris[ids] = tris[ids][:, ::-1]
    return StentMesh(mesh.vertices, tris, mesh.tags)


# --------------------------------------------------------------- assembler

# Section corner layout: 0 = +e1 +rp, 1 = -e1 +rp, 2 = -e1 -rp, 3 = +e1 -rp.
# Side s of the tube is the strip between corners s and (s + 1) % 4, so the
# +e1 face is side 3, the -e1 face side 1; outer (+rp) 0, inner (-rp) 2.
_SIDE_PLUS_E1 = 3
_SIDE_MINUS_E1 = 1


@dataclass
class _RingRecord:
    curve: object
    base: int
    n_sections: int
    arclengths: np.ndarray
    face_tris: dict = field(default_factory=dict)
    carved: dict = field(default_factory=dict)


class StentAssembler:
    """Accumulates ring and beam tubes and welds them into one shell.

    Rings are swept closed; each beam is trimmed back to the side faces of
    the rings it lands on, swept open, and bridged into rectangular holes
    carved from those faces.
    """

    def __init__(
        self,
        lumen_axis,
        ring_dims=(0.15, 0.15),
        beam_dims=(0.20, 0.15),
        sections_per_curve: int = 100,
    ):
        self.lumen_axis = lumen_axis
        self.ring_dims = (float(ring_dims[0]), float(ring_dims[1]))
        self.beam_dims = (float(beam_dims[0]), float(beam_dims[1]))
        self.sections_per_curve = int(sections_per_curve)
        self._verts: list[np.ndarray] = []
        self._tris: list[tuple[int, int, int]] = []
        self._tags: list[str] = []
        self._dead: set[int] = set()
        self._vcount = 0
        self._rings: dict[int, _RingRecord] = {}

    def _append_mesh(self, verts, tris, tag):
        base = self._vcount
        self._verts.append(verts)
        self._vcount += len(verts)
        first_tri = len(self._tris)
        for tri in tris:
            self._tris.append((int(tri[0]) + base, int(tri[1]) + base, int(tri[2]) + base))
            self._tags.append(tag)
        return base, first_tri

    def add_ring(self, ring_id: int, curve) -> None:
        if ring_id in self._rings:
            raise SurfaceError(f"duplicate ring id {ring_id}")
        n = self.sections_per_curve
        sections = sample_sections(curve, n, self.ring_dims, self.lumen_axis)
        _check_correspondence(sections, closed=True)
        verts, tris, _ = _tube_arrays(sections, closed=True, tag="")
        base, first_tri = self._append_mesh(verts, tris, f"ring:{ring_id}")
        table_t, table_s = curve.arclength_table()
        total = table_s[-1]
        record = _RingRecord(
            curve=curve,
            base=base,
            n_sections=n,
            arclengths=np.arange(n) * total / n,
        )
        # Quad q, side s occupies triangle ids first_tri + 8q + 2s (+1).
        for q in range(n):
            for side in range(4):
                t0 = first_tri + 8 * q + 2 * side
                record.face_tris[(side, q)] = (t0, t0 + 1)
        self._rings[ring_id] = record

    def _ring_frame(self, record: _RingRecord, t: float):
        centers, tangents, rp, e1 = _section_frames(record.curve, [t], self.lumen_axis)
        return centers[0], tangents[0], rp[0], e1[0]

    def _trim_param(self, beam_curve, t_end: float, t_inward: float, plane_point, plane_normal):
        """Beam parameter where the centerline crosses the ring face plane."""

        def g(t):
            return float((beam_curve.evaluate(float(t)) - plane_point) @ plane_normal)

        g_end = g(t_end)
        lo, hi = t_end, None
        steps = 256
        for q in range(1, steps + 1):
            t = t_end + (t_inward - t_end) * q / steps
            if g(t) * g_end < 0.0:
                hi = t
                break
            lo = t
        if hi is None:
            raise SurfaceError("beam never clears the ring face; cannot trim")
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if g(mid) * g_end < 0.0:
                hi = mid
            else:
                lo = mid
        return 0.5 * (lo + hi)

    def _carve_hole(self, record: _RingRecord, ring_id: int, t_j: float, toward_beam):
        """Remove the face quads under the beam footprint; return the rim loop."""
        center, _, rp, e1 = self._ring_frame(record, t_j)
        side = _SIDE_PLUS_E1 if float(toward_beam @ e1) > 0.0 else _SIDE_MINUS_E1
        e1_signed = e1 if side == _SIDE_PLUS_E1 else -e1

        table_t, table_s = record.curve.arclength_table()
        total = table_s[-1]
        s_j = float(np.interp(t_j, table_t, table_s))
        half = 0.5 * self.beam_dims[0]
        n = record.n_sections
        quad_len = total / n

        # Quads whose arclength interval intersects the footprint, cyclic.
        k_j = s_j / quad_len
        lo = int(np.floor((s_j - half) / quad_len))
        hi = int(np.floor((s_j + half) / quad_len))
        if (s_j + half) % quad_len == 0.0:
            hi -= 1
        quads = [(k % n) for k in range(lo, hi + 1)]
        if len(quads) >= n // 2:
            raise SurfaceError(
                f"beam footprint at ring {ring_id} spans half the ring; join is ambiguous"
            )
        for q in quads:
            if (side, q) in record.carved:
                raise SurfaceError(
                    f"overlapping beam footprints on ring {ring_id} near quad {q}"
                )
        for q in quads:
            record.carved[(side, q)] = True
            for tid in record.face_tris[(side, q)]:
                self._dead.add(tid)

        corner_a = side  # first corner of the side's pair
        corner_b = (side + 1) % 4
        k0 = quads[0]
        chain = [k0] + [(q + 1) % n for q in quads]
        a_chain = [record.base + 4 * k + corner_a for k in chain]
        b_chain = [record.base + 4 * k + corner_b for k in chain]
        # Rim loop: corner-a chain forward, corner-b chain backward.  The
        # rim's own corners are the chain endpoints, not interior vertices.
        loop = a_chain + b_chain[::-1]
        c = len(chain)
        corner_positions = [0, c - 1, c, 2 * c - 1]
        face_point = center + 0.5 * self.ring_dims[0] * e1_signed
        return loop, corner_positions, face_point, e1_signed

    def _bridge(self, beam_loop, hole_loop, corner_positions, tag):
        """Fan-stitch a 4-vertex beam end loop to the hole rim loop."""
        m = len(hole_loop)
        verts = np.concatenate(self._verts) if len(self._verts) > 1 else self._verts[0]
        # Snapping each beam corner to its nearest rim corner independently
        # degenerates when a sparsely fitted beam lands rolled or off-center,
        # so pick the bijective cyclic alignment of the two corner loops with
        # the smallest total distance instead.
        best_total, pos = None, None
        for direction in (1, -1):
            for shift in range(4):
                order = [(shift + direction * i) % 4 for i in range(4)]
                cand = [corner_positions[j] for j in order]
                total = sum(
                    float(np.linalg.norm(verts[beam_loop[i]] - verts[hole_loop[cand[i]]]))
                    for i in range(4)
                )
                if best_total is None or total < best_total:
                    best_total, pos = total, cand
        # Walking the beam loop must walk the rim monotonically one way.
        fwd = [(pos[(i + 1) % 4] - pos[i]) % m for i in range(4)]
        rev = [(pos[i] - pos[(i + 1) % 4]) % m for i in range(4)]
        if sum(fwd) == m:
            step = 1
        elif sum(rev) == m:
            step = -1
        else:
            raise SurfaceError("beam and hole corner orders are inconsistent")
        for i in range(4):
            x, y = beam_loop[i], beam_loop[(i + 1) % 4]
            p, p_end = pos[i], pos[(i + 1) % 4]
            while p != p_end:
                nxt = (p + step) % m
                self._tris.append((x, hole_loop[p], hole_loop[nxt]))
                self._tags.append(tag)
                p = nxt
            self._tris.append((x, hole_loop[p_end], y))
            self._tags.append(tag)

    def add_beam(self, beam_id: int, curve, start_junction, end_junction) -> None:
        """Sweep a beam and weld each attached end into its ring.

        Junctions are (ring_id, ring_parameter) pairs for the beam's start
        and end; the beam curve is expected to terminate on the ring curves.
        Passing None leaves that end unattached and caps it flat.
        """
        t0, t1 = curve.domain
        t_lo, t_hi = t0, t1
        holes: list = [None, None]
        for idx, (which, junction) in enumerate(
            (("start", start_junction), ("end", end_junction))
        ):
            if junction is None:
                continue
            ring_id, t_j = junction
            if ring_id not in self._rings:
                raise SurfaceError(f"unknown ring id {ring_id}")
            record = self._rings[ring_id]
            center, _, _, _ = self._ring_frame(record, t_j)
            t_end = t0 if which == "start" else t1
            t_inward = t1 if which == "start" else t0
            probe = curve.evaluate(t_end + 0.02 * (t_inward - t_end)) - center
            loop, corners, face_point, e1_signed = self._carve_hole(
                record, ring_id, t_j, probe
            )
            t_star = self._trim_param(curve, t_end, t_inward, face_point, e1_signed)
            if which == "start":
                t_lo = t_star
            else:
                t_hi = t_star
            holes[idx] = (ring_id, loop, corners)
        if t_lo >= t_hi:
            raise SurfaceError(f"beam {beam_id} vanishes after trimming at both rings")
        sections = sample_sections(
            curve, self.sections_per_curve, self.beam_dims, self.lumen_axis, span=(t_lo, t_hi)
        )
        _check_correspondence(sections, closed=False)
        verts, tris, _ = _tube_arrays(sections, closed=False, tag="")
        base, _ = self._append_mesh(verts, tris, f"beam:{beam_id}")
        n = len(sections)
        start_loop = [base + c for c in range(4)]
        end_loop = [base + 4 * (n - 1) + c for c in range(4)]
        for hole, beam_loop in zip(holes, (start_loop, end_loop)):
            if hole is None:
                a, b, c, d = beam_loop
                self._tris.extend([(a, b, c), (a, c, d)])
                self._tags.extend([f"beam:{beam_id}", f"beam:{beam_id}"])
            else:
                ring_id, hole_loop, corners = hole
                self._bridge(beam_loop, hole_loop, corners, f"joint:{ring_id}:{beam_id}")

    def finalize(self) -> StentMesh:
        verts = np.concatenate(self._verts)
        keep = [i for i in range(len(self._tris)) if i not in self._dead]
        tris = np.array([self._tris[i] for i in keep], dtype=np.int64)
        tags = tuple(self._tags[i] for i in keep)
        mesh = snap_vertices(StentMesh(verts, tris, tags))
        return orient_outward(mesh)
