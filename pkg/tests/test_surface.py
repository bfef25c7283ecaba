import numpy as np
import pytest

from stentrecon.splines import fit_natural_spline, fit_periodic_spline
from stentrecon.surface import (
    CrossSection,
    StentAssembler,
    StentMesh,
    SurfaceError,
    axis_from_curve,
    boundary_loops,
    edge_use_counts,
    is_closed_manifold,
    signed_volume,
    orient_outward,
    sample_sections,
    snap_vertices,
    straight_z_axis,
    surface_area,
    sweep_closed,
    sweep_open,
)


def circle_curve(radius=2.0, n=48, z=0.0):
    th = np.arange(n) * 2.0 * np.pi / n
    pts = np.column_stack([radius * np.cos(th), radius * np.sin(th), np.full(n, z)])
    return fit_periodic_spline(pts)


def straight_beam(x=5.0, z0=-2.0, z1=0.0):
    return fit_natural_spline(np.array([[x, 0.0, z0], [x, 0.0, z1]]))


# ------------------------------------------------------------ oracles


def pappus_volume(radius, side):
    """Volume of a square-section torus: section area times center path."""
    return 2.0 * np.pi * radius * side * side


def recount_edges(triangles):
    """Independent edge census used to cross-check the module's one."""
    from collections import Counter

    counts = Counter()
    for a, b, c in triangles:
        for u, v in ((a, b), (b, c), (c, a)):
            counts[frozenset((int(u), int(v)))] += 1
    return counts


# ------------------------------------------------------------ sections


def test_section_rectangles_are_exact():
    curve = circle_curve(radius=2.0)
    sections = sample_sections(curve, 40, (0.15, 0.15), straight_z_axis)
    assert len(sections) == 40
    for sec in sections:
        v = sec.vertices
        sides = [np.linalg.norm(v[(i + 1) % 4] - v[i]) for i in range(4)]
        assert abs(sides[0] - 0.15) < 1e-9 and abs(sides[2] - 0.15) < 1e-9
        assert abs(sides[1] - 0.15) < 1e-9 and abs(sides[3] - 0.15) < 1e-9
        normal = np.cross(v[1] - v[0], v[3] - v[0])
        assert abs((v[2] - v[0]) @ normal) / np.linalg.norm(normal) < 1e-9
        radial = sec.center - straight_z_axis(sec.center[None])[0]
        radial = radial / np.linalg.norm(radial)
        assert abs((v[0] - v[1]) @ radial) < 1e-6
        assert abs((v[3] - v[2]) @ radial) < 1e-6


def test_section_plane_normal_tracks_tangent():
    curve = circle_curve(radius=1.5)
    sections = sample_sections(curve, 100, (0.15, 0.15), straight_z_axis)
    centers = np.array([s.center for s in sections])
    for i, sec in enumerate(sections):
        v = sec.vertices
        normal = np.cross(v[1] - v[0], v[3] - v[0])
        normal = normal / np.linalg.norm(normal)
        tangent = centers[(i + 1) % 100] - centers[i - 1]
        tangent = tangent / np.linalg.norm(tangent)
        assert abs(abs(normal @ tangent) - 1.0) < 1e-3


def test_straight_beam_sections_congruent():
    sections = sample_sections(straight_beam(), 10, (0.20, 0.15), straight_z_axis)
    offsets = [s.vertices - s.center for s in sections]
    for off in offsets[1:]:
        assert np.abs(off - offsets[0]).max() < 1e-9


def test_two_sections_sit_at_endpoints():
    curve = straight_beam(z0=-1.0, z1=2.5)
    sections = sample_sections(curve, 2, (0.1, 0.1), straight_z_axis)
    assert np.allclose(sections[0].center, [5.0, 0.0, -1.0], atol=1e-9)
    assert np.allclose(sections[1].center, [5.0, 0.0, 2.5], atol=1e-9)


def test_degenerate_radial_is_an_error():
    on_axis = fit_natural_spline(np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 3.0]]))
    with pytest.raises(SurfaceError):
        sample_sections(on_axis, 5, (0.1, 0.1), straight_z_axis)


# ------------------------------------------------------------ sweeps


def test_closed_sweep_is_a_torus():
    mesh = sweep_closed(sample_sections(circle_curve(), 60, (0.15, 0.15), straight_z_axis))
    assert is_closed_manifold(mesh)
    _, undirected = edge_use_counts(mesh.triangles)
    v, e, f = len(mesh.vertices), len(undirected), len(mesh.triangles)
    assert v - e + f == 0
    assert signed_volume(mesh) > 0.0
    # The module census must agree with an independent recount.
    assert all(c == 2 for c in recount_edges(mesh.triangles).values())


def test_swept_volume_matches_pappus():
    curve = circle_curve(radius=2.0)
    mesh = sweep_closed(sample_sections(curve, 100, (0.15, 0.15), straight_z_axis))
    exact = pappus_volume(2.0, 0.15)
    assert abs(signed_volume(mesh) - exact) / exact < 0.01


def test_swept_volume_converges_quadratically():
    curve = circle_curve(radius=2.0)
    exact = pappus_volume(2.0, 0.15)
    errs = []
    for n in (32, 64):
        mesh = sweep_closed(sample_sections(curve, n, (0.15, 0.15), straight_z_axis))
        errs.append(abs(signed_volume(mesh) - exact))
    assert errs[1] < errs[0] / 2.5


def test_minimal_open_sweep():
    sections = sample_sections(straight_beam(), 2, (0.2, 0.15), straight_z_axis)
    mesh = sweep_open(sections)
    assert len(mesh.triangles) == 8
    loops = boundary_loops(mesh)
    assert len(loops) == 2
    assert sorted(len(l) for l in loops) == [4, 4]


def test_prism_lateral_area_exact():
    curve = straight_beam(z0=0.0, z1=3.0)
    mesh = sweep_open(sample_sections(curve, 7, (0.2, 0.15), straight_z_axis))
    assert abs(surface_area(mesh) - 2.0 * (0.2 + 0.15) * 3.0) < 1e-9


def test_reversed_sections_still_point_outward():
    sections = sample_sections(circle_curve(), 50, (0.15, 0.15), straight_z_axis)
    fwd = sweep_closed(sections)
    rev = sweep_closed(sections[::-1])
    assert signed_volume(fwd) > 0.0 and signed_volume(rev) > 0.0
    assert abs(signed_volume(fwd) - signed_volume(rev)) < 1e-12


def test_twisted_sections_are_rejected():
    def square(center, roll):
        c, s2 = np.cos(roll), np.sin(roll)
        base = np.array([[0.5, 0.5, 0], [-0.5, 0.5, 0], [-0.5, -0.5, 0], [0.5, -0.5, 0]])
        turned = base @ np.array([[c, -s2, 0], [s2, c, 0], [0, 0, 1.0]]).T
        return CrossSection(np.asarray(center, float), turned + center, 1.0, 1.0)

    sections = [square([0, 0, 0], 0.0), square([0, 0, 1], 2.1)]
    with pytest.raises(SurfaceError, match="0 and 1"):
        sweep_open(sections)


def test_snap_welds_duplicates():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 0, 0]], dtype=float)
    mesh = StentMesh(verts, np.array([[0, 1, 2], [2, 3, 0]]), ("a", "a"))
    welded = snap_vertices(mesh)
    assert len(welded.vertices) == 3
    _, undirected = edge_use_counts(welded.triangles)
    assert undirected[(0, 2) if (0, 2) in undirected else tuple(sorted((2, 0)))] >= 1


# ------------------------------------------------------------ joins


def t_junction(n_ring=100, junction_quad_centered=False):
    ring = circle_curve(radius=5.0, n=64)
    assembler = StentAssembler(straight_z_axis, sections_per_curve=n_ring)
    assembler.add_ring(0, ring)
    table_t, table_s = ring.arclength_table()
    total = table_s[-1]
    if junction_quad_centered:
        s_j = 1.5 * total / n_ring
        t_j = float(ring.params_at_arclengths(np.array([s_j]))[0])
    else:
        t_j = 0.0
    p = ring.evaluate(t_j)
    beam = fit_natural_spline(np.array([[p[0], p[1], -2.0], [p[0], p[1], 0.0]]))
    assembler.add_beam(0, beam, None, (0, t_j))
    return assembler, ring


def test_t_junction_is_watertight():
    assembler, _ = t_junction()
    mesh = assembler.finalize()
    assert is_closed_manifold(mesh)
    assert signed_volume(mesh) > 0.0


def test_t_junction_volume_is_additive():
    assembler, ring = t_junction()
    mesh = assembler.finalize()
    ring_only = sweep_closed(sample_sections(ring, 100, (0.15, 0.15), straight_z_axis))
    # Beam runs from its cap at z=-2 to the ring face plane at z=-0.075.
    beam_part = (2.0 - 0.075) * 0.20 * 0.15
    expected = signed_volume(ring_only) + beam_part
    assert abs(signed_volume(mesh) - expected) / expected < 1e-9


def test_single_quad_hole_bridges_with_eight_triangles():
    assembler, _ = t_junction(junction_quad_centered=True)
    mesh = assembler.finalize()
    joint = [t for t, tag in enumerate(mesh.tags) if tag.startswith("joint:")]
    assert len(joint) == 8
    assert is_closed_manifold(mesh)


def test_overlapping_footprints_error():
    ring = circle_curve(radius=5.0, n=64)
    assembler = StentAssembler(straight_z_axis, sections_per_curve=100)
    assembler.add_ring(0, ring)
    p = ring.evaluate(0.0)
    beam = fit_natural_spline(np.array([[p[0], p[1], -2.0], [p[0], p[1], 0.0]]))
    assembler.add_beam(0, beam, None, (0, 0.0))
    clone = fit_natural_spline(np.array([[p[0], p[1], -2.0], [p[0], p[1], 0.0]]))
    with pytest.raises(SurfaceError, match="overlap"):
        assembler.add_beam(1, clone, None, (0, 0.0))


def test_axis_from_curve_matches_straight_axis():
    axis_curve = fit_natural_spline(np.array([[0.0, 0.0, -5.0], [0.0, 0.0, 5.0]]))
    lookup = axis_from_curve(axis_curve)
    pts = np.array([[1.0, 2.0, 0.3], [-0.5, 0.1, 2.0]])
    assert np.abs(lookup(pts) - straight_z_axis(pts)).max() < 1e-6


def test_orient_outward_flips_inward_mesh():
    mesh = sweep_closed(sample_sections(circle_curve(), 40, (0.15, 0.15), straight_z_axis))
    inverted = StentMesh(mesh.vertices, mesh.triangles[:, ::-1], mesh.tags)
    assert signed_volume(inverted) < 0.0
    assert signed_volume(orient_outward(inverted)) > 0.0
