"""Wire resampling, rotation-minimizing frames, frame placement."""
import numpy as np
import pytest

from stentrecon.wirepath import (
    FrameTransform,
    Landmark,
    PlacementError,
    WirePath,
    WirePathError,
    frames_along,
    place_frames,
    register_cloud,
    resample_by_arclength,
)


def line_path(length=10.0, n=11, axis=2):
    pts = np.zeros((n, 3))
    pts[:, axis] = np.linspace(0, length, n)
    return WirePath(pts)


def circle_path(radius=10.0, n=400, plane="xy"):
    th = np.linspace(0, 2 * np.pi, n)
    pts = np.zeros((n, 3))
    pts[:, 0] = radius * np.cos(th)
    pts[:, 1] = radius * np.sin(th)
    return WirePath(pts)


def helix_path(radius=2.0, pitch=1.0, turns=3.0, n=1200):
    th = np.linspace(0, 2 * np.pi * turns, n)
    pts = np.column_stack(
        [radius * np.cos(th), radius * np.sin(th), pitch * th / (2 * np.pi)]
    )
    return WirePath(pts)


# ---------------------------------------------------------------- resampling


def test_resample_line_counts():
    path = line_path(length=10.0, n=51)
    out = resample_by_arclength(path, 1.0)
    assert len(out.samples) == 11
    assert np.allclose(np.diff(out.cumulative_arclength), 1.0)


def test_resample_preserves_endpoints():
    rng = np.random.default_rng(3)
    pts = np.cumsum(rng.normal(0, 0.3, (40, 3)), axis=0)
    path = WirePath(pts)
    out = resample_by_arclength(path, path.length / 17)
    assert np.allclose(out.samples[0], pts[0])
    assert np.allclose(out.samples[-1], pts[-1])


def arclengths_on_polyline(vertices, points):
    """Arclength position of each point along a polyline it lies on.

    Independent recovery: project onto every segment, keep the closest.
    """
    a, b = vertices[:-1], vertices[1:]
    d = b - a
    seg_sq = np.einsum("ij,ij->i", d, d)
    seg_len = np.sqrt(seg_sq)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    out = np.empty(len(points))
    for k, p in enumerate(points):
        f = np.clip(np.einsum("ij,ij->i", p - a, d) / seg_sq, 0.0, 1.0)
        closest = a + f[:, None] * d
        i = int(np.argmin(np.linalg.norm(closest - p, axis=1)))
        out[k] = cum[i] + f[i] * seg_len[i]
    return out


def test_resample_spacing_is_uniform():
    # Uniformity is measured along the source polyline, where the samples
    # are placed; the output's own chords re-cut corners and may vary.
    path = helix_path()
    out = resample_by_arclength(path, 0.05)
    s = arclengths_on_polyline(path.samples, out.samples)
    assert np.ptp(np.diff(s)) < 1e-9


def test_resample_idempotent():
    path = helix_path(n=300)
    once = resample_by_arclength(path, 0.1)
    twice = resample_by_arclength(once, 0.1)
    assert twice is once


def test_resample_circle_chord_error_quadratic():
    path = circle_path(radius=10.0, n=4000)
    errors = []
    for step in (0.4, 0.2):
        out = resample_by_arclength(path, step)
        # Chord midpoints dip below the circle by the sagitta, ~step^2 / 8R.
        mids = 0.5 * (out.samples[:-1] + out.samples[1:])
        radii = np.linalg.norm(mids[:, :2], axis=1)
        errors.append(np.abs(radii - 10.0).max())
    # Halving the step should cut the sagitta-scale error by about 4.
    assert errors[1] < errors[0] / 2.5


def test_resample_rejects_bad_steps():
    path = line_path()
    with pytest.raises(WirePathError):
        resample_by_arclength(path, 0.0)
    with pytest.raises(WirePathError):
        resample_by_arclength(path, 99.0)


def test_wirepath_rejects_duplicates():
    with pytest.raises(WirePathError):
        WirePath(np.array([[0, 0, 0], [0, 0, 0], [1, 0, 0]], dtype=float))


# ---------------------------------------------------------------- frames


def orthonormality_defect(field):
    worst = 0.0
    for t, n, b in zip(field.tangents, field.normals, field.binormals):
        m = np.column_stack([n, b, t])
        worst = max(worst, np.abs(m.T @ m - np.eye(3)).max())
    return worst


def test_frames_are_orthonormal():
    for path in (line_path(), helix_path(), circle_path()):
        field = frames_along(resample_by_arclength(path, path.length / 200))
        assert orthonormality_defect(field) < 1e-9


def test_frames_on_a_line_never_rotate():
    field = frames_along(line_path(n=40))
    assert np.allclose(field.tangents, field.tangents[0])
    assert np.allclose(field.normals, field.normals[0])


def test_frame_tangents_match_analytic_circle():
    path = resample_by_arclength(circle_path(radius=1.0, n=5000), 0.05)
    field = frames_along(path)
    th = np.arctan2(path.samples[:, 1], path.samples[:, 0])
    analytic = np.column_stack([-np.sin(th), np.cos(th), np.zeros_like(th)])
    err = np.linalg.norm(field.tangents[1:-1] - analytic[1:-1], axis=1).max()
    assert err < 1e-3


def test_circle_frames_do_not_twist_about_the_plane_normal():
    path = resample_by_arclength(circle_path(radius=5.0, n=5000), 0.05)
    z = np.array([0.0, 0.0, 1.0])
    # Planar curve: zero twist means each frame vector keeps a constant
    # component along the plane normal, wherever the seed put it.
    field = frames_along(path)
    assert np.ptp(field.normals @ z) < 1e-6
    assert np.ptp(field.binormals @ z) < 1e-6
    # Seeding the roll with the plane normal pins the normal to it outright.
    pinned = frames_along(path, roll_reference=z)
    assert np.abs(pinned.normals @ z - 1.0).max() < 1e-6


def test_helix_twist_about_tangent_is_negligible():
    path = resample_by_arclength(helix_path(), 0.05)
    field = frames_along(path)
    worst = 0.0
    for i in range(len(field) - 1):
        f0 = np.column_stack([field.normals[i], field.binormals[i], field.tangents[i]])
        f1 = np.column_stack(
            [field.normals[i + 1], field.binormals[i + 1], field.tangents[i + 1]]
        )
        step = f1 @ f0.T
        # Rotation vector (sin(angle) * axis) of the step; its component along
        # the mid-tangent is the angular velocity about the wire.
        w = 0.5 * np.array(
            [step[2, 1] - step[1, 2], step[0, 2] - step[2, 0], step[1, 0] - step[0, 1]]
        )
        mid = field.tangents[i] + field.tangents[i + 1]
        worst = max(worst, abs(w @ mid) / np.linalg.norm(mid))
    assert worst < 1e-6


def test_consecutive_frame_rotation_is_small():
    path = resample_by_arclength(helix_path(), 0.05)
    field = frames_along(path)
    for i in range(len(field) - 1):
        cosang = np.clip(field.tangents[i] @ field.tangents[i + 1], -1, 1)
        assert np.arccos(cosang) < 0.2


# ---------------------------------------------------------------- placement


def test_place_frames_anchors_the_landmark():
    path = line_path(length=20.0, n=201)
    frames = place_frames(path, Landmark(frame_index=3, arclength=5.0), 0.5, range(10))
    by_idx = {f.frame_index: f for f in frames}
    assert by_idx[3].arclength == pytest.approx(5.0)
    assert by_idx[0].arclength == pytest.approx(3.5)
    assert by_idx[9].arclength == pytest.approx(8.0)
    assert np.allclose(by_idx[3].translation, [0, 0, 5.0])


def test_place_frames_rotation_layout():
    path = line_path(length=10.0, n=101)
    (frame,) = place_frames(path, Landmark(0, 2.0), 1.0, [0])
    r = frame.rotation
    assert np.allclose(r[:, 2], [0, 0, 1])  # third column is the tangent
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9


def test_place_frames_rejects_out_of_range():
    path = line_path(length=5.0, n=51)
    with pytest.raises(PlacementError) as err:
        place_frames(path, Landmark(0, 0.0), 1.0, range(10))
    assert err.value.frame_indices == [6, 7, 8, 9]


def test_place_frames_monotone_arclengths():
    path = resample_by_arclength(helix_path(), 0.02)
    frames = place_frames(path, Landmark(0, 0.1), 0.11, range(30))
    s = [f.arclength for f in frames]
    assert (np.diff(s) > 0).all()


# ---------------------------------------------------------------- registration


def test_register_on_straight_wire_is_translation():
    path = line_path(length=10.0, n=101)
    frames = place_frames(path, Landmark(0, 0.0), 1.0, range(5))
    uv = np.array([[0.3, -0.2]] * 5)
    pts = register_cloud(uv, np.arange(5), frames)
    # Straight wire along z seeds normal=x, binormal=y.
    assert np.allclose(pts[:, 0], 0.3, atol=1e-12)
    assert np.allclose(pts[:, 1], -0.2, atol=1e-12)
    assert np.allclose(pts[:, 2], np.arange(5.0), atol=1e-12)


def test_register_preserves_in_frame_distances():
    path = resample_by_arclength(helix_path(), 0.02)
    frames = place_frames(path, Landmark(0, 0.5), 0.2, range(8))
    rng = np.random.default_rng(5)
    uv = rng.normal(0, 1.0, (16, 2))
    fi = np.repeat(np.arange(8), 2)
    pts = register_cloud(uv, fi, frames)
    for k in range(0, 16, 2):
        d_plane = np.linalg.norm(uv[k] - uv[k + 1])
        d_world = np.linalg.norm(pts[k] - pts[k + 1])
        assert abs(d_plane - d_world) < 1e-12


def test_register_requires_transforms_for_all_frames():
    path = line_path()
    frames = place_frames(path, Landmark(0, 0.0), 1.0, range(3))
    with pytest.raises(PlacementError):
        register_cloud(np.zeros((1, 2)), np.array([7]), frames)


def test_rigid_rotation_of_the_wire_rotates_the_cloud_rigidly():
    base = resample_by_arclength(helix_path(), 0.02)
    angle = 0.7
    rot = np.array(
        [
            [np.cos(angle), -np.sin(angle), 0.0],
            [np.sin(angle), np.cos(angle), 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    turned = WirePath(base.samples @ rot.T)
    uv = np.random.default_rng(2).normal(0, 0.8, (10, 2))
    fi = np.arange(10)
    # Carry the roll seed along with the rotation so both frame fields agree.
    seed = frames_along(base).normals[0]
    pts_a = register_cloud(uv, fi, place_frames(base, Landmark(0, 0.3), 0.3, range(10)))
    pts_b = register_cloud(
        uv,
        fi,
        place_frames(turned, Landmark(0, 0.3), 0.3, range(10), roll_reference=rot @ seed),
    )
    assert np.abs(pts_b - pts_a @ rot.T).max() < 1e-9
