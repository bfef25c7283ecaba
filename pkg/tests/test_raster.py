"""Raster primitives against brute-force oracles."""
import numpy as np
import pytest

from stentrecon import raster
from stentrecon.raster import (
    BinaryImage,
    DegenerateHistogramError,
    GrayImage,
    RasterParameterError,
    binarize,
    connected_regions,
    dilate_mask,
    gamma_correct,
    histogram256,
    histogram_cutoff_b,
    otsu_threshold,
    to_grayscale,
    trace_boundary,
)


# ---------------------------------------------------------------- oracles


def otsu_by_exhaustive_scan(image: GrayImage) -> float:
    """Try every split level, recomputing both class statistics from scratch."""
    levels = raster.quantize_levels(image).ravel()
    total = levels.size
    best_t, best_var = None, -1.0
    for t in range(256):
        low = levels[levels <= t]
        high = levels[levels > t]
        if low.size == 0 or high.size == 0:
            continue
        w0 = low.size / total
        w1 = high.size / total
        var = w0 * w1 * (low.mean() - high.mean()) ** 2
        if var > best_var + 1e-12:
            best_var = var
            best_t = t
    assert best_t is not None
    return best_t / 255.0


def flood_fill_by_bfs(mask: np.ndarray) -> list[set]:
    """Label 8-connected components with an explicit breadth-first queue."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for r0 in range(h):
        for c0 in range(w):
            if not mask[r0, c0] or seen[r0, c0]:
                continue
            comp = set()
            queue = [(r0, c0)]
            seen[r0, c0] = True
            while queue:
                r, c = queue.pop()
                comp.add((r, c))
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                            seen[rr, cc] = True
                            queue.append((rr, cc))
            comps.append(comp)
    return comps


def dilate_by_neighborhood_scan(mask: np.ndarray, radius: int) -> np.ndarray:
    """Set each output pixel by scanning its full Chebyshev neighborhood."""
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for r in range(h):
        for c in range(w):
            r0, r1 = max(0, r - radius), min(h, r + radius + 1)
            c0, c1 = max(0, c - radius), min(w, c + radius + 1)
            out[r, c] = mask[r0:r1, c0:c1].any()
    return out


# ---------------------------------------------------------------- grayscale


def test_luma_of_pure_red():
    rgb = np.zeros((2, 2, 3))
    rgb[..., 0] = 1.0
    gray = to_grayscale(rgb)
    assert gray.pixels == pytest.approx(0.2989)


def test_luma_of_white_is_weight_sum():
    # The BT.601 triple sums to 0.9999, not exactly 1.
    rgb = np.ones((3, 3, 3))
    gray = to_grayscale(rgb)
    assert gray.pixels == pytest.approx(0.9999)


def test_grayscale_rejects_bad_shape():
    with pytest.raises(RasterParameterError):
        to_grayscale(np.zeros((4, 4)))


def test_gray_image_rejects_out_of_range():
    with pytest.raises(RasterParameterError):
        GrayImage(np.full((2, 2), 1.5))


# ---------------------------------------------------------------- histogram


def test_histogram_sums_to_pixel_count():
    rng = np.random.default_rng(7)
    img = GrayImage(rng.random((31, 17)))
    hist = histogram256(img)
    assert hist.sum() == 31 * 17
    assert hist.shape == (256,)


def test_histogram_cutoff_picks_first_sparse_level():
    # Levels 0..154 populated with >= 20 pixels each, level 155 with only 5.
    values = []
    for level in range(155):
        values.extend([level / 255.0] * 20)
    values.extend([155 / 255.0] * 5)
    values.extend([0.0] * (56 * 56 - len(values)))
    img = GrayImage(np.array(values).reshape(56, 56))
    b, saturated = histogram_cutoff_b(img, count_threshold=20)
    assert b == pytest.approx(155 / 256)
    assert not saturated


def test_histogram_cutoff_saturates_when_every_level_is_populated():
    values = np.repeat(np.arange(256) / 255.0, 20)
    img = GrayImage(values.reshape(64, 80))
    b, saturated = histogram_cutoff_b(img, count_threshold=20)
    assert b == 1.0
    assert saturated


# ---------------------------------------------------------------- otsu


def test_otsu_separates_bimodal_halves():
    img = GrayImage(np.array([[0.0] * 8, [1.0] * 8] * 4))
    t = otsu_threshold(img)
    fg = binarize(img, t)
    assert fg.mask.sum() == 32
    assert (img.pixels[fg.mask] == 1.0).all()


def test_otsu_constant_image_raises():
    with pytest.raises(DegenerateHistogramError):
        otsu_threshold(GrayImage(np.full((8, 8), 0.25)))


def test_otsu_matches_exhaustive_scan_on_random_images():
    rng = np.random.default_rng(1234)
    for _ in range(25):
        img = GrayImage(rng.random((64, 64)))
        assert otsu_threshold(img) == otsu_by_exhaustive_scan(img)


def test_otsu_matches_exhaustive_scan_on_clustered_images():
    # Blobby bimodal images closer to the real use (two gaussian-ish modes).
    rng = np.random.default_rng(99)
    for _ in range(25):
        dark = rng.normal(0.2, 0.05, size=600)
        bright = rng.normal(0.75, 0.08, size=424)
        img = GrayImage(np.clip(np.concatenate([dark, bright]), 0, 1).reshape(32, 32))
        assert otsu_threshold(img) == otsu_by_exhaustive_scan(img)


# ---------------------------------------------------------------- gamma


def test_gamma_closed_form_value():
    img = GrayImage(np.full((2, 2), 0.16))
    out = gamma_correct(img, a=0.0, b=0.64, c=0.0, d=1.0, gamma=0.5)
    assert out.pixels == pytest.approx(0.5)


def test_gamma_clamps_outside_the_input_window():
    img = GrayImage(np.array([[0.05, 0.9]]))
    out = gamma_correct(img, a=0.1, b=0.8, c=0.0, d=1.0, gamma=0.7)
    assert out.pixels[0, 0] == pytest.approx(0.0)
    assert out.pixels[0, 1] == pytest.approx(1.0)


def test_gamma_identity_when_gamma_is_one():
    rng = np.random.default_rng(3)
    img = GrayImage(rng.random((9, 9)))
    out = gamma_correct(img, a=0.0, b=1.0, c=0.0, d=1.0, gamma=1.0)
    assert np.allclose(out.pixels, img.pixels)


def test_gamma_monotone_in_the_window():
    xs = GrayImage(np.linspace(0.0, 1.0, 101).reshape(1, -1))
    out = gamma_correct(xs, a=0.0, b=1.0, c=0.0, d=1.0, gamma=0.4)
    assert (np.diff(out.pixels[0]) >= 0).all()


def test_gamma_parameter_errors():
    img = GrayImage(np.zeros((2, 2)))
    with pytest.raises(RasterParameterError):
        gamma_correct(img, a=0.0, b=1.0, c=0.0, d=1.0, gamma=0.0)
    with pytest.raises(RasterParameterError):
        gamma_correct(img, a=0.5, b=0.5, c=0.0, d=1.0, gamma=0.5)


# ---------------------------------------------------------------- dilation


def test_dilate_matches_neighborhood_scan():
    rng = np.random.default_rng(42)
    for radius in (1, 2, 3):
        mask = rng.random((32, 32)) < 0.08
        ours = dilate_mask(BinaryImage(mask), radius).mask
        oracle = dilate_by_neighborhood_scan(mask, radius)
        assert (ours == oracle).all()


def test_dilate_radius_zero_is_identity():
    rng = np.random.default_rng(5)
    mask = rng.random((16, 16)) < 0.2
    out = dilate_mask(BinaryImage(mask), 0).mask
    assert (out == mask).all()


def test_dilate_single_pixel_makes_a_square():
    mask = np.zeros((9, 9), dtype=bool)
    mask[4, 4] = True
    out = dilate_mask(BinaryImage(mask), 2).mask
    assert out.sum() == 25
    assert out[2:7, 2:7].all()


def test_dilate_rejects_negative_radius():
    with pytest.raises(RasterParameterError):
        dilate_mask(BinaryImage(np.zeros((2, 2), dtype=bool)), -1)


# ---------------------------------------------------------------- components


def as_pixel_sets(regions):
    return [set(map(tuple, region.pixels)) for region in regions]


def test_components_match_bfs_oracle_on_random_masks():
    rng = np.random.default_rng(2024)
    for density in (0.2, 0.45, 0.7):
        mask = rng.random((40, 40)) < density
        ours = as_pixel_sets(connected_regions(BinaryImage(mask)))
        oracle = flood_fill_by_bfs(mask)
        assert sorted(map(sorted, ours)) == sorted(map(sorted, oracle))


def test_components_diagonal_pixels_merge():
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 0] = mask[1, 1] = mask[2, 2] = True
    regions = connected_regions(BinaryImage(mask))
    assert len(regions) == 1
    assert regions[0].area == 3


def test_components_min_area_discards_small():
    mask = np.zeros((10, 10), dtype=bool)
    mask[0:2, 0:2] = True  # area 4
    mask[6:9, 6:9] = True  # area 9
    regions = connected_regions(BinaryImage(mask), min_area=5)
    assert len(regions) == 1
    assert regions[0].area == 9


def test_components_union_covers_mask():
    rng = np.random.default_rng(77)
    mask = rng.random((30, 30)) < 0.35
    regions = connected_regions(BinaryImage(mask))
    union = set()
    for s in as_pixel_sets(regions):
        assert not (union & s), "components must be disjoint"
        union |= s
    assert union == set(map(tuple, np.argwhere(mask)))


def test_component_centroid_is_pixel_mean():
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:5, 3:7] = True
    region = connected_regions(BinaryImage(mask))[0]
    assert region.centroid == pytest.approx((3.0, 4.5))


# ---------------------------------------------------------------- contours


def test_rectangle_contour_length():
    # A w x h solid block has a boundary chain of 2w + 2h - 4 pixels.
    for w, h in [(20, 22), (5, 5), (2, 3)]:
        mask = np.zeros((h + 4, w + 4), dtype=bool)
        mask[2 : 2 + h, 2 : 2 + w] = True
        region = connected_regions(BinaryImage(mask))[0]
        assert region.contour_length == 2 * w + 2 * h - 4


def test_contour_pixels_are_boundary_members():
    blob = np.zeros((20, 20), dtype=bool)
    blob[4:15, 5:16] = True
    blob[8:12, 2:6] = True
    region = connected_regions(BinaryImage(blob))[0]
    pixel_set = set(map(tuple, region.pixels))
    for r, c in region.contour:
        assert (r, c) in pixel_set
        neighborhood = [
            (r + dr, c + dc)
            for dr in (-1, 0, 1)
            for dc in (-1, 0, 1)
            if (dr, dc) != (0, 0)
        ]
        assert any(p not in pixel_set for p in neighborhood), "contour pixel must touch background"


def test_single_pixel_contour():
    mask = np.zeros((3, 3), dtype=bool)
    mask[1, 1] = True
    assert trace_boundary(mask).tolist() == [[1, 1]]


def test_contour_closes_back_to_start():
    mask = np.zeros((12, 12), dtype=bool)
    mask[3:9, 3:9] = True
    chain = trace_boundary(mask)
    first, last = chain[0], chain[-1]
    assert max(abs(first[0] - last[0]), abs(first[1] - last[1])) <= 1
