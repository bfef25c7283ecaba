"""Per-frame strut detection.

Struts reflect strongly and shadow the tissue behind them, so in a grayscale
frame they appear as small bright outlines with dark cores near the lumen.
Detection binarizes a gamma-brightened region of interest, inverts it, and
keeps enclosed dark regions; a descending gamma schedule progressively
brightens dim outline pixels until broken outlines close. Three geometric
filters (contour length, distance to the lumen wall, bright-pixel probe)
remove false positives, and manual patches let an operator fix the remainder.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .raster import (
    BinaryImage,
    DegenerateHistogramError,
    GrayImage,
    PixelRegion,
    binarize,
    connected_regions,
    dilate_mask,
    gamma_correct,
    histogram_cutoff_b,
    otsu_threshold,
)


class DetectionError(ValueError):
    """Raised for invalid detection inputs or configuration."""


class PatchError(DetectionError):
    """Raised when a patch references candidate ids that do not exist."""

    def __init__(self, unknown_ids):
        self.unknown_ids = sorted(unknown_ids)
        ids = ", ".join(str(i) for i in self.unknown_ids)
        super().__init__(f"patch removals reference unknown candidate ids: {ids}")


@dataclass(frozen=True)
class OctFrame:
    """One grayscale pullback frame with its geometry."""

    index: int
    image: GrayImage
    resolution: float
    z_offset: float
    wire_tip: tuple[int, int]

    def __post_init__(self):
        if self.resolution <= 0.0:
            raise DetectionError("resolution must be positive")
        r, c = self.wire_tip
        if not (0 <= r < self.image.height and 0 <= c < self.image.width):
            raise DetectionError("wire_tip outside image bounds")


@dataclass(frozen=True)
class DetectionConfig:
    gamma_schedule: tuple[float, ...] = (0.6, 0.5, 0.4, 0.35)
    min_region_area: int = 50
    contour_min: int = 20
    contour_max: int = 250
    wall_distance_max: float = 40.0
    probe_side: int = 10
    probe_fraction: float = 0.10
    roi_dilation_radius: int = 60
    eccentricity_enabled: bool = False
    eccentricity_max: float = 0.95

    def __post_init__(self):
        if len(self.gamma_schedule) == 0:
            raise DetectionError("gamma schedule must not be empty")
        if any(g <= 0.0 for g in self.gamma_schedule):
            raise DetectionError("gamma exponents must be positive")
        if any(b >= a for a, b in zip(self.gamma_schedule, self.gamma_schedule[1:])):
            raise DetectionError("gamma schedule must be strictly decreasing")
        if self.min_region_area < 1:
            raise DetectionError("min_region_area must be >= 1")
        if not 0 < self.contour_min < self.contour_max:
            raise DetectionError("need 0 < contour_min < contour_max")
        if self.wall_distance_max <= 0.0:
            raise DetectionError("wall_distance_max must be positive")
        if self.probe_side < 1:
            raise DetectionError("probe_side must be >= 1")
        if not 0.0 <= self.probe_fraction <= 1.0:
            raise DetectionError("probe_fraction must lie in [0, 1]")
        if self.roi_dilation_radius < 0:
            raise DetectionError("roi_dilation_radius must be >= 0")


@dataclass(frozen=True)
class RoiFrame:
    """Masked working image plus the lumen geometry the filters need.

    otsu_first_pass is None until the first detection iteration has run; the
    pixel-count filter requires it.
    """

    masked: GrayImage
    lumen_contour: np.ndarray
    lumen_center: tuple[float, float]
    otsu_first_pass: float | None = None
    unusable: bool = False


@dataclass(frozen=True, eq=False)
class CandidateStrut:
    """One candidate region and its audit trail.

    status: "candidate" fresh out of an iteration, then "accepted",
    "rejected" (with reason), or "manual" for operator additions.
    """

    candidate_id: int
    frame_index: int
    iteration: int
    status: str
    centroid_px: tuple[float, float]
    region: PixelRegion | None = None
    reason: str | None = None
    area: int | None = None
    contour_length: int | None = None


@dataclass(frozen=True, eq=False)
class FrameDetections:
    """Per-frame candidates plus the lumen center the ROI step measured.

    lumen_center_px is (row, col); it stays None for unusable frames and for
    detection files written before the field existed.
    """

    frame_index: int
    candidates: tuple[CandidateStrut, ...]
    unusable: bool = False
    lumen_center_px: tuple[float, float] | None = None

    def accepted(self) -> list[CandidateStrut]:
        return [c for c in self.candidates if c.status in ("accepted", "manual")]


def _radial_lumen_contour(bright: np.ndarray, tip: tuple[int, int], n_rays: int = 720):
    """First bright crossing along each radial ray from the wire tip.

    Rays that never hit a bright pixel (shadow sectors, stack ends) get a
    radius interpolated from their angular neighbors, keeping the polygon
    closed. Returns an (n_rays, 2) float array of (row, col), or None when no
    ray hits anything.
    """
    h, w = bright.shape
    tip_r, tip_c = float(tip[0]), float(tip[1])
    angles = 2.0 * np.pi * np.arange(n_rays) / n_rays
    dr = np.sin(angles)
    dc = np.cos(angles)
    max_radius = math.hypot(max(tip_r, h - 1 - tip_r), max(tip_c, w - 1 - tip_c))
    steps = np.arange(1.0, max_radius + 0.5, 0.5)

    rows = tip_r + steps[None, :] * dr[:, None]
    cols = tip_c + steps[None, :] * dc[:, None]
    ri = np.rint(rows).astype(np.int64)
    ci = np.rint(cols).astype(np.int64)
    inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
    hit = np.zeros_like(inside)
    hit[inside] = bright[ri[inside], ci[inside]]

    has_hit = hit.any(axis=1)
    if not has_hit.any():
        return None
    first = np.argmax(hit, axis=1)
    radius = steps[first].astype(np.float64)
    if not has_hit.all():
        known = np.nonzero(has_hit)[0]
        ang_known = angles[known]
        rad_known = radius[known]
        ang_wrapped = np.concatenate([ang_known - 2 * np.pi, ang_known, ang_known + 2 * np.pi])
        rad_wrapped = np.concatenate([rad_known, rad_known, rad_known])
        radius = np.interp(angles, ang_wrapped, rad_wrapped)

    return np.column_stack([tip_r + radius * dr, tip_c + radius * dc])


def _polygon_centroid(poly: np.ndarray) -> tuple[float, float]:
    x, y = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x, -1), np.roll(y, -1)
    cross = x * y1 - x1 * y
    area = 0.5 * cross.sum()
    if abs(area) < 1e-12:
        return float(x.mean()), float(y.mean())
    cx = float(((x + x1) * cross).sum() / (6.0 * area))
    cy = float(((y + y1) * cross).sum() / (6.0 * area))
    return cx, cy


def extract_roi(frame: OctFrame, roi_dilation_radius: int) -> RoiFrame:
    """Mask the frame down to the dilated bright (vessel) area.

    A constant image has no Otsu threshold and no geometry to work with; the
    frame comes back flagged unusable with an all-zero mask.
    """
    center = ((frame.image.height - 1) / 2.0, (frame.image.width - 1) / 2.0)
    try:
        level = otsu_threshold(frame.image)
    except DegenerateHistogramError:
        return RoiFrame(
            masked=GrayImage(np.zeros_like(frame.image.pixels)),
            lumen_contour=np.zeros((0, 2)),
            lumen_center=center,
            unusable=True,
        )
    a_v = binarize(frame.image, level)
    a_roi = dilate_mask(a_v, roi_dilation_radius)
    masked = GrayImage(np.where(a_roi.mask, frame.image.pixels, 0.0))

    contour = _radial_lumen_contour(a_v.mask, frame.wire_tip)
    if contour is None:
        return RoiFrame(
            masked=masked,
            lumen_contour=np.zeros((0, 2)),
            lumen_center=center,
            unusable=True,
        )
    return RoiFrame(
        masked=masked,
        lumen_contour=contour,
        lumen_center=_polygon_centroid(contour),
    )


def _candidate_regions(working: GrayImage, gamma: float, cfg: DetectionConfig):
    """Candidate regions of one gamma pass, plus the Otsu level used.

    Gamma-brightens the dark-to-dim window [0, b], binarizes, inverts, and
    keeps enclosed components: anything touching the image border is open to
    the outside and cannot be a strut core.
    """
    b, _saturated = histogram_cutoff_b(working)
    if b == 0.0:
        # no dark tail to compress; apply the power curve over the full range
        b = 1.0
    corrected = gamma_correct(working, 0.0, b, 0.0, 1.0, gamma)
    try:
        level = otsu_threshold(corrected)
    except DegenerateHistogramError:
        return [], None
    inverted = binarize(corrected, level).inverted()
    h, w = inverted.mask.shape
    regions = []
    for region in connected_regions(inverted, min_area=cfg.min_region_area):
        rows = region.pixels[:, 0]
        cols = region.pixels[:, 1]
        if rows.min() == 0 or cols.min() == 0 or rows.max() == h - 1 or cols.max() == w - 1:
            continue
        regions.append(region)
    return regions, level


def detect_iteration(
    roi: RoiFrame,
    gamma: float,
    cfg: DetectionConfig,
    frame_index: int = -1,
    iteration: int = 0,
) -> list[CandidateStrut]:
    """Enclosed dark regions of one gamma pass, as unfiltered candidates."""
    regions, _level = _candidate_regions(roi.masked, gamma, cfg)
    return [
        CandidateStrut(
            candidate_id=i,
            frame_index=frame_index,
            iteration=iteration,
            status="candidate",
            centroid_px=region.centroid,
            region=region,
            area=region.area,
            contour_length=region.contour_length,
        )
        for i, region in enumerate(regions)
    ]


def filter_contour_length(candidate: CandidateStrut, cfg: DetectionConfig) -> str | None:
    """None to keep, or the rejection reason."""
    n = candidate.region.contour_length
    if cfg.contour_min <= n <= cfg.contour_max:
        return None
    return "contour_length"


def filter_wall_distance(
    candidate: CandidateStrut,
    roi: RoiFrame,
    wire_tip: tuple[int, int],
    max_distance: float = 40.0,
) -> str | None:
    """Reject candidates far from where their sight line meets the lumen wall.

    Casts the ray from the wire tip through the candidate centroid and finds
    its first crossing of the lumen contour; the candidate survives when the
    crossing lies within max_distance pixels of the centroid.
    """
    origin = np.array([float(wire_tip[0]), float(wire_tip[1])])
    target = np.array(candidate.centroid_px, dtype=np.float64)
    d = target - origin
    norm = np.hypot(d[0], d[1])
    if norm < 1e-9:
        return "degenerate_ray"
    d = d / norm

    poly = roi.lumen_contour
    if len(poly) < 2:
        return "no_wall_intersection"
    p = poly
    q = np.roll(poly, -1, axis=0)
    e = q - p
    w_vec = p - origin
    denom = d[0] * e[:, 1] - d[1] * e[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (w_vec[:, 0] * e[:, 1] - w_vec[:, 1] * e[:, 0]) / denom
        u = (w_vec[:, 0] * d[1] - w_vec[:, 1] * d[0]) / denom
    valid = (np.abs(denom) > 1e-12) & (s >= 0.0) & (u >= 0.0) & (u < 1.0)
    if not valid.any():
        return "no_wall_intersection"
    s_hit = s[valid].min()
    hit = origin + s_hit * d
    distance = float(np.hypot(hit[0] - target[0], hit[1] - target[1]))
    if distance <= max_distance:
        return None
    return "wall_distance"


def filter_pixel_count(
    candidate: CandidateStrut, roi: RoiFrame, cfg: DetectionConfig
) -> str | None:
    """Probe for bright pixels between the candidate and the lumen center.

    The probe square has one corner on the candidate centroid and grows into
    the quadrant whose diagonal points at the lumen center. Pixels at or above
    the first-pass Otsu level count as bright; the candidate survives when at
    least probe_fraction of the (in-bounds) square is bright.
    """
    if roi.otsu_first_pass is None:
        raise DetectionError("pixel-count filter needs the first-pass Otsu level")
    h, w = roi.masked.pixels.shape
    cr, cc = candidate.centroid_px
    corner_r = int(round(cr))
    corner_c = int(round(cc))
    dr = 1 if roi.lumen_center[0] >= cr else -1
    dc = 1 if roi.lumen_center[1] >= cc else -1
    r0, r1 = sorted((corner_r, corner_r + dr * (cfg.probe_side - 1)))
    c0, c1 = sorted((corner_c, corner_c + dc * (cfg.probe_side - 1)))
    r0, r1 = max(r0, 0), min(r1, h - 1)
    c0, c1 = max(c0, 0), min(c1, w - 1)
    if r1 < r0 or c1 < c0:
        return "pixel_count"
    window = roi.masked.pixels[r0 : r1 + 1, c0 : c1 + 1]
    count = int((window >= roi.otsu_first_pass).sum())
    if count >= cfg.probe_fraction * window.size:
        return None
    return "pixel_count"


def filter_eccentricity(candidate: CandidateStrut, cfg: DetectionConfig) -> str | None:
    """Optional elongation filter (off by default)."""
    pts = candidate.region.pixels.astype(np.float64)
    if len(pts) < 2:
        return None
    cov = np.cov(pts.T)
    eigvals = np.linalg.eigvalsh(cov)
    lam_small, lam_big = float(eigvals[0]), float(eigvals[1])
    if lam_big <= 0.0:
        return None
    ecc = math.sqrt(max(0.0, 1.0 - lam_small / lam_big))
    if ecc > cfg.eccentricity_max:
        return "eccentricity"
    return None


def _blacken(working: np.ndarray, region: PixelRegion) -> None:
    """Zero the region, its holes, and a 1 px margin around it."""
    h, w = working.shape
    r0 = max(int(region.pixels[:, 0].min()) - 2, 0)
    r1 = min(int(region.pixels[:, 0].max()) + 3, h)
    c0 = max(int(region.pixels[:, 1].min()) - 2, 0)
    c1 = min(int(region.pixels[:, 1].max()) + 3, w)
    local = np.zeros((r1 - r0, c1 - c0), dtype=bool)
    local[region.pixels[:, 0] - r0, region.pixels[:, 1] - c0] = True
    local = ndimage.binary_fill_holes(local)
    local = dilate_mask(BinaryImage(local), 1).mask
    window = working[r0:r1, c0:c1]
    window[local] = 0.0


def detect_frame(frame: OctFrame, cfg: DetectionConfig) -> FrameDetections:
    """Run the full gamma schedule with filtering and blackening.

    Accepted candidates are blackened out of the working image (filled region
    plus a 1 px margin) so later iterations cannot re-detect them. All
    candidates are returned, rejected ones carrying their reason, so the audit
    trail survives into the detections file.
    """
    roi = extract_roi(frame, cfg.roi_dilation_radius)
    if roi.unusable:
        return FrameDetections(frame.index, (), unusable=True)

    working = roi.masked.pixels.copy()
    otsu_first: float | None = None
    out: list[CandidateStrut] = []
    next_id = 0
    for iteration, gamma in enumerate(cfg.gamma_schedule):
        regions, level = _candidate_regions(GrayImage(working), gamma, cfg)
        if iteration == 0:
            otsu_first = level
        if not regions:
            continue
        filter_roi = replace(
            roi, masked=GrayImage(working.copy()), otsu_first_pass=otsu_first
        )
        for region in regions:
            candidate = CandidateStrut(
                candidate_id=next_id,
                frame_index=frame.index,
                iteration=iteration,
                status="candidate",
                centroid_px=region.centroid,
                region=region,
                area=region.area,
                contour_length=region.contour_length,
            )
            next_id += 1
            reason = filter_contour_length(candidate, cfg)
            if reason is None:
                reason = filter_wall_distance(
                    candidate, filter_roi, frame.wire_tip, cfg.wall_distance_max
                )
            if reason is None:
                reason = filter_pixel_count(candidate, filter_roi, cfg)
            if reason is None and cfg.eccentricity_enabled:
                reason = filter_eccentricity(candidate, cfg)
            if reason is None:
                out.append(replace(candidate, status="accepted"))
                _blacken(working, region)
            else:
                out.append(replace(candidate, status="rejected", reason=reason))
    return FrameDetections(frame.index, tuple(out), lumen_center_px=roi.lumen_center)


def detect_stack(frames, cfg: DetectionConfig) -> list[FrameDetections]:
    return [detect_frame(frame, cfg) for frame in frames]


def apply_patch(result: FrameDetections, patch: dict) -> FrameDetections:
    """Apply operator additions and removals to one frame's detections.

    Additions become manual candidates at the clicked point (no contour);
    removals flip existing candidates to rejected(manual). Reapplying the same
    patch is a no-op: manual points are matched exactly and removals of
    already-removed candidates do not change state.
    """
    additions = [tuple(map(float, p)) for p in patch.get("additions", [])]
    removals = set(patch.get("removals", []))
    if not additions and not removals:
        return result

    known = {c.candidate_id for c in result.candidates}
    unknown = removals - known
    if unknown:
        raise PatchError(unknown)

    candidates: list[CandidateStrut] = []
    manual_points = set()
    for c in result.candidates:
        if c.candidate_id in removals and not (c.status == "rejected" and c.reason == "manual"):
            c = replace(c, status="rejected", reason="manual")
        if c.status == "manual":
            manual_points.add(c.centroid_px)
        candidates.append(c)

    next_id = max(known) + 1 if known else 0
    for point in additions:
        if point in manual_points:
            continue
        candidates.append(
            CandidateStrut(
                candidate_id=next_id,
                frame_index=result.frame_index,
                iteration=-1,
                status="manual",
                centroid_px=point,
            )
        )
        manual_points.add(point)
        next_id += 1
    return FrameDetections(
        result.frame_index, tuple(candidates), result.unusable, result.lumen_center_px
    )


def load_stack(manifest_path) -> tuple[dict, list[OctFrame]]:
    """Read a stack manifest and its frame images.

    The manifest carries resolution (mm/px), spacing (mm), frame image paths,
    per-frame wire tips, and an optional [row, col, height, width] crop that
    strips non-tomographic side panels. Wire tips are given in cropped
    coordinates.
    """
    from PIL import Image

    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    for key in ("resolution", "spacing", "frames", "wire_tips"):
        if key not in manifest:
            raise DetectionError(f"stack manifest missing '{key}'")
    if len(manifest["wire_tips"]) != len(manifest["frames"]):
        raise DetectionError("manifest needs one wire_tip per frame")
    crop = manifest.get("crop")
    base = manifest_path.parent
    frames = []
    for i, name in enumerate(manifest["frames"]):
        with Image.open(base / name) as img:
            pixels = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
        if crop is not None:
            r0, c0, height, width = crop
            pixels = pixels[r0 : r0 + height, c0 : c0 + width]
        tip = manifest["wire_tips"][i]
        frames.append(
            OctFrame(
                index=i,
                image=GrayImage(pixels),
                resolution=float(manifest["resolution"]),
                z_offset=i * float(manifest["spacing"]),
                wire_tip=(int(tip[0]), int(tip[1])),
            )
        )
    return manifest, frames


def detections_to_dict(results, resolution: float, image_shape) -> dict:
    """JSON form of the detection results, centroids in px and mm.

    mm coordinates put the origin at the image center: x right along columns,
    y down along rows, matching the 3-d lift used downstream.
    """
    h, w = image_shape
    center_r = (h - 1) / 2.0
    center_c = (w - 1) / 2.0
    frames = []
    for fr in results:
        cands = []
        for c in fr.candidates:
            r, col = c.centroid_px
            cands.append(
                {
                    "id": c.candidate_id,
                    "status": c.status,
                    "reason": c.reason,
                    "iteration": c.iteration,
                    "centroid_px": [r, col],
                    "centroid_mm": [(col - center_c) * resolution, (r - center_r) * resolution],
                    "area": c.area,
                    "contour_length": c.contour_length,
                }
            )
        frames.append(
            {
                "frame": fr.frame_index,
                "unusable": fr.unusable,
                "lumen_center_px": list(fr.lumen_center_px)
                if fr.lumen_center_px is not None
                else None,
                "candidates": cands,
            }
        )
    return {
        "version": 1,
        "resolution": resolution,
        "image_size": [h, w],
        "frames": frames,
    }


def save_detections(path, results, resolution: float, image_shape) -> dict:
    payload = detections_to_dict(results, resolution, image_shape)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return payload


def load_detections(path) -> tuple[dict, list[FrameDetections]]:
    """Rehydrate detection results; regions are not persisted, centroids are."""
    with open(path) as fh:
        payload = json.load(fh)
    results = []
    for fr in payload["frames"]:
        candidates = tuple(
            CandidateStrut(
                candidate_id=c["id"],
                frame_index=fr["frame"],
                iteration=c["iteration"],
                status=c["status"],
                centroid_px=(float(c["centroid_px"][0]), float(c["centroid_px"][1])),
                reason=c.get("reason"),
                area=c.get("area"),
                contour_length=c.get("contour_length"),
            )
            for c in fr["candidates"]
        )
        center = fr.get("lumen_center_px")
        results.append(
            FrameDetections(
                fr["frame"],
                candidates,
                fr.get("unusable", False),
                (float(center[0]), float(center[1])) if center is not None else None,
            )
        )
    return payload, results
