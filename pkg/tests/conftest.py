import numpy as np
import pytest

from stentrecon import phantom as ph
from stentrecon.detection import DetectionConfig, OctFrame, detect_stack
from stentrecon.raster import GrayImage


def stack_to_frames(stack):
    """Wrap phantom frames as detection inputs."""
    return [
        OctFrame(
            index=i,
            image=GrayImage(frame.mask.astype(np.float64)),
            resolution=stack.resolution,
            z_offset=i * stack.spacing,
            wire_tip=stack.wire_tips[i],
        )
        for i, frame in enumerate(stack.frames)
    ]


def score_detections(stack, results, radius=10.0):
    """Precision and recall of accepted detections against stack truth.

    A visible (non-occluded) truth counts as recalled when an accepted
    centroid lies within the match radius. An accepted detection counts as
    a true positive when any truth entry (occluded ones included) is within
    the radius: a strut half-covered by the shadow is still a real strut.
    """
    by_frame: dict[int, list] = {}
    for entry in stack.truth:
        by_frame.setdefault(entry.frame_index, []).append(entry)

    visible_total = 0
    visible_hit = 0
    accepted_total = 0
    accepted_hit = 0
    for fr in results:
        truths = by_frame.get(fr.frame_index, [])
        centers = np.array([t.center_px for t in truths]).reshape(-1, 2)
        accepted = [np.array(c.centroid_px) for c in fr.accepted()]
        for truth, center in zip(truths, centers):
            if truth.occluded:
                continue
            visible_total += 1
            if any(np.hypot(*(a - center)) <= radius for a in accepted):
                visible_hit += 1
        for a in accepted:
            accepted_total += 1
            if len(centers) and np.hypot(*(centers - a).T).min() <= radius:
                accepted_hit += 1
    precision = accepted_hit / accepted_total if accepted_total else 0.0
    recall = visible_hit / visible_total if visible_total else 0.0
    return precision, recall


@pytest.fixture(scope="session")
def reference_bundle():
    """Deformed reference phantom at fine (0.1 mm) frame spacing."""
    return ph.reference_phantom(spacing=0.1)


@pytest.fixture(scope="session")
def reference_detections(reference_bundle):
    _design, stack = reference_bundle
    return detect_stack(stack_to_frames(stack), DetectionConfig())
