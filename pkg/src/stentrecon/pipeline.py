"""Stage runner: phantom, detect, flatten, register, skeleton, mesh, validate.

Each stage reads artifacts from the project's output directory (or inputs
named in the manifest), writes its own artifacts, and records a checksum of
inputs and outputs in the manifest. Rerunning a stage whose inputs and
outputs are unchanged short-circuits with a "cached" notice. Artifacts are
deterministic: running a stage twice on the same inputs produces byte
identical files. Timing reports under reports/ are the one exception; they
are logs, not artifacts.

Artifact layout under output_dir:

    phantom/stack.json, phantom/frames/*.png   synthetic pullback
    phantom/annotations.json                   operator-style truth lines
    phantom/truth.json                         full ground truth
    phantom/solid.stl, phantom/wire.json       reference solid and wire path
    detections.json                            per-frame candidate struts
    flattened.json                             2-d unrolled cloud
    registered.json                            3-d positions on the wire
    classified.json, skeleton.json             pattern groups and splines
    mesh.stl, mesh.json                        swept surface and its stats
    validation.json, validation.txt            overlap metrics
    reports/<stage>.json                       durations and counts
"""

from __future__ import annotations

import json
import math
import os
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import phantom as ph
from .detection import DetectionConfig, detect_stack, detections_to_dict, load_detections, load_stack
from .manifest import (
    DependencyError,
    InputError,
    ProjectManifest,
    ValidationFailure,
    config_digest,
    sha256_bytes,
    sha256_file,
    write_json_atomic,
)
from .metrics import accuracy, format_table, mesh_volume, voxel_overlap
from .skeleton import DanglingBeamWarning, build_skeleton, load_skeleton, skeleton_to_dict
from .splines import fit_natural_spline
from .stl_io import read_stl, write_stl
from .surface import (
    StentAssembler,
    axis_from_curve,
    connected_triangle_components,
    is_closed_manifold,
    snap_vertices,
    straight_z_axis,
)
from .topology import (
    apply_ring_fills,
    classify_points,
    curate_classified,
    fill_ring_gaps,
    flatten,
    flattened_to_dict,
    lift_to_3d,
    load_annotations,
    load_flattened,
    wrap_ring_groups,
)
from .wirepath import Landmark, WirePath, place_frames, register_cloud

STAGES = ("phantom", "detect", "flatten", "register", "skeleton", "mesh", "validate")


@dataclass(frozen=True)
class StageResult:
    stage: str
    cached: bool
    seconds: float
    outputs: tuple[str, ...]
    notes: dict


def _phantom_config(m: ProjectManifest) -> dict:
    cfg = m.section("phantom")
    allowed = {
        "spacing",
        "resolution",
        "image_size",
        "twist_deg",
        "bend_deg",
        "sections_per_curve",
        "sector_width",
        "drift_per_frame",
        "start_angle",
        "n_rings",
    }
    unknown = set(cfg) - allowed
    if unknown:
        raise InputError(f"unknown phantom keys: {', '.join(sorted(unknown))}")
    if "spacing" not in cfg:
        raise InputError("phantom section needs 'spacing' (mm between frames)")
    return cfg


def _require(m: ProjectManifest, stage: str, path: Path, producer: str) -> Path:
    if not path.exists():
        raise DependencyError(stage, producer)
    return path


def _require_input(path: Path, what: str) -> Path:
    if not path.exists():
        raise InputError(f"{what} not found: {path}")
    return path


def _stack_inputs(m: ProjectManifest, stage: str) -> list[Path]:
    """The stack manifest plus every frame image it references."""
    stack_path = m.stack_manifest_path
    if not stack_path.exists():
        if "phantom" in m.data:
            raise DependencyError(stage, "phantom")
        raise InputError(f"stack manifest not found: {stack_path}")
    with open(stack_path) as fh:
        stack = json.load(fh)
    files = [stack_path]
    for name in stack.get("frames", []):
        files.append(_require_input(stack_path.parent / name, "frame image"))
    return files


def _load_wire(m: ProjectManifest, stage: str) -> np.ndarray:
    path = m.wire_path_file
    if not path.exists():
        if "phantom" in m.data and path == m.artifact("phantom", "wire.json"):
            raise DependencyError(stage, "phantom")
        raise InputError(f"wire path file not found: {path}")
    text = path.read_text()
    try:
        payload = json.loads(text)
        samples = payload["samples"] if isinstance(payload, dict) else payload
    except json.JSONDecodeError:
        try:
            samples = np.loadtxt(path, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise InputError(f"wire path file is neither JSON nor CSV: {exc}") from None
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != 3 or len(samples) < 2:
        raise InputError("wire path must be an ordered list of x,y,z mm triples")
    return samples


def _annotation_file(m: ProjectManifest, stage: str) -> Path:
    path = m.annotation_path
    if not path.exists():
        if "phantom" in m.data and path == m.artifact("phantom", "annotations.json"):
            raise DependencyError(stage, "phantom")
        raise InputError(f"annotation file not found: {path}")
    return path


# -- stage bodies: each returns (relative output paths, notes) ---------------


def _run_phantom(m: ProjectManifest):
    cfg = _phantom_config(m)
    kwargs = {k: v for k, v in cfg.items() if k != "n_rings"}
    if "n_rings" in cfg:
        kwargs["spec"] = ph.StentDesignSpec(n_rings=int(cfg["n_rings"]))
    design, stack = ph.reference_phantom(**kwargs)

    outdir = m.artifact("phantom")
    outdir.mkdir(parents=True, exist_ok=True)
    stack_manifest = ph.export_stack(stack, outdir)
    ph.export_annotations(stack, design, outdir / "annotations.json")
    ph.export_truth(stack, design, outdir / "truth.json")
    write_stl(stack.solid, outdir / "solid.stl")
    write_json_atomic(
        outdir / "wire.json",
        {"version": 1, "samples": stack.centerline.samples.tolist()},
    )

    outputs = ["phantom/stack.json", "phantom/annotations.json", "phantom/truth.json",
               "phantom/solid.stl", "phantom/wire.json"]
    outputs += [f"phantom/{name}" for name in stack_manifest["frames"]]
    notes = {
        "frames": len(stack.frames),
        "truth_entries": len(stack.truth),
        "exact_volume_mm3": stack.exact_volume,
    }
    return outputs, notes


def _run_detect(m: ProjectManifest):
    stack_path = m.stack_manifest_path
    _stack_inputs(m, "detect")
    _, frames = load_stack(stack_path)
    if not frames:
        raise InputError("stack has no frames")
    cfg_dict = m.section("detection")
    try:
        cfg = DetectionConfig(**cfg_dict)
    except TypeError as exc:
        raise InputError(f"bad detection config: {exc}") from None
    results = detect_stack(frames, cfg)
    resolution, _ = m.stack_geometry()
    payload = detections_to_dict(results, resolution, frames[0].image.pixels.shape)
    write_json_atomic(m.artifact("detections.json"), payload)

    accepted = sum(len(fr.accepted()) for fr in results)
    rejected = sum(
        1 for fr in results for c in fr.candidates if c.status == "rejected"
    )
    notes = {
        "frames": len(results),
        "unusable_frames": sum(1 for fr in results if fr.unusable),
        "accepted": accepted,
        "rejected": rejected,
    }
    return ["detections.json"], notes


def _run_flatten(m: ProjectManifest):
    det_path = _require(m, "flatten", m.artifact("detections.json"), "detect")
    payload, results = load_detections(det_path)
    resolution, spacing = m.stack_geometry()
    cloud = lift_to_3d(
        results,
        {"resolution": payload.get("resolution", resolution), "spacing": spacing},
        payload["image_size"],
    )
    if not cloud:
        raise InputError("no accepted struts to flatten; patch detections first")
    flat = flatten(cloud)
    doc = flattened_to_dict(cloud, flat)
    write_json_atomic(m.artifact("flattened.json"), doc)
    notes = {"points": len(flat)}
    return ["flattened.json"], notes


def _run_register(m: ProjectManifest):
    det_path = _require(m, "register", m.artifact("detections.json"), "detect")
    flat_path = _require(m, "register", m.artifact("flattened.json"), "flatten")
    samples = _load_wire(m, "register")
    payload, results = load_detections(det_path)
    cloud, _ = load_flattened(flat_path)
    resolution, spacing = m.stack_geometry()
    h, w = payload["image_size"]
    center_r = (h - 1) / 2.0
    center_c = (w - 1) / 2.0

    wire = WirePath(samples)
    frame_ids = sorted(
        {p.frame_index for p in cloud}
        | {fr.frame_index for fr in results if fr.lumen_center_px is not None}
    )
    landmark = Landmark(*m.landmark)
    direction = int(m.get("pullback_direction"))
    transforms = place_frames(wire, landmark, spacing, frame_ids, direction=direction)

    inplane = np.array([[p.position[0], p.position[1]] for p in cloud])
    frames = [p.frame_index for p in cloud]
    positions = register_cloud(inplane, frames, transforms)

    lumen_frames = []
    lumen_uv = []
    for fr in results:
        if fr.lumen_center_px is None:
            continue
        r, c = fr.lumen_center_px
        lumen_frames.append(fr.frame_index)
        lumen_uv.append([(c - center_c) * resolution, (r - center_r) * resolution])
    lumen_axis = (
        register_cloud(np.asarray(lumen_uv), lumen_frames, transforms)
        if lumen_frames
        else np.zeros((0, 3))
    )

    doc = {
        "version": 1,
        "spacing": spacing,
        "positions": positions.tolist(),
        "lumen_axis": lumen_axis.tolist(),
        "lumen_frames": lumen_frames,
        "arclengths": {str(t.frame_index): t.arclength for t in transforms},
    }
    write_json_atomic(m.artifact("registered.json"), doc)
    notes = {"points": len(positions), "lumen_frames": len(lumen_frames)}
    return ["registered.json"], notes


def _run_skeleton(m: ProjectManifest):
    flat_path = _require(m, "skeleton", m.artifact("flattened.json"), "flatten")
    reg_path = _require(m, "skeleton", m.artifact("registered.json"), "register")
    ann_path = _annotation_file(m, "skeleton")

    cloud, flat = load_flattened(flat_path)
    with open(reg_path) as fh:
        registered = json.load(fh)
    positions = np.asarray(registered["positions"], dtype=np.float64)
    if len(positions) != len(flat):
        raise InputError(
            "registered.json does not match flattened.json; rerun register"
        )
    lines = load_annotations(ann_path)
    radius = float(m.get("search_radius"))
    tie = float(m.get("junction_tie_mm"))
    _, spacing = m.stack_geometry()
    classified = classify_points(flat, lines, search_radius=radius)
    classified = curate_classified(classified, lines, tie_mm=tie)

    # Occlusion can blank a whole sector of a ring; the annotation line
    # still knows the crown pattern there, so synthesize the missing
    # members on the line and register them like any detected point.
    known_frames = {int(k) for k in registered["arclengths"]}
    fills = [
        f
        for f in fill_ring_gaps(classified, lines, spacing, radius)
        if f.frame_index in known_frames
    ]
    fill_refs: dict = {}
    if fills:
        classified, fill_refs = apply_ring_fills(classified, fills)
        samples = _load_wire(m, "skeleton")
        transforms = place_frames(
            WirePath(samples),
            Landmark(*m.landmark),
            spacing,
            sorted(known_frames),
            direction=int(m.get("pullback_direction")),
        )
        com = np.array([[p.position[0], p.position[1]] for p in cloud]).mean(axis=0)
        fill_xy = np.array(
            [
                [
                    com[0] + f.radius * math.cos(f.theta),
                    com[1] + f.radius * math.sin(f.theta),
                ]
                for f in fills
            ]
        )
        fill_positions = register_cloud(
            fill_xy, [f.frame_index for f in fills], transforms
        )
        positions = np.vstack([positions, fill_positions])
    classified = wrap_ring_groups(classified)

    axis_samples = np.asarray(registered.get("lumen_axis", []), dtype=np.float64)
    lumen_axis = axis_samples if len(axis_samples) >= 2 else None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DanglingBeamWarning)
        skeleton = build_skeleton(
            classified,
            positions,
            lumen_axis=lumen_axis,
            beam_parameters=str(m.get("beam_parameters")),
        )
    dangling = [str(w.message) for w in caught if isinstance(w.message, DanglingBeamWarning)]

    write_json_atomic(m.artifact("skeleton.json"), skeleton_to_dict(skeleton))
    audit = {
        "version": 1,
        "search_radius": radius,
        "junction_tie_mm": tie,
        "groups": {key: list(refs) for key, refs in classified.groups.items()},
        "assignments": [sorted(kinds) for kinds in classified.assignments],
        "junctions": [i for i, flag in enumerate(classified.junction_flags) if flag],
        "unassigned": list(classified.unassigned),
        "filled": {key: list(refs) for key, refs in sorted(fill_refs.items())},
    }
    write_json_atomic(m.artifact("classified.json"), audit)
    notes = {
        "rings": len(skeleton.ring_keys),
        "beams": len(skeleton.beam_keys),
        "junctions": len(skeleton.junctions),
        "unassigned": len(classified.unassigned),
        "filled": sum(len(refs) for refs in fill_refs.values()),
        "dangling": dangling,
    }
    return ["skeleton.json", "classified.json"], notes


def _run_mesh(m: ProjectManifest):
    skel_path = _require(m, "mesh", m.artifact("skeleton.json"), "skeleton")
    skeleton = load_skeleton(skel_path)
    cfg = m.section("mesh")
    ring_dims = tuple(cfg.get("ring_dims", (0.15, 0.15)))
    beam_dims = tuple(cfg.get("beam_dims", (0.20, 0.15)))
    sections = int(cfg.get("sections_per_curve", m.get("sections_per_curve")))

    if skeleton.lumen_axis is not None and len(skeleton.lumen_axis) >= 2:
        axis_curve = fit_natural_spline(np.asarray(skeleton.lumen_axis))
        lumen_axis = axis_from_curve(axis_curve)
    else:
        knots = np.vstack([c.points for c in skeleton.rings])
        lumen_axis = straight_z_axis(knots)

    assembler = StentAssembler(
        lumen_axis, ring_dims=ring_dims, beam_dims=beam_dims, sections_per_curve=sections
    )
    for key in skeleton.ring_keys:
        assembler.add_ring(int(key.split(":")[1]), skeleton.ring(key))
    ends: dict[str, dict] = {}
    for rec in skeleton.junctions:
        ends.setdefault(rec.beam_key, {})[rec.end] = rec
    for key in skeleton.beam_keys:
        pair = ends.get(key, {})
        if "start" not in pair or "end" not in pair:
            raise InputError(f"beam '{key}' lacks junctions at both ends")
        start = pair["start"]
        end = pair["end"]
        assembler.add_beam(
            int(key.split(":")[1]),
            skeleton.beam(key),
            (int(start.ring_key.split(":")[1]), start.ring_t),
            (int(end.ring_key.split(":")[1]), end.ring_t),
        )
    mesh = assembler.finalize()

    write_stl(mesh, m.artifact("mesh.stl"))
    stats = {
        "version": 1,
        "vertices": int(len(mesh.vertices)),
        "triangles": int(len(mesh.triangles)),
        "watertight": bool(is_closed_manifold(mesh)),
        "components": len(connected_triangle_components(mesh)),
        "volume_mm3": mesh_volume(mesh),
    }
    write_json_atomic(m.artifact("mesh.json"), stats)
    notes = dict(stats)
    notes.pop("version")
    return ["mesh.stl", "mesh.json"], notes


def _reference_mesh_path(m: ProjectManifest, stage: str) -> Path:
    if "reference_mesh" in m.data:
        return _require_input(m.resolve(m.data["reference_mesh"]), "reference mesh")
    if "phantom" in m.data:
        return _require(m, stage, m.artifact("phantom", "solid.stl"), "phantom")
    raise InputError("validation needs 'reference_mesh' or a phantom section")


def _run_validate(m: ProjectManifest):
    mesh_path = _require(m, "validate", m.artifact("mesh.stl"), "mesh")
    ref_path = _reference_mesh_path(m, "validate")
    # STL stores three loose corners per facet; weld them back into a
    # shared-vertex mesh so the parity cast sees closed surfaces.
    recon = snap_vertices(read_stl(mesh_path))
    reference = snap_vertices(read_stl(ref_path))
    voxel = float(m.get("voxel_size"))
    _, spacing = m.stack_geometry()
    v_r, v_p, v_o = voxel_overlap(recon, reference, voxel)
    report = accuracy(v_r, v_p, v_o, voxel_size=voxel, spacing=spacing)

    doc = dict(report.to_dict())
    doc["version"] = 1
    doc["reconstruction"] = "mesh.stl"
    doc["reference"] = os.path.relpath(ref_path, m.path.parent)
    write_json_atomic(m.artifact("validation.json"), doc)
    table = format_table([report])
    m.artifact("validation.txt").write_text(table + "\n")

    notes = {"VA": report.va, "PA": report.pa, "voxel_size": voxel}
    thresholds = m.section("validate")
    failures = []
    if "va_range" in thresholds:
        lo, hi = thresholds["va_range"]
        if not (float(lo) <= report.va <= float(hi)):
            failures.append(f"VA {report.va:.2f} outside [{lo}, {hi}]")
    if "pa_min" in thresholds:
        if report.pa < float(thresholds["pa_min"]):
            failures.append(f"PA {report.pa:.2f} below {thresholds['pa_min']}")
    if failures:
        raise ValidationFailure("; ".join(failures))
    return ["validation.json", "validation.txt"], notes


# -- checksum plumbing --------------------------------------------------------


def _stage_fingerprint(m: ProjectManifest, stage: str) -> str:
    """Digest of everything a stage reads: input files plus its config."""
    files: list[Path] = []
    config: object
    if stage == "phantom":
        config = _phantom_config(m)
    elif stage == "detect":
        files = _stack_inputs(m, "detect")
        config = {
            "detection": m.section("detection"),
            "resolution": m.stack_geometry()[0],
        }
    elif stage == "flatten":
        files = [_require(m, "flatten", m.artifact("detections.json"), "detect")]
        config = {"spacing": m.stack_geometry()[1]}
    elif stage == "register":
        files = [
            _require(m, "register", m.artifact("detections.json"), "detect"),
            _require(m, "register", m.artifact("flattened.json"), "flatten"),
            m.wire_path_file,
        ]
        _load_wire(m, "register")
        config = {
            "landmark": list(m.landmark),
            "direction": int(m.get("pullback_direction")),
            "spacing": m.stack_geometry()[1],
        }
    elif stage == "skeleton":
        files = [
            _require(m, "skeleton", m.artifact("flattened.json"), "flatten"),
            _require(m, "skeleton", m.artifact("registered.json"), "register"),
            _annotation_file(m, "skeleton"),
            m.wire_path_file,
        ]
        config = {
            "search_radius": float(m.get("search_radius")),
            "junction_tie_mm": float(m.get("junction_tie_mm")),
            "beam_parameters": str(m.get("beam_parameters")),
            "landmark": list(m.landmark),
            "direction": int(m.get("pullback_direction")),
            "spacing": m.stack_geometry()[1],
        }
    elif stage == "mesh":
        files = [_require(m, "mesh", m.artifact("skeleton.json"), "skeleton")]
        config = {
            "mesh": m.section("mesh"),
            "sections_per_curve": int(m.get("sections_per_curve")),
        }
    elif stage == "validate":
        files = [
            _require(m, "validate", m.artifact("mesh.stl"), "mesh"),
            _reference_mesh_path(m, "validate"),
        ]
        config = {
            "voxel_size": float(m.get("voxel_size")),
            "validate": m.section("validate"),
            "spacing": m.stack_geometry()[1],
        }
    else:
        raise InputError(f"unknown stage '{stage}'")
    parts = [sha256_file(p) for p in files]
    parts.append(config_digest(config))
    return sha256_bytes("\n".join(parts).encode())


def _outputs_intact(m: ProjectManifest, recorded: dict) -> bool:
    for rel, digest in recorded.items():
        path = m.artifact(rel)
        if not path.exists() or sha256_file(path) != digest:
            return False
    return True


_STAGE_BODIES = {
    "phantom": _run_phantom,
    "detect": _run_detect,
    "flatten": _run_flatten,
    "register": _run_register,
    "skeleton": _run_skeleton,
    "mesh": _run_mesh,
    "validate": _run_validate,
}


def _write_report(m: ProjectManifest, result: StageResult) -> None:
    report = {
        "stage": result.stage,
        "cached": result.cached,
        "seconds": result.seconds,
        "outputs": list(result.outputs),
        "notes": result.notes,
    }
    write_json_atomic(m.artifact("reports", f"{result.stage}.json"), report)


def run_stage(m: ProjectManifest, stage: str) -> list[StageResult]:
    """Run one stage (or "all"); returns one StageResult per stage executed.

    A stage whose recorded input digest matches and whose outputs are intact
    is skipped with cached=True and a "cached" notice instead of rerunning.
    """
    if stage == "all":
        todo = [s for s in STAGES if s != "phantom" or "phantom" in m.data]
        if "reference_mesh" not in m.data and "phantom" not in m.data:
            todo.remove("validate")
        results = []
        for s in todo:
            results.extend(run_stage(m, s))
        return results
    if stage not in _STAGE_BODIES:
        raise InputError(f"unknown stage '{stage}'; expected one of {', '.join(STAGES)} or all")

    fingerprint = _stage_fingerprint(m, stage)
    record = m.checksum_record(stage)
    if (
        record
        and record.get("inputs") == fingerprint
        and _outputs_intact(m, record.get("outputs", {}))
    ):
        return [
            StageResult(stage, True, 0.0, tuple(record["outputs"]), {"notice": "cached"})
        ]

    m.output_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    outputs, notes = _STAGE_BODIES[stage](m)
    seconds = time.perf_counter() - start
    out_digests = {rel: sha256_file(m.artifact(rel)) for rel in outputs}
    m.store_checksum(stage, fingerprint, out_digests)
    result = StageResult(stage, False, seconds, tuple(outputs), notes)
    _write_report(m, result)
    return [result]
