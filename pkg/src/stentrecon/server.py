"""HTTP annotation service for reviewing detections and drawing pattern lines.

The server loads the stack and the detect stage's output, then lets an
operator patch individual frames (add missed struts, remove false positives)
and edit the ring/beam annotation lines. Edits live in memory until
POST /commit persists them and reports how many points the current lines
fail to capture.

Concurrency model: one version counter per frame plus one for the annotation
document. A patch or PUT carrying a stale version is refused with 409 and the
current state, so the last writer wins only after seeing what it overwrites.
"""

from __future__ import annotations

import io
import json
import threading

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, Response

from .detection import PatchError, apply_patch, detections_to_dict, load_detections, load_stack
from .manifest import DependencyError, ProjectManifest, write_json_atomic
from .topology import (
    TopologyError,
    classify_points,
    flatten,
    flattened_to_dict,
    lift_to_3d,
    load_annotations,
    lines_from_payload,
    lift_manifest,
)


class AnnotationSession:
    """In-memory working copy of detections and annotation lines."""

    def __init__(self, manifest: ProjectManifest):
        self.manifest = manifest
        det_path = manifest.artifact("detections.json")
        if not det_path.exists():
            raise DependencyError("serve", "detect")
        self.payload, results = load_detections(det_path)
        self.results = list(results)
        _, frames = load_stack(manifest.stack_manifest_path)
        self.frames = frames
        self.resolution, self.spacing = manifest.stack_geometry()
        self.image_size = tuple(self.payload["image_size"])
        self.frame_versions = [1] * len(self.results)
        self.annotations = self._initial_annotations()
        self.annotation_version = 1
        self.lock = threading.Lock()

    def _initial_annotations(self) -> dict:
        path = self.manifest.annotation_path
        if path.exists():
            with open(path) as fh:
                return json.load(fh)
        return {"version": 1, "lines": []}

    # -- views -------------------------------------------------------------

    def frame_payload(self, index: int) -> dict:
        doc = detections_to_dict(
            [self.results[index]], self.resolution, self.image_size
        )["frames"][0]
        doc["state_version"] = self.frame_versions[index]
        doc["image"] = f"/frames/{index}/image"
        return doc

    def frame_png(self, index: int) -> bytes:
        from PIL import Image

        pixels = np.clip(self.frames[index].image.pixels * 255.0, 0, 255)
        buf = io.BytesIO()
        Image.fromarray(pixels.astype(np.uint8), mode="L").save(buf, format="PNG")
        return buf.getvalue()

    def flattened_payload(self) -> dict:
        cloud = lift_to_3d(
            self.results,
            lift_manifest(self.resolution, self.spacing),
            self.image_size,
        )
        return flattened_to_dict(cloud, flatten(cloud))

    def classify(self) -> tuple[int, int]:
        """(unassigned, total) under the current lines and detections."""
        cloud = lift_to_3d(
            self.results,
            lift_manifest(self.resolution, self.spacing),
            self.image_size,
        )
        flat = flatten(cloud)
        lines = lines_from_payload(self.annotations)
        if not lines:
            return len(flat), len(flat)
        radius = float(self.manifest.get("search_radius"))
        classified = classify_points(flat, lines, search_radius=radius)
        return len(classified.unassigned), len(flat)

    # -- mutations ----------------------------------------------------------

    def patch_frame(self, index: int, body: dict) -> dict:
        version = body.get("version")
        if version != self.frame_versions[index]:
            raise StaleVersion(self.frame_payload(index))
        self.results[index] = apply_patch(self.results[index], body)
        self.frame_versions[index] += 1
        return self.frame_payload(index)

    def put_annotations(self, body: dict) -> dict:
        version = body.get("state_version")
        if version is not None and version != self.annotation_version:
            raise StaleVersion(self.annotations_payload())
        lines_from_payload(body)  # validates kinds, vertices, monotonicity
        self.annotations = {
            "version": 1,
            "lines": body.get("lines", []),
        }
        self.annotation_version += 1
        return self.annotations_payload()

    def annotations_payload(self) -> dict:
        doc = dict(self.annotations)
        doc["state_version"] = self.annotation_version
        return doc

    def commit(self) -> dict:
        detections = detections_to_dict(self.results, self.resolution, self.image_size)
        write_json_atomic(self.manifest.artifact("detections.json"), detections)
        write_json_atomic(self.manifest.annotation_path, self.annotations)
        unassigned, total = self.classify()
        return {
            "unassigned": unassigned,
            "points": total,
            "lines": len(self.annotations.get("lines", [])),
            "detections": "detections.json",
        }


class StaleVersion(Exception):
    def __init__(self, current: dict):
        self.current = current
        super().__init__("version is stale")


def build_app(manifest: ProjectManifest) -> FastAPI:
    session = AnnotationSession(manifest)
    app = FastAPI(title="stent annotation service")
    app.state.session = session

    def _frame_or_404(index: int) -> int:
        if not 0 <= index < len(session.results):
            raise HTTPException(status_code=404, detail=f"no frame {index}")
        return index

    @app.get("/frames")
    def frame_index():
        with session.lock:
            return {
                "frames": len(session.results),
                "resolution": session.resolution,
                "spacing": session.spacing,
                "image_size": list(session.image_size),
            }

    @app.get("/frames/{index}")
    def get_frame(index: int):
        with session.lock:
            return session.frame_payload(_frame_or_404(index))

    @app.get("/frames/{index}/image")
    def get_frame_image(index: int):
        with session.lock:
            png = session.frame_png(_frame_or_404(index))
        return Response(content=png, media_type="image/png")

    @app.post("/frames/{index}/patch")
    async def patch_frame(index: int, request: Request):
        body = await request.json()
        with session.lock:
            _frame_or_404(index)
            try:
                return session.patch_frame(index, body)
            except StaleVersion as exc:
                return JSONResponse(
                    status_code=409,
                    content={"detail": "stale version", "current": exc.current},
                )
            except PatchError as exc:
                raise HTTPException(status_code=400, detail=str(exc)) from None

    @app.get("/flattened")
    def get_flattened():
        with session.lock:
            return session.flattened_payload()

    @app.get("/annotations")
    def get_annotations():
        with session.lock:
            return session.annotations_payload()

    @app.put("/annotations")
    async def put_annotations(request: Request):
        body = await request.json()
        with session.lock:
            try:
                return session.put_annotations(body)
            except StaleVersion as exc:
                return JSONResponse(
                    status_code=409,
                    content={"detail": "stale version", "current": exc.current},
                )
            except TopologyError as exc:
                raise HTTPException(status_code=400, detail=str(exc)) from None

    @app.post("/commit")
    def commit():
        with session.lock:
            return session.commit()

    return app
