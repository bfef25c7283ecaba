"""Project manifest: one JSON file describing a reconstruction project.

The manifest names the inputs (stack, wire path, annotations), the output
directory, and per-stage configuration. Paths are stored relative to the
manifest file so a project directory can be moved or checked in whole.

Stage checksums live under ``checksums`` inside the same file; they record a
hash of each stage's inputs and outputs so reruns can skip work that is
already up to date. Checksum updates rewrite the manifest atomically
(tmp file + rename) so a crash mid-write never leaves a torn manifest.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path


class InputError(Exception):
    """Bad or missing input: unreadable file, malformed manifest, bad value."""


class DependencyError(Exception):
    """A stage was asked to run before the stage that produces its inputs."""

    def __init__(self, stage: str, needed: str, message: str | None = None):
        self.stage = stage
        self.needed = needed
        super().__init__(
            message
            or f"stage '{stage}' needs outputs of '{needed}'; run '{needed}' first"
        )


class ValidationFailure(Exception):
    """Validation ran to completion but a declared threshold was missed."""


_DEFAULTS = {
    "pullback_direction": 1,
    "search_radius": 0.3,
    "junction_tie_mm": 0.0,
    "voxel_size": 0.015,
    "sections_per_curve": 256,
    "beam_parameters": "centripetal",
}


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_digest(obj) -> str:
    """Hash of a JSON-serializable config, invariant to key order."""
    return sha256_bytes(json.dumps(obj, sort_keys=True).encode())


def write_json_atomic(path, payload) -> None:
    """Serialize to a sibling temp file, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class ProjectManifest:
    """Typed access to the project manifest dict, plus atomic persistence."""

    def __init__(self, data: dict, path):
        if not isinstance(data, dict):
            raise InputError("manifest must be a JSON object")
        self.data = data
        self.path = Path(path).resolve()

    @classmethod
    def load(cls, path) -> "ProjectManifest":
        path = Path(path)
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise InputError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"manifest is not valid JSON: {path}: {exc}") from None
        return cls(data, path)

    def save(self) -> None:
        write_json_atomic(self.path, self.data)

    # -- path handling ----------------------------------------------------

    def resolve(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else (self.path.parent / p)

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.data.get("output_dir", "out"))

    def artifact(self, *parts) -> Path:
        return self.output_dir.joinpath(*parts)

    # -- typed getters ----------------------------------------------------

    def get(self, key: str, default=None):
        if key in self.data:
            return self.data[key]
        if default is not None:
            return default
        return _DEFAULTS.get(key)

    def section(self, name: str) -> dict:
        value = self.data.get(name, {})
        if not isinstance(value, dict):
            raise InputError(f"manifest section '{name}' must be an object")
        return value

    @property
    def stack_manifest_path(self) -> Path:
        if "stack" in self.data:
            return self.resolve(self.data["stack"])
        if "phantom" in self.data:
            return self.artifact("phantom", "stack.json")
        raise InputError("manifest names no 'stack' and has no 'phantom' section")

    @property
    def wire_path_file(self) -> Path:
        if "wire_path" in self.data:
            return self.resolve(self.data["wire_path"])
        if "phantom" in self.data:
            return self.artifact("phantom", "wire.json")
        raise InputError("manifest names no 'wire_path' and has no 'phantom' section")

    @property
    def annotation_path(self) -> Path:
        if "annotations" in self.data:
            return self.resolve(self.data["annotations"])
        if "phantom" in self.data:
            return self.artifact("phantom", "annotations.json")
        raise InputError("manifest names no 'annotations' and has no 'phantom' section")

    @property
    def landmark(self) -> tuple[int, float]:
        raw = self.data.get("landmark", [0, 0.0])
        try:
            frame, arclength = raw
            return int(frame), float(arclength)
        except (TypeError, ValueError):
            raise InputError(
                "manifest 'landmark' must be [frame_index, arclength_mm]"
            ) from None

    def stack_geometry(self) -> tuple[float, float]:
        """(resolution mm/px, spacing mm), from the manifest or the stack file."""
        res = self.data.get("resolution")
        spacing = self.data.get("spacing")
        if res is None or spacing is None:
            stack_path = self.stack_manifest_path
            if not stack_path.exists():
                raise InputError(
                    f"resolution/spacing not in manifest and stack file missing: {stack_path}"
                )
            with open(stack_path) as fh:
                stack = json.load(fh)
            res = res if res is not None else stack.get("resolution")
            spacing = spacing if spacing is not None else stack.get("spacing")
        if res is None or spacing is None:
            raise InputError("could not determine stack resolution and spacing")
        return float(res), float(spacing)

    # -- overrides ---------------------------------------------------------

    def apply_override(self, dotted_key: str, raw_value: str) -> None:
        """Set a (possibly nested) key from a ``--set a.b=value`` string.

        Values parse as JSON when possible, else stay strings, so
        ``--set detection.min_contour_px=12`` and ``--set stack=scan/stack.json``
        both do the obvious thing.
        """
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        node = self.data
        keys = dotted_key.split(".")
        for key in keys[:-1]:
            nxt = node.get(key)
            if not isinstance(nxt, dict):
                nxt = {}
                node[key] = nxt
            node = nxt
        node[keys[-1]] = value

    # -- checksums ---------------------------------------------------------

    def checksum_record(self, stage: str) -> dict | None:
        record = self.data.get("checksums", {}).get(stage)
        return record if isinstance(record, dict) else None

    def store_checksum(self, stage: str, inputs: str, outputs: dict[str, str]) -> None:
        self.data.setdefault("checksums", {})[stage] = {
            "inputs": inputs,
            "outputs": outputs,
        }
        self.save()

    def drop_checksum(self, stage: str) -> None:
        if self.data.get("checksums", {}).pop(stage, None) is not None:
            self.save()
