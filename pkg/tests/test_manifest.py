import json

import pytest

from stentrecon.manifest import (
    InputError,
    ProjectManifest,
    config_digest,
    write_json_atomic,
)


def write_manifest(tmp_path, data, name="project.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def test_load_missing_and_malformed(tmp_path):
    with pytest.raises(InputError, match="not found"):
        ProjectManifest.load(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(InputError, match="not valid JSON"):
        ProjectManifest.load(bad)
    lst = tmp_path / "list.json"
    lst.write_text("[1, 2]")
    with pytest.raises(InputError, match="JSON object"):
        ProjectManifest.load(lst)


def test_defaults_and_sections(tmp_path):
    m = ProjectManifest.load(write_manifest(tmp_path, {"voxel_size": 0.02}))
    assert m.get("voxel_size") == 0.02
    assert m.get("search_radius") == 0.3
    assert m.get("pullback_direction") == 1
    assert m.get("beam_parameters") == "centripetal"
    assert m.section("detection") == {}
    m.data["detection"] = "oops"
    with pytest.raises(InputError, match="must be an object"):
        m.section("detection")


def test_paths_resolve_relative_to_manifest(tmp_path):
    sub = tmp_path / "proj"
    sub.mkdir()
    m = ProjectManifest.load(
        write_manifest(sub, {"stack": "scan/stack.json", "output_dir": "results"})
    )
    assert m.stack_manifest_path == sub / "scan" / "stack.json"
    assert m.output_dir == sub / "results"
    assert m.artifact("mesh.stl") == sub / "results" / "mesh.stl"


def test_phantom_fallback_paths(tmp_path):
    m = ProjectManifest.load(write_manifest(tmp_path, {"phantom": {"spacing": 0.2}}))
    assert m.stack_manifest_path == tmp_path / "out" / "phantom" / "stack.json"
    assert m.wire_path_file == tmp_path / "out" / "phantom" / "wire.json"
    assert m.annotation_path == tmp_path / "out" / "phantom" / "annotations.json"
    bare = ProjectManifest.load(write_manifest(tmp_path, {}, "bare.json"))
    with pytest.raises(InputError):
        bare.stack_manifest_path
    with pytest.raises(InputError):
        bare.wire_path_file
    with pytest.raises(InputError):
        bare.annotation_path


def test_landmark_parsing(tmp_path):
    m = ProjectManifest.load(write_manifest(tmp_path, {}))
    assert m.landmark == (0, 0.0)
    m.data["landmark"] = [12, 3.5]
    assert m.landmark == (12, 3.5)
    m.data["landmark"] = "frame 12"
    with pytest.raises(InputError, match="landmark"):
        m.landmark


def test_stack_geometry_sources(tmp_path):
    inline = ProjectManifest.load(
        write_manifest(tmp_path, {"resolution": 0.01, "spacing": 0.2}, "a.json")
    )
    assert inline.stack_geometry() == (0.01, 0.2)

    stack = tmp_path / "stack.json"
    stack.write_text(json.dumps({"resolution": 0.02, "spacing": 0.5}))
    from_file = ProjectManifest.load(
        write_manifest(tmp_path, {"stack": "stack.json"}, "b.json")
    )
    assert from_file.stack_geometry() == (0.02, 0.5)

    missing = ProjectManifest.load(
        write_manifest(tmp_path, {"stack": "gone.json"}, "c.json")
    )
    with pytest.raises(InputError, match="stack file missing"):
        missing.stack_geometry()


def test_apply_override_nesting_and_json(tmp_path):
    m = ProjectManifest.load(write_manifest(tmp_path, {"phantom": {"spacing": 0.2}}))
    m.apply_override("detection.min_contour_px", "12")
    m.apply_override("phantom.spacing", "0.1")
    m.apply_override("stack", "scan/stack.json")
    m.apply_override("validate.va_range", "[97, 103]")
    assert m.data["detection"] == {"min_contour_px": 12}
    assert m.data["phantom"]["spacing"] == 0.1
    assert m.data["stack"] == "scan/stack.json"
    assert m.data["validate"]["va_range"] == [97, 103]


def test_write_json_atomic(tmp_path):
    target = tmp_path / "deep" / "file.json"
    write_json_atomic(target, {"b": 1, "a": 2})
    text = target.read_text()
    assert text == json.dumps({"a": 2, "b": 1}, indent=2, sort_keys=True)
    write_json_atomic(target, {"a": 3})
    assert json.loads(target.read_text()) == {"a": 3}
    assert list(target.parent.iterdir()) == [target]  # no temp files left behind


def test_checksum_round_trip(tmp_path):
    path = write_manifest(tmp_path, {"phantom": {"spacing": 0.2}})
    m = ProjectManifest.load(path)
    assert m.checksum_record("detect") is None
    m.store_checksum("detect", "abc", {"detections.json": "def"})
    reloaded = ProjectManifest.load(path)
    assert reloaded.checksum_record("detect") == {
        "inputs": "abc",
        "outputs": {"detections.json": "def"},
    }
    reloaded.drop_checksum("detect")
    assert ProjectManifest.load(path).checksum_record("detect") is None


def test_config_digest_key_order_invariant():
    assert config_digest({"a": 1, "b": [2, 3]}) == config_digest({"b": [2, 3], "a": 1})
    assert config_digest({"a": 1}) != config_digest({"a": 2})
