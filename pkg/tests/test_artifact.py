import json
import tarfile

from pathlib import Path

import pytest

from ris_estimation import artifact
from ris_estimation.errors import InputError


def _artifacts(root: Path) -> Path:
    (root / "data").mkdir(parents=True)
    (root / "data" / "train.npz").write_bytes(b"train")
    (root / "checkpoints").mkdir()
    (root / "checkpoints" / "model.npz").write_bytes(b"weights")
    (root / "config.yaml").write_text("seed: 1\n")
    (root / "results.csv").write_text("method,Q\n")
    return root


def test_write_manifest_records_every_file(tmp_path: Path):
    out = _artifacts(tmp_path / "out")
    path = artifact.write_manifest(out, "abc")

    manifest = json.loads(path.read_text())
    assert manifest["config_hash"] == "abc"
    assert set(manifest["files"]) == {
        "checkpoints/model.npz",
        "config.yaml",
        "data/train.npz",
        "results.csv",
    }
    assert manifest["files"]["config.yaml"]["bytes"] == len("seed: 1\n")
    assert manifest["files"]["data/train.npz"]["sha256"] == artifact.file_sha256(out / "data" / "train.npz")


def test_write_manifest_skips_archives(tmp_path: Path):
    out = _artifacts(tmp_path / "out")
    (out / "bundle.tar.gz").write_bytes(b"old")
    manifest = json.loads(artifact.write_manifest(out, "abc").read_text())
    assert "bundle.tar.gz" not in manifest["files"]


def test_write_manifest_is_stable(tmp_path: Path):
    out = _artifacts(tmp_path / "out")
    first = artifact.write_manifest(out, "abc").read_bytes()
    assert artifact.write_manifest(out, "abc").read_bytes() == first


def test_write_manifest_missing_dir(tmp_path: Path):
    with pytest.raises(InputError):
        artifact.write_manifest(tmp_path / "nope", "abc")


def test_verify_manifest_clean(tmp_path: Path):
    out = _artifacts(tmp_path / "out")
    artifact.write_manifest(out, "abc")
    assert artifact.verify_manifest(out, "abc") == []


def test_verify_manifest_detects_tampering(tmp_path: Path):
    out = _artifacts(tmp_path / "out")
    artifact.write_manifest(out, "abc")

    (out / "results.csv").write_text("method,Q\nnn,32\n")
    (out / "checkpoints" / "model.npz").unlink()
    (out / "extra.csv").write_text("x\n")

    problems = {(p.path, p.reason) for p in artifact.verify_manifest(out)}
    assert problems == {
        ("results.csv", "sha256 mismatch"),
        ("checkpoints/model.npz", "missing"),
        ("extra.csv", "not in manifest"),
    }


def test_verify_manifest_flags_other_config(tmp_path: Path):
    out = _artifacts(tmp_path / "out")
    artifact.write_manifest(out, "abc")
    problems = artifact.verify_manifest(out, "def")
    assert [p.path for p in problems] == [artifact.MANIFEST_NAME]


def test_verify_manifest_requires_manifest(tmp_path: Path):
    with pytest.raises(InputError, match="No manifest"):
        artifact.verify_manifest(_artifacts(tmp_path / "out"))


def test_verify_manifest_rejects_corrupt_json(tmp_path: Path):
    out = _artifacts(tmp_path / "out")
    (out / artifact.MANIFEST_NAME).write_text("{not json")
    with pytest.raises(InputError, match="Could not parse"):
        artifact.verify_manifest(out)


def test_bundle_excludes_datasets_by_default(tmp_path: Path):
    out = _artifacts(tmp_path / "out")
    artifact.write_manifest(out, "abc")
    archive_path = artifact.bundle_artifacts(out, tmp_path / "dist" / "bundle.tar.gz")

    with tarfile.open(archive_path, "r:gz") as tar:
        members = set(tar.getnames())
    assert members == {"checkpoints/model.npz", "config.yaml", "results.csv", "manifest.json"}


def test_bundle_includes_datasets_and_extra_files(tmp_path: Path):
    out = _artifacts(tmp_path / "out")
    notes = tmp_path / "notes.txt"
    notes.write_text("run notes")

    archive_path = artifact.bundle_artifacts(
        out, out / "bundle.tar.gz", include_datasets=True, extra_paths=[notes, tmp_path / "missing.txt"]
    )
    with tarfile.open(archive_path, "r:gz") as tar:
        members = set(tar.getnames())

    assert "data/train.npz" in members
    assert "notes.txt" in members
    assert "bundle.tar.gz" not in members
