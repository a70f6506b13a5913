import hashlib
import json
import tarfile

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import click

from ris_estimation.errors import InputError

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

# Files that are regenerated on every stage and so are never hashed into the manifest.
SKIPPED_NAMES = frozenset({MANIFEST_NAME, ".DS_Store"})
SKIPPED_SUFFIXES = (".tar.gz", ".tmp")


@dataclass
class ManifestProblem:
    path: str
    reason: str


def file_sha256(path: Path, chunk_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _is_skipped(path: Path) -> bool:
    return path.name in SKIPPED_NAMES or path.name.endswith(SKIPPED_SUFFIXES)


def artifact_files(out_dir: Path) -> list[Path]:
    return sorted(p for p in out_dir.rglob("*") if p.is_file() and not _is_skipped(p))


def write_manifest(out_dir: Path, config_hash: str) -> Path:
    """
    Record every artifact under `out_dir` with its size and SHA-256, keyed by
    the path relative to `out_dir`, next to the config hash that produced it.
    """
    if not out_dir.is_dir():
        raise InputError(f"Artifact directory does not exist: {out_dir}")

    files = {}
    for p in artifact_files(out_dir):
        files[p.relative_to(out_dir).as_posix()] = {
            "sha256": file_sha256(p),
            "bytes": p.stat().st_size,
        }

    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(
        json.dumps(
            {"version": MANIFEST_VERSION, "config_hash": config_hash, "files": files},
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    click.echo(f"  🧾 Wrote manifest for {len(files)} files: {manifest_path}")
    return manifest_path


def verify_manifest(out_dir: Path, config_hash: str | None = None) -> list[ManifestProblem]:
    """Re-hash the artifacts and list every missing, changed or unrecorded file."""
    manifest_path = out_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise InputError(f"No manifest found in {out_dir}")

    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InputError(f"Could not parse {manifest_path}: {e}")

    problems: list[ManifestProblem] = []
    if config_hash is not None and manifest.get("config_hash") != config_hash:
        problems.append(ManifestProblem(MANIFEST_NAME, "config hash differs from the active config"))

    recorded = manifest.get("files", {})
    for name, entry in sorted(recorded.items()):
        p = out_dir / name
        if not p.is_file():
            problems.append(ManifestProblem(name, "missing"))
        elif file_sha256(p) != entry["sha256"]:
            problems.append(ManifestProblem(name, "sha256 mismatch"))

    for p in artifact_files(out_dir):
        name = p.relative_to(out_dir).as_posix()
        if name not in recorded:
            problems.append(ManifestProblem(name, "not in manifest"))

    return problems


def bundle_artifacts(
    out_dir: Path,
    archive_path: Path,
    include_datasets: bool = False,
    extra_paths: Iterable[Path] | None = None,
) -> Path:
    """
    - Adds the config echo, manifest, CSV reports and checkpoints under out_dir
    - Adds the dataset files under out_dir/data only when include_datasets is True
    - Adds extra_paths if provided
    """
    if not out_dir.is_dir():
        raise InputError(f"Artifact directory does not exist: {out_dir}")

    files_to_add: list[Path] = []
    for p in sorted(out_dir.rglob("*")):
        if not p.is_file() or p.resolve() == archive_path.resolve():
            continue
        if not include_datasets and "data" in p.relative_to(out_dir).parts[:1]:
            continue
        files_to_add.append(p)

    if extra_paths:
        files_to_add.extend(p for p in extra_paths if p.is_file())

    archive_path.parent.mkdir(parents=True, exist_ok=True)
    with tarfile.open(archive_path, "w:gz") as tar:
        for p in files_to_add:
            try:
                archive_name = p.relative_to(out_dir).as_posix()
            except ValueError:
                archive_name = p.name
            # Store paths relative to the artifact directory for stability
            tar.add(p, arcname=archive_name)

    archive_size = archive_path.stat().st_size
    size_mb = archive_size / (1024 * 1024)
    click.echo(f"  📦 Archive created: {archive_path} ({size_mb:.2f} MB / {archive_size:,} bytes)")
    return archive_path
