"""
Run manifests: what a command was asked to do and what it wrote.

Manifests hold no wall-clock data so re-running a command on unchanged
inputs reproduces the manifest byte for byte.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from utils.logger import get_logger

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    seed: int | None
    tool_version: str
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)


def file_digest(path: Path, chunk_size: int = 65536) -> str:
    """Return the sha256 hex digest of a file's contents."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def build_manifest(
    command: str,
    config: dict[str, Any],
    seed: int | None,
    inputs: list[Path],
    outputs: list[Path],
    out_dir: Path,
) -> RunManifest:
    """Digest inputs and outputs. Output keys are relative to out_dir."""
    from utils import __version__

    return RunManifest(
        command=command,
        config=config,
        seed=seed,
        tool_version=__version__,
        inputs={p.name: file_digest(p) for p in sorted(inputs, key=lambda p: p.name)},
        outputs={
            str(p.relative_to(out_dir)): file_digest(p)
            for p in sorted(outputs, key=lambda p: str(p))
        },
    )


def write_manifest(manifest: RunManifest, out_dir: Path) -> Path:
    """Write manifest.json into out_dir."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST_NAME
    with open(path, "w") as f:
        json.dump(asdict(manifest), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Manifest written to {path} ({len(manifest.outputs)} artifacts)")
    return path
