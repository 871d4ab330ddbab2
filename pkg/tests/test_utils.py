"""
Unit tests for utils/logger.py and utils/manifest.py
"""

import json
import logging
from pathlib import Path

from utils import __version__
from utils.logger import LOG_ENV_VAR, format_duration, level_from_env
from utils.manifest import build_manifest, file_digest, write_manifest


# --- Tests for the logger ---

def test_level_from_env(monkeypatch):
    monkeypatch.setenv(LOG_ENV_VAR, "DEBUG")
    assert level_from_env() == logging.DEBUG

    monkeypatch.setenv(LOG_ENV_VAR, "error")
    assert level_from_env() == logging.ERROR


def test_level_from_env_falls_back_to_default(monkeypatch, capsys):
    monkeypatch.setenv(LOG_ENV_VAR, "chatty")

    assert level_from_env() == logging.INFO
    assert "Unknown WISPRKIT_LOG" in capsys.readouterr().err


def test_level_from_env_unset(monkeypatch):
    monkeypatch.delenv(LOG_ENV_VAR, raising=False)

    assert level_from_env(logging.ERROR) == logging.ERROR


def test_format_duration():
    assert format_duration(12.34) == "12.3s"
    assert format_duration(90) == "1.5m"
    assert format_duration(5400) == "1.5h"


# --- Tests for manifests ---

def test_manifest_digests_and_relative_outputs(tmp_path: Path):
    # Arrange
    source = tmp_path / "input.csv"
    source.write_text("a,b\n1,2\n")
    out = tmp_path / "out"
    (out / "nested").mkdir(parents=True)
    result = out / "nested" / "result.csv"
    result.write_text("x\n")

    # Act
    manifest = build_manifest("paths", {"cap": 10}, 42, [source], [result], out)
    path = write_manifest(manifest, out)

    # Assert
    data = json.loads(path.read_text())
    assert data["seed"] == 42
    assert data["tool_version"] == __version__
    assert data["inputs"] == {"input.csv": file_digest(source)}
    assert list(data["outputs"]) == ["nested/result.csv"]
    assert len(data["outputs"]["nested/result.csv"]) == 64


def test_manifest_is_reproducible(tmp_path: Path):
    source = tmp_path / "input.csv"
    source.write_text("a\n")

    first = write_manifest(build_manifest("sim", {}, 1, [source], [], tmp_path / "a"), tmp_path / "a")
    second = write_manifest(build_manifest("sim", {}, 1, [source], [], tmp_path / "b"), tmp_path / "b")

    assert first.read_bytes() == second.read_bytes()
