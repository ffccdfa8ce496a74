"""Output directory writer: tables, JSON, text and the run manifest."""

import hashlib
import json
import logging
import platform
from pathlib import Path
from threading import Lock
from typing import Any, Dict, Optional, Union

import numpy as np
import pandas as pd

from . import __version__
from .errors import ArtifactIOError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


def file_sha256(path: Union[str, Path]) -> str:
    """SHA256 of a file's bytes"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ArtifactWriter:
    """Writes every artifact of one run under `out_dir` and remembers its digest"""

    def __init__(self, out_dir: Union[str, Path], fmt: str = "csv"):
        self.out_dir = Path(out_dir)
        self.fmt = fmt
        self.written: Dict[str, str] = {}
        self._lock = Lock()
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ArtifactIOError(f"Could not create output directory {self.out_dir}: {e}") from e

    def _path(self, name: str) -> Path:
        path = self.out_dir / name
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ArtifactIOError(f"Could not create {path.parent}: {e}") from e
        return path

    def register(self, path: Union[str, Path]) -> Path:
        """Record an artifact some other writer already put in the directory"""
        path = Path(path)
        with self._lock:
            self.written[path.relative_to(self.out_dir).as_posix()] = file_sha256(path)
        logger.info("Wrote %s", path)
        return path

    def write_table(self, stem: str, frame: pd.DataFrame) -> Path:
        """`stem.csv` or `stem.json` (records) depending on the run format"""
        path = self._path(f"{stem}.{self.fmt}")
        try:
            if self.fmt == "json":
                frame.to_json(path, orient="records", indent=2, double_precision=10)
            else:
                frame.to_csv(path, index=False, float_format="%.10g")
        except OSError as e:
            raise ArtifactIOError(f"Could not write {path}: {e}") from e
        return self.register(path)

    def write_json(self, name: str, data: Any) -> Path:
        path = self._path(name)
        try:
            with open(path, "w", encoding="utf-8") as f:
                json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
                f.write("\n")
        except OSError as e:
            raise ArtifactIOError(f"Could not write {path}: {e}") from e
        return self.register(path)

    def write_text(self, name: str, text: str) -> Path:
        path = self._path(name)
        try:
            path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
        except OSError as e:
            raise ArtifactIOError(f"Could not write {path}: {e}") from e
        return self.register(path)

    def write_manifest(self, command: str, config: Dict[str, Any], seed: int,
                       extra: Optional[Dict[str, Any]] = None) -> Path:
        """manifest.json: what ran, with which config, and what it produced.

        No timestamps, so an identical rerun yields an identical manifest.
        """
        manifest = {
            "manifest_version": MANIFEST_VERSION,
            "command": command,
            "toolkit_version": __version__,
            "python_version": platform.python_version(),
            "numpy_version": np.__version__,
            "seed": seed,
            "config": config,
            "artifacts": dict(sorted(self.written.items())),
        }
        if extra:
            manifest.update(extra)
        path = self._path(MANIFEST_NAME)
        try:
            with open(path, "w", encoding="utf-8") as f:
                json.dump(manifest, f, indent=2, sort_keys=True, default=_json_default)
                f.write("\n")
        except OSError as e:
            raise ArtifactIOError(f"Could not write manifest {path}: {e}") from e
        logger.info("Manifest lists %d artifacts: %s", len(self.written), path)
        return path


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")
