"""Output plumbing: atomic files, digests and JSON conversion."""

import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Any, List, Optional, Union

import numpy as np
import pandas as pd
from atomicwrites import atomic_write

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# 17 significant digits round-trip every float64.
FLOAT_FORMAT = "%.17g"


def to_jsonable(obj: Any) -> Any:
    """Convert numpy containers and scalars to builtin JSON types.

    Non-finite floats become ``None`` so the output stays strict JSON.

    Args:
        obj: the object to convert; dicts, lists and tuples are walked.

    Returns:
        An object made only of dict, list, str, int, float, bool and None.

    """
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        items = sorted(obj) if isinstance(obj, (set, frozenset)) else obj
        return [to_jsonable(v) for v in items]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def dumps(obj: Any) -> str:
    """Serialize to deterministic, indented JSON text.

    Args:
        obj: anything :func:`to_jsonable` accepts.

    Returns:
        The JSON document followed by a newline.

    """
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n"


def file_digest(path: PathLike) -> str:
    """Return the sha256 hex digest of a file.

    Args:
        path: the file to hash.

    Returns:
        Hex digest string.

    """
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class OutputDirectory:
    """Collects the files of one command run and writes each one atomically.

    Used as a context manager: when the body raises, every file written
    through this object is removed again, so a failed run leaves no partial
    outputs behind.
    """

    def __init__(self, root: PathLike):
        self.root = Path(root)
        self.written: List[Path] = []

    def __enter__(self) -> "OutputDirectory":
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None:
            self.discard()

    def path(self, name: str) -> Path:
        """Return the absolute path of an output file inside the directory."""
        return self.root / name

    def _track(self, target: Path) -> None:
        if target not in self.written:
            self.written.append(target)

    def write_text(self, name: str, text: str) -> Path:
        """Atomically write a UTF-8 text file.

        Args:
            name: file name relative to the output directory.
            text: file contents.

        Returns:
            The written path.

        """
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        with atomic_write(str(target), overwrite=True, encoding="utf-8") as f:
            f.write(text)
        self._track(target)
        logger.debug(f"Wrote {target}")
        return target

    def write_json(self, name: str, obj: Any) -> Path:
        """Atomically write a JSON document."""
        return self.write_text(name, dumps(obj))

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        """Atomically write a data frame as CSV with round-trip float format."""
        return self.write_text(
            name, frame.to_csv(index=False, float_format=FLOAT_FORMAT)
        )

    def write_bytes(self, name: str, payload: bytes) -> Path:
        """Atomically write a binary file."""
        target = self.path(name)
        with atomic_write(str(target), mode="wb", overwrite=True) as f:
            f.write(payload)
        self._track(target)
        return target

    def discard(self) -> None:
        """Remove every file written so far."""
        for target in self.written:
            try:
                target.unlink()
            except FileNotFoundError:
                pass
        if self.written:
            logger.info(f"Removed {len(self.written)} partial output file(s)")
        self.written = []


def read_json(path: PathLike) -> Optional[Any]:
    """Load a JSON file.

    Args:
        path: file to read.

    Returns:
        The decoded document.

    """
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
