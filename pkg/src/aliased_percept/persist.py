"""Atomic file writes and the versioned JSON container used for models."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

FORMAT = "aliased-percept/model"
VERSION = 1


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a sibling temp file and ``os.replace``; no partial file survives."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_container(path, kind: str, payload: dict) -> None:
    doc = {"format": FORMAT, "version": VERSION, "kind": kind, "payload": payload}
    atomic_write_text(path, json.dumps(doc, sort_keys=True) + "\n")


def load_container(path) -> tuple[str, dict]:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not a model file ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise ValueError(f"{path}: not a model file")
    if doc.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported model file version {doc.get('version')!r}")
    return doc["kind"], doc["payload"]
