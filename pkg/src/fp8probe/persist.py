"""Versioned, checksummed JSON documents (snapshots, reports, plans).

Layout of every file (see docs/FORMATS.md)::

    {"magic": "fp8probe", "format_version": 1, "kind": "...",
     "created": "<ISO-8601 UTC>", "body": {...}, "checksum": "sha256:<hex>"}

The checksum covers magic, version, kind and body (not ``created``), so two
runs that produce the same content have the same checksum. Arrays inside the
body are ``{"dtype", "shape", "data"}`` with little-endian row-major bytes in
base64, which makes the round trip bit-exact.
"""

from __future__ import annotations

import base64
import datetime as _dt
import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import CorruptSnapshot, FormatVersionMismatch

MAGIC = "fp8probe"
FORMAT_VERSION = 1


def encode_array(a) -> dict:
    a = np.asarray(a)
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    return {
        "dtype": le.dtype.str,
        "shape": list(le.shape),
        "data": base64.b64encode(np.ascontiguousarray(le).tobytes()).decode("ascii"),
    }


def decode_array(doc: dict) -> np.ndarray:
    try:
        dtype = np.dtype(doc["dtype"])
        raw = base64.b64decode(doc["data"], validate=True)
        arr = np.frombuffer(raw, dtype=dtype).reshape(doc["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptSnapshot(f"bad array record: {exc}") from None
    return arr.astype(dtype.newbyteorder("="), copy=True)


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def content_hash(kind: str, body: dict) -> str:
    payload = {"magic": MAGIC, "format_version": FORMAT_VERSION, "kind": kind, "body": body}
    return "sha256:" + hashlib.sha256(canonical_json(payload)).hexdigest()


def timestamp() -> str:
    """Current UTC time, or ``SOURCE_DATE_EPOCH`` when set (reproducible builds)."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (
        _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc)
        if epoch
        else _dt.datetime.now(_dt.timezone.utc)
    )
    return when.replace(microsecond=0).isoformat()


def write_document(path, kind: str, body: dict) -> str:
    """Atomically write a document; returns its content hash."""
    path = Path(path)
    checksum = content_hash(kind, body)
    envelope = {
        "magic": MAGIC,
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "created": timestamp(),
        "body": body,
        "checksum": checksum,
    }
    text = json.dumps(envelope, sort_keys=True, indent=1) + "\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return checksum


def read_document(path, kind: str | None = None) -> tuple[dict, dict]:
    """Load and verify a document; returns ``(body, envelope)``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
        envelope = json.loads(text)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptSnapshot(f"{path}: unreadable document ({exc})") from None
    if not isinstance(envelope, dict) or envelope.get("magic") != MAGIC:
        raise CorruptSnapshot(f"{path}: not an {MAGIC} document")
    version = envelope.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"{path}: format_version {version!r}, this build reads {FORMAT_VERSION}")
    if kind is not None and envelope.get("kind") != kind:
        raise CorruptSnapshot(f"{path}: expected a {kind!r} document, found {envelope.get('kind')!r}")
    body = envelope.get("body")
    if not isinstance(body, dict) or envelope.get("checksum") != content_hash(envelope["kind"], body):
        raise CorruptSnapshot(f"{path}: checksum mismatch")
    return body, envelope
