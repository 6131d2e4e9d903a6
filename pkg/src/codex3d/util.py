"""Small shared helpers: deterministic seed derivation and atomic file writes."""

import ctypes
import ctypes.util
import hashlib
import json
import os
import tempfile

_libc = None


def release_heap() -> None:
    """Hand freed allocator pages back to the operating system.

    Loops that interleave small retained objects with multi-megabyte tensor
    churn (encoding a whole dataset, translating held-out sets) fragment
    glibc's main arena until residency is many times the working set, enough
    to exhaust a small machine. Calling this every few dozen iterations keeps
    residency flat for a few milliseconds per call. No-op where the C library
    has no malloc_trim.
    """
    global _libc
    if _libc is None:
        try:
            _libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        except OSError:
            _libc = False
    if _libc and hasattr(_libc, "malloc_trim"):
        _libc.malloc_trim(0)


def derive_seed(*parts) -> int:
    """Derive a 63-bit seed from a sequence of hashable parts.

    Stable across processes and platforms, so every stochastic operation can
    be a pure function of (inputs, seed).
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def stable_hash(obj) -> str:
    """Short hex hash of a JSON-serializable object, key-order independent."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def atomic_write_bytes(path, data: bytes) -> None:
    """Write bytes to `path` via a temp file + rename (no partial files)."""
    path = str(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
