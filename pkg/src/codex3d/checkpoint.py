"""Versioned checkpoint container: JSON manifest + raw little-endian blobs.

Layout of a checkpoint file:

    bytes 0..8    magic "CDX3CKPT"
    bytes 8..12   uint32 LE, manifest length in bytes
    manifest      UTF-8 JSON (sorted keys, no whitespace)
    blob          tensor payloads at the offsets the manifest records

Tensors are stored sorted by name so identical contents always produce
identical bytes. The codebook tensor additionally carries its own K and D
as two leading uint32 values before the K*D float32 payload, making it
readable without parsing the manifest.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from codex3d.errors import DataFormatError, DependencyError
from codex3d.util import atomic_write_bytes

MAGIC = b"CDX3CKPT"
SCHEMA_VERSION = 1
COMPONENTS = ("vqvae2d", "vqvae3d", "denoiser")

_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"),
           "i4": np.dtype("<i4"), "i8": np.dtype("<i8")}


@dataclass
class Checkpoint:
    component: str
    config: dict
    step: int
    tensors: dict
    rng_state: bytes = b""
    config_hash: str = ""
    schema_version: int = SCHEMA_VERSION


def _dtype_tag(array: np.ndarray) -> str:
    for tag, dt in _DTYPES.items():
        if array.dtype == dt:
            return tag
    raise DataFormatError(f"unsupported tensor dtype {array.dtype}")


def _is_codebook(name: str) -> bool:
    return name == "vq.vectors" or name.endswith(".vq.vectors")


def pack_codebook(vectors: np.ndarray) -> bytes:
    """K, D as uint32 LE, then K*D float32 LE values in row-major order."""
    if vectors.ndim != 2:
        raise DataFormatError(f"codebook must be 2D, got shape {vectors.shape}")
    k, d = vectors.shape
    return struct.pack("<II", k, d) + np.ascontiguousarray(
        vectors, dtype="<f4"
    ).tobytes()


def unpack_codebook(blob: bytes) -> np.ndarray:
    if len(blob) < 8:
        raise DataFormatError("codebook blob shorter than its K, D header")
    k, d = struct.unpack_from("<II", blob, 0)
    expect = 8 + 4 * k * d
    if len(blob) != expect:
        raise DataFormatError(f"codebook blob is {len(blob)} bytes, K={k} D={d} needs {expect}")
    return np.frombuffer(blob, dtype="<f4", offset=8).reshape(k, d).copy()


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    array = np.asarray(value)
    if array.dtype == np.float32:
        return array.astype("<f4", copy=False)
    if array.dtype == np.float64:
        return array.astype("<f8", copy=False)
    if array.dtype == np.int64:
        return array.astype("<i8", copy=False)
    if array.dtype == np.int32:
        return array.astype("<i4", copy=False)
    raise DataFormatError(f"unsupported tensor dtype {array.dtype}")


def model_tensors(model: torch.nn.Module) -> dict:
    """The model's parameters and buffers as plain numpy arrays."""
    return {name: _to_numpy(value) for name, value in model.state_dict().items()}


def save_checkpoint(path, component: str, config: dict, step: int, tensors: dict,
                    rng_state: bytes = b"", config_hash: str = "") -> None:
    if component not in COMPONENTS:
        raise DataFormatError(f"component must be one of {COMPONENTS}, got {component!r}")
    entries = []
    blob = bytearray()
    for name in sorted(tensors):
        array = _to_numpy(tensors[name])
        entry = {"name": name, "shape": list(array.shape), "offset": len(blob)}
        if _is_codebook(name):
            data = pack_codebook(array)
            entry["dtype"] = "codebook"
        else:
            data = np.ascontiguousarray(array).tobytes()
            entry["dtype"] = _dtype_tag(array)
        entry["size"] = len(data)
        entries.append(entry)
        blob.extend(data)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "component": component,
        "config": config,
        "config_hash": config_hash,
        "step": int(step),
        "rng_state": rng_state.hex(),
        "tensors": entries,
    }
    encoded = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = MAGIC + struct.pack("<I", len(encoded)) + encoded + bytes(blob)
    atomic_write_bytes(path, payload)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            payload = fh.read()
    except FileNotFoundError as exc:
        raise DependencyError(f"checkpoint not found: {path}") from exc
    if len(payload) < len(MAGIC) + 4 or payload[: len(MAGIC)] != MAGIC:
        raise DataFormatError(f"{path} is not a checkpoint file (bad magic)")
    (manifest_len,) = struct.unpack_from("<I", payload, len(MAGIC))
    start = len(MAGIC) + 4
    if start + manifest_len > len(payload):
        raise DataFormatError(f"{path} is truncated inside its manifest")
    try:
        manifest = json.loads(payload[start : start + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path} has a corrupted manifest: {exc}") from exc
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DataFormatError(
            f"{path} has schema version {version}, this build reads {SCHEMA_VERSION}"
        )
    if manifest.get("component") not in COMPONENTS:
        raise DataFormatError(f"{path} names unknown component {manifest.get('component')!r}")
    blob = payload[start + manifest_len :]
    tensors = {}
    for entry in manifest["tensors"]:
        lo, hi = entry["offset"], entry["offset"] + entry["size"]
        if hi > len(blob):
            raise DataFormatError(f"{path} is truncated inside tensor {entry['name']!r}")
        data = blob[lo:hi]
        if entry["dtype"] == "codebook":
            array = unpack_codebook(data)
        elif entry["dtype"] in _DTYPES:
            array = np.frombuffer(data, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"]).copy()
        else:
            raise DataFormatError(f"{path}: unknown dtype tag {entry['dtype']!r}")
        if list(array.shape) != list(entry["shape"]):
            raise DataFormatError(
                f"{path}: tensor {entry['name']!r} shape {array.shape} != manifest {entry['shape']}"
            )
        tensors[entry["name"]] = array
    return Checkpoint(
        component=manifest["component"],
        config=manifest["config"],
        step=manifest["step"],
        tensors=tensors,
        rng_state=bytes.fromhex(manifest.get("rng_state", "")),
        config_hash=manifest.get("config_hash", ""),
        schema_version=version,
    )


def restore_model(model: torch.nn.Module, ckpt: Checkpoint) -> torch.nn.Module:
    """Copy checkpoint tensors into a freshly built model, strictly."""
    state = model.state_dict()
    missing = sorted(set(state) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(state))
    if missing or extra:
        raise DependencyError(
            f"checkpoint does not fit the model: missing {missing}, unexpected {extra}"
        )
    for name, current in state.items():
        stored = ckpt.tensors[name]
        if tuple(stored.shape) != tuple(current.shape):
            raise DependencyError(
                f"tensor {name!r} has shape {tuple(stored.shape)} in the checkpoint, "
                f"model expects {tuple(current.shape)}"
            )
        state[name] = torch.from_numpy(np.ascontiguousarray(stored)).to(current.dtype)
    model.load_state_dict(state)
    return model
