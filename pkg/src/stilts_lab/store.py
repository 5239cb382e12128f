"""Persistence: binary checkpoints, JSONL run records, and JSON manifests.

Checkpoint layout (all integers little-endian)::

    b"STLT" | u32 version | u64 header length | UTF-8 JSON header | float64 payload

The header carries the encoder config, a tensor index (name, shape,
element offset), free-form provenance, and SHA-256 digests of both the
header and the payload so that any corrupted byte is caught on load.
"""

from __future__ import annotations

import copy
import fcntl
import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .encoder import EncoderConfig, param_shapes

MAGIC = b"STLT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def save_checkpoint(path, params: Mapping[str, np.ndarray], config: EncoderConfig,
                    meta: Optional[Mapping[str, Any]] = None) -> None:
    """Write ``params`` (encoder tensors plus optional ``head.*`` tensors)."""
    _validate_params(params, config)
    index = []
    offset = 0
    blobs = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(arr.tobytes())
    payload = b"".join(blobs)
    header = {
        "encoder_config": config.to_dict(),
        "tensors": index,
        "payload_count": offset,
        "meta": dict(meta or {}),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header["header_sha256"] = hashlib.sha256(_canonical(header)).hexdigest()
    head_bytes = _canonical(header)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(head_bytes)))
        fh.write(head_bytes)
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path, expected_config: Optional[EncoderConfig] = None
                    ) -> Tuple[Dict[str, np.ndarray], EncoderConfig, Dict[str, Any]]:
    """Read a checkpoint; returns (params, config, meta) or raises
    :class:`CheckpointError` without returning anything partial."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated file (no header prefix)")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: header is not valid JSON ({err})") from None
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header is not a JSON object")
    digest = header.pop("header_sha256", None)
    if digest != hashlib.sha256(_canonical(header)).hexdigest():
        raise CheckpointError(f"{path}: header checksum mismatch (corrupted index)")
    payload = raw[start + hlen:]
    count = header["payload_count"]
    if len(payload) != 8 * count:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} bytes, expected {8 * count})")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    try:
        config = EncoderConfig.from_dict(header["encoder_config"])
    except (TypeError, ValueError) as err:
        raise CheckpointError(f"{path}: invalid encoder config ({err})") from None
    if expected_config is not None and config != expected_config:
        raise CheckpointError(f"{path}: encoder config {config} does not match expected {expected_config}")

    flat = np.frombuffer(payload, dtype="<f8")
    params: Dict[str, np.ndarray] = {}
    covered = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        if off != covered or off + size > count:
            raise CheckpointError(f"{path}: tensor index inconsistent at {entry['name']!r}")
        params[entry["name"]] = flat[off:off + size].reshape(shape).astype(np.float64)
        covered += size
    if covered != count:
        raise CheckpointError(f"{path}: tensor index covers {covered} of {count} values")
    try:
        _validate_params(params, config)
    except ValueError as err:
        raise CheckpointError(f"{path}: {err}") from None
    return params, config, header.get("meta", {})


def _validate_params(params: Mapping[str, np.ndarray], config: EncoderConfig) -> None:
    shapes = param_shapes(config)
    for name, shape in shapes.items():
        if name not in params:
            raise ValueError(f"missing tensor {name!r}")
        if tuple(params[name].shape) != shape:
            raise ValueError(f"tensor {name!r} has shape {tuple(params[name].shape)}, config says {shape}")
    extra = [n for n in params if n not in shapes and not n.startswith("head.")]
    if extra:
        raise ValueError(f"unexpected tensor {extra[0]!r}")


# run records


def append_result(record, path) -> None:
    """Append one JSON document as a single line.

    The line goes out in one ``write`` on an ``O_APPEND`` descriptor under an
    exclusive lock, so concurrent writers never interleave.
    """
    data = record.to_dict() if hasattr(record, "to_dict") else dict(record)
    line = (json.dumps(data, sort_keys=True) + "\n").encode("utf-8")
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        view = memoryview(line)
        while view:
            n = os.write(fd, view)
            view = view[n:]
    finally:
        fcntl.flock(fd, fcntl.LOCK_UN)
        os.close(fd)


def read_results(path) -> List[dict]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError:
                    raise ValueError(f"{path}: line {i} is not valid JSON") from None
    return out


def check_single_manifest(records: Iterable[Mapping]) -> Optional[str]:
    """The manifest hash shared by all records; mixing hashes is an error."""
    hashes = {r.get("manifest_hash") for r in records}
    if len(hashes) > 1:
        raise ManifestError(f"results come from {len(hashes)} different manifests: {sorted(map(str, hashes))}")
    return next(iter(hashes), None)


# manifests


def load_manifest(path) -> Dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ManifestError(f"cannot read manifest {path}: {err.strerror}") from None
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as err:
        raise ManifestError(f"manifest {path} is not valid JSON: {err}") from None
    if not isinstance(manifest, dict):
        raise ManifestError(f"manifest {path} must be a JSON object")
    return manifest


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(manifest: Mapping[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when
    possible, otherwise kept as strings.  Integer path components index lists."""
    out = copy.deepcopy(dict(manifest))
    for item in overrides:
        if "=" not in item:
            raise ManifestError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node: Any = out
        for part in parts[:-1]:
            if isinstance(node, list):
                node = node[int(part)]
            else:
                node = node.setdefault(part, {})
        if isinstance(node, list):
            node[int(parts[-1])] = _parse_value(raw)
        else:
            node[parts[-1]] = _parse_value(raw)
    return out


def manifest_hash(manifest: Mapping[str, Any]) -> str:
    return hashlib.sha256(_canonical(manifest)).hexdigest()[:16]


def save_manifest(manifest: Mapping[str, Any], path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
