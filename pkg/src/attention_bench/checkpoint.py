"""Checkpoint files of a :class:`~attention_bench.model.ModelState`.

Layout::

    bytes 0..7      header length H, unsigned 64-bit little-endian
    bytes 8..8+H    UTF-8 JSON header
    bytes 8+H..     tensor payloads, little-endian float32, row-major, back to back

The header holds ``format``, ``version``, the model ``config`` and a
``tensors`` manifest of ``{name, kind, shape, offset, nbytes}`` entries, with
``offset`` counted from the start of the payload section. ``kind`` is
``parameter`` or ``buffer`` (LSH rotations).
"""

import json
import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from attention_bench.exceptions import CheckpointError, ConfigError
from attention_bench.model import ModelConfig, ModelState, init_model

logger = logging.getLogger(__name__)

FORMAT_NAME = "attention-bench-checkpoint"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<Q")
_DTYPE = np.dtype("<f4")


def _entries(state: ModelState):
    for name, tensor in state.named_parameters():
        yield name, "parameter", tensor.data
    for name, buffer in state.named_buffers():
        yield name, "buffer", buffer


def save_checkpoint(state: ModelState, path: Union[str, Path]) -> Path:
    """Write ``state`` to ``path`` and return the path."""
    path = Path(path)
    manifest = []
    payloads = []
    offset = 0
    for name, kind, array in _entries(state):
        payload = np.ascontiguousarray(array, dtype=_DTYPE).tobytes()
        manifest.append(
            {
                "name": name,
                "kind": kind,
                "shape": list(array.shape),
                "offset": offset,
                "nbytes": len(payload),
            }
        )
        payloads.append(payload)
        offset += len(payload)
    header = json.dumps(
        {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "config": state.config.to_dict(),
            "tensors": manifest,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(_LENGTH.pack(len(header)))
        handle.write(header)
        for payload in payloads:
            handle.write(payload)
    logger.info("Saved checkpoint %s (%d bytes of tensors)", path, offset)
    return path


def read_header(path: Union[str, Path]) -> dict:
    """Parse and return the JSON header of a checkpoint.

    Raises:
        CheckpointError: If the file is truncated or the header is not a checkpoint header.
    """
    with open(path, "rb") as handle:
        prefix = handle.read(_LENGTH.size)
        if len(prefix) != _LENGTH.size:
            raise CheckpointError(f"{path}: file too short for a checkpoint header.")
        (length,) = _LENGTH.unpack(prefix)
        raw = handle.read(length)
    if len(raw) != length:
        raise CheckpointError(f"{path}: header truncated.")
    try:
        header = json.loads(raw.decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path}: not an {FORMAT_NAME} file.")
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}.")
    return header


def load_checkpoint(path: Union[str, Path]) -> ModelState:
    """Rebuild the model stored at ``path``.

    Raises:
        CheckpointError: If the header, the manifest or the payload does not match the model.
    """
    path = Path(path)
    header = read_header(path)
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid model config: {exc}") from exc
    state = init_model(config)
    expected = {name: (kind, array) for name, kind, array in _entries(state)}
    blob = path.read_bytes()
    base = _LENGTH.size + _LENGTH.unpack(blob[: _LENGTH.size])[0]

    seen = set()
    for entry in header.get("tensors", []):
        name = entry.get("name")
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor '{name}'.")
        kind, target = expected[name]
        shape = tuple(entry["shape"])
        if shape != target.shape or entry["nbytes"] != target.size * _DTYPE.itemsize:
            raise CheckpointError(
                f"{path}: tensor '{name}' has shape {shape}, the model expects {target.shape}."
            )
        start = base + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(blob):
            raise CheckpointError(f"{path}: payload of '{name}' is truncated.")
        values = np.frombuffer(blob[start:stop], dtype=_DTYPE).reshape(shape)
        target[...] = values
        seen.add(name)
    missing = sorted(set(expected) - seen)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}.")
    logger.info("Loaded checkpoint %s", path)
    return state
