# stotrans/engine/checkpoint.py
"""
Checkpoint file format.

    STOTRANS-CHECKPOINT <version>
    key=value                       one line per ModelConfig field
    end-config
    param <name> <d1>x<d2>...       followed by raw little-endian float64 data
    ...
    end-params
    sha256 <hex digest of everything above>
"""

import hashlib
import io
import logging
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from stotrans.engine.model import ModelConfig, TransformerClassifier, parameter_shapes
from stotrans.engine.tensor import Tensor
from stotrans.errors import CheckpointError, ConfigError

logger = logging.getLogger(__name__)

MAGIC = "STOTRANS-CHECKPOINT"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def save_checkpoint(model: TransformerClassifier, path: Union[str, Path]) -> Path:
    path = Path(path)
    body = io.BytesIO()
    body.write(f"{MAGIC} {FORMAT_VERSION}\n".encode("utf-8"))
    for key, value in model.config.to_flat().items():
        body.write(f"{key}={value}\n".encode("utf-8"))
    body.write(b"end-config\n")
    for name, tensor in model.parameters().items():
        shape = "x".join(str(s) for s in tensor.shape)
        body.write(f"param {name} {shape}\n".encode("utf-8"))
        body.write(np.ascontiguousarray(tensor.data, dtype=_DTYPE).tobytes())
    body.write(b"end-params\n")
    payload = body.getvalue()
    digest = hashlib.sha256(payload).hexdigest()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload + f"sha256 {digest}\n".encode("utf-8"))
    logger.info(f"Saved checkpoint ({model.parameter_count} parameters) to {path}")
    return path


def _read_line(blob: bytes, cursor: int) -> Tuple[str, int]:
    end = blob.find(b"\n", cursor)
    if end < 0:
        raise CheckpointError("checkpoint is truncated")
    try:
        return blob[cursor:end].decode("utf-8"), end + 1
    except UnicodeDecodeError:
        raise CheckpointError("checkpoint header is not valid UTF-8")


def load_checkpoint(path: Union[str, Path], expected: Optional[ModelConfig] = None) -> TransformerClassifier:
    """
    Load a checkpoint, verifying version, digest and every parameter shape.

    When ``expected`` is given, any config field that differs from the stored
    one (vocab_size, say) is a load error rather than a silent reshape.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")

    footer_start = blob.rfind(b"sha256 ")
    if footer_start < 0:
        raise CheckpointError(f"{path} has no integrity footer; file is corrupt or truncated")
    payload, footer = blob[:footer_start], blob[footer_start:].decode("utf-8", "replace").strip()
    if footer != f"sha256 {hashlib.sha256(payload).hexdigest()}":
        raise CheckpointError(f"{path} failed its integrity check; file is corrupt")

    header, cursor = _read_line(payload, 0)
    parts = header.split()
    if len(parts) != 2 or parts[0] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    if parts[1] != str(FORMAT_VERSION):
        raise CheckpointError(f"checkpoint format version {parts[1]} is not supported (expected {FORMAT_VERSION})")

    flat: Dict[str, str] = {}
    while True:
        line, cursor = _read_line(payload, cursor)
        if line == "end-config":
            break
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line in checkpoint: {line!r}")
        flat[key] = value
    try:
        config = ModelConfig.from_flat(flat)
    except ConfigError as e:
        raise CheckpointError(str(e))

    if expected is not None:
        wanted = expected.to_flat()
        diffs = [f"{k}: checkpoint {flat.get(k)} vs expected {v}" for k, v in wanted.items() if flat.get(k) != v]
        if diffs:
            raise CheckpointError("checkpoint config disagrees with expected config: " + "; ".join(diffs))

    shapes = parameter_shapes(config)
    params: Dict[str, Tensor] = {}
    while True:
        line, cursor = _read_line(payload, cursor)
        if line == "end-params":
            break
        fields = line.split()
        if len(fields) != 3 or fields[0] != "param":
            raise CheckpointError(f"malformed parameter record: {line!r}")
        name = fields[1]
        try:
            shape = tuple(int(s) for s in fields[2].split("x")) if fields[2] else ()
        except ValueError:
            raise CheckpointError(f"parameter {name} has a malformed shape {fields[2]!r}")
        if shapes.get(name) != shape:
            raise CheckpointError(f"parameter {name} has shape {shape}, config implies {shapes.get(name)}")
        nbytes = int(np.prod(shape)) * _DTYPE.itemsize
        if cursor + nbytes > len(payload):
            raise CheckpointError(f"parameter {name} is truncated")
        data = np.frombuffer(payload, dtype=_DTYPE, count=int(np.prod(shape)), offset=cursor).reshape(shape)
        params[name] = Tensor.parameter(data.astype(np.float64))
        cursor += nbytes

    missing = sorted(set(shapes) - set(params))
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {', '.join(missing)}")

    logger.info(f"Loaded checkpoint from {path}")
    return TransformerClassifier(config, {name: params[name] for name in shapes})
