"""
Versioned binary container for trained models.

Layout (all integers little-endian):

    magic           4 bytes   b"NGAM"
    format_version  uint32
    header_length   uint32
    header          UTF-8 JSON: format_version, config, tensors[], pipeline, provenance
    blobs           raw tensor bytes in header order
                    (<f8 parameters, |u1 masks and flags, <i8 counters)
    digest          32 bytes  SHA-256 of everything above

Each tensor entry in the header carries name, dtype, shape, offset and nbytes,
with offsets relative to the start of the blob section.
"""
import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from exceptions import ArtifactError
from models import ModelConfig
from network import NodeGamModel
from preprocess import Pipeline
from utils.atomic import atomic_write_bytes

MAGIC = b"NGAM"
FORMAT_VERSION = 1
_DIGEST_SIZE = 32
_PREFIX = struct.Struct("<4sII")

_DTYPES = {
    torch.float64: "<f8",
    torch.bool: "|u1",
    torch.int64: "<i8",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class ModelArtifact(BaseModel):
    """A loaded container: the model plus whatever was stored with it."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: NodeGamModel = Field(..., description="Model with parameters restored bit-exactly")
    pipeline: Optional[Pipeline] = Field(default=None, description="Preprocessing pipeline fitted with the model")
    provenance: Dict[str, Any] = Field(default_factory=dict, description="Lineage, e.g. pretrained model digest")


def _encode_tensor(tensor: torch.Tensor) -> tuple[str, bytes]:
    tensor = tensor.detach().cpu()
    if tensor.dtype not in _DTYPES:
        raise ArtifactError("unsupported tensor dtype", {"dtype": str(tensor.dtype)})
    code = _DTYPES[tensor.dtype]
    array = tensor.numpy().astype(np.dtype(code), copy=False)
    return code, np.ascontiguousarray(array).tobytes()


def serialize_model(
    model: NodeGamModel,
    pipeline: Optional[Pipeline] = None,
    provenance: Optional[Dict[str, Any]] = None,
) -> bytes:
    """Encode a model (and optional pipeline / provenance) into container bytes."""
    entries, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        code, data = _encode_tensor(tensor)
        entries.append({
            "name": name,
            "dtype": code,
            "shape": list(tensor.shape),
            "offset": offset,
            "nbytes": len(data),
        })
        blobs.append(data)
        offset += len(data)

    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.model_dump(mode="json"),
        "tensors": entries,
        "pipeline": pipeline.model_dump(mode="json") if pipeline is not None else None,
        "provenance": provenance or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def deserialize_model(data: bytes) -> ModelArtifact:
    """
    Decode container bytes.

    Raises:
        ArtifactError: On bad magic, unsupported version, checksum mismatch or
            a tensor table that does not match the configured architecture
    """
    if len(data) < _PREFIX.size + _DIGEST_SIZE:
        raise ArtifactError("model file is truncated", {"size": len(data)})
    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ArtifactError("model file checksum mismatch")

    magic, version, header_length = _PREFIX.unpack_from(body, 0)
    if magic != MAGIC:
        raise ArtifactError("not a model container", {"magic": magic})
    if version != FORMAT_VERSION:
        raise ArtifactError("unsupported container version", {"version": version, "supported": FORMAT_VERSION})

    start = _PREFIX.size
    header = json.loads(body[start:start + header_length].decode("utf-8"))
    blob_start = start + header_length

    config = ModelConfig.model_validate(header["config"])
    model = NodeGamModel(config)
    state = {}
    for entry in header["tensors"]:
        begin = blob_start + entry["offset"]
        raw = body[begin:begin + entry["nbytes"]]
        array = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensor = torch.from_numpy(array.copy())
        if entry["dtype"] == "|u1":
            tensor = tensor.to(torch.bool)
        state[entry["name"]] = tensor
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise ArtifactError(f"tensor table does not match the configuration: {e}") from e

    pipeline = Pipeline.model_validate(header["pipeline"]) if header.get("pipeline") else None
    return ModelArtifact(model=model, pipeline=pipeline, provenance=header.get("provenance") or {})


def save_model(
    path: Union[str, Path],
    model: NodeGamModel,
    pipeline: Optional[Pipeline] = None,
    provenance: Optional[Dict[str, Any]] = None,
) -> Path:
    """Atomically write a model container."""
    path = atomic_write_bytes(path, serialize_model(model, pipeline, provenance))
    logger.info(f"Saved model container: {path}")
    return path


def load_model(path: Union[str, Path]) -> ModelArtifact:
    """Read and verify a model container."""
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"Model file not found: {path}")
    artifact = deserialize_model(path.read_bytes())
    logger.info(f"Loaded model container: {path} (step {int(artifact.model.step)})")
    return artifact


def model_digest(path: Union[str, Path]) -> str:
    """SHA-256 hex digest of a container file."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
