"""GS4M checkpoint container.

Layout, little-endian throughout:

    b"GS4M"  u32 version  u32 doc_len  doc (UTF-8 JSON)
    u32 tensor_count
    per tensor: u32 name_len  name  u32 rank  u32 dims[rank]  f8 values[prod(dims)]

The JSON document holds the ModelConfig, the init seed and whether a
classification head is attached. Tensors are written in state_dict order.
"""
import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np
import torch
from loguru import logger

from ..core.errors import MissingArtifactError, ParseError
from ..schemas.model import ModelConfig
from .graph_s4 import GraphS4Model

MAGIC = b"GS4M"
VERSION = 1

PathLike = Union[str, Path]


def serialize(model: GraphS4Model) -> bytes:
    doc = {
        "model": model.config.model_dump(mode="json"),
        "seed": model.seed,
        "has_classifier": model.cls_head is not None,
    }
    doc_bytes = json.dumps(doc, sort_keys=True).encode("utf-8")
    state = model.state_dict()

    chunks = [MAGIC, struct.pack("<II", VERSION, len(doc_bytes)), doc_bytes, struct.pack("<I", len(state))]
    for name, tensor in state.items():
        name_bytes = name.encode("utf-8")
        values = tensor.detach().cpu().to(torch.float64).numpy()
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<I", values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}I", *values.shape))
        chunks.append(np.ascontiguousarray(values, dtype="<f8").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise ParseError("truncated checkpoint", offset=self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u32s(self, count: int) -> tuple:
        return struct.unpack(f"<{count}I", self.take(4 * count))


def deserialize(data: bytes) -> GraphS4Model:
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise ParseError("not a GS4M checkpoint", offset=0)
    version = reader.u32()
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=4)
    doc_len = reader.u32()
    doc_offset = reader.offset
    try:
        doc = json.loads(reader.take(doc_len).decode("utf-8"))
        config = ModelConfig(**doc["model"])
    except (ValueError, KeyError, TypeError) as e:
        raise ParseError(f"bad embedded config: {e}", offset=doc_offset) from e

    tensors: Dict[str, torch.Tensor] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        dims = reader.u32s(rank)
        count = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(dims)
        tensors[name] = torch.from_numpy(values.copy())
    if reader.offset != len(data):
        raise ParseError("trailing bytes after last tensor", offset=reader.offset)

    model = GraphS4Model(config, seed=int(doc.get("seed", 0)))
    if doc.get("has_classifier"):
        model.attach_classifier()
    state = model.state_dict()
    missing = sorted(set(state) - set(tensors))
    unexpected = sorted(set(tensors) - set(state))
    if missing or unexpected:
        raise ParseError(f"tensor names do not match the model: missing {missing}, unexpected {unexpected}")
    for name, value in tensors.items():
        if tuple(value.shape) != tuple(state[name].shape):
            raise ParseError(f"tensor {name} has shape {tuple(value.shape)}, expected {tuple(state[name].shape)}")
    model.load_state_dict({name: value.to(state[name].dtype) for name, value in tensors.items()})
    return model


def save_checkpoint(model: GraphS4Model, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize(model))
    logger.debug("Wrote checkpoint {}", path)
    return path


def load_checkpoint(path: PathLike) -> GraphS4Model:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path, "checkpoint")
    model = deserialize(path.read_bytes())
    model.eval()
    return model


def file_sha256(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
