"""Portable binary snapshots of named tensors plus vocabulary and config.

Layout (all integers little-endian):

    magic "ULMF" | version u32 | meta_len u32 | metadata JSON (UTF-8)
    | tensor_count u32 | records... | crc32 u32

Each record is ``name_len u16 | name | rank u8 | dims u32*rank | payload``
with the payload in IEEE-754 single precision. The trailing CRC covers
every preceding byte; tensors are written in sorted name order so that
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .classifier import ClassifierHead, ClassifierModel, HeadConfig
from .lm import LmConfig, LmModel
from .text import Vocab

MAGIC = b"ULMF"
VERSION = 1


class CheckpointError(Exception):
    """Malformed, corrupt, or incompatible checkpoint files."""


@dataclass
class Checkpoint:
    """In-memory form: metadata dict plus named float32 arrays."""
    metadata: dict
    tensors: dict[str, np.ndarray]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f4")
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    blob = b"".join(parts)
    blob += struct.pack("<I", zlib.crc32(blob))
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    off = 4
    version, = struct.unpack_from("<I", blob, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (expected {VERSION})")
    meta_len, = struct.unpack_from("<I", blob, off)
    off += 4
    metadata = json.loads(blob[off:off + meta_len].decode("utf-8"))
    off += meta_len
    count, = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        rank, = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n_bytes = 4 * int(np.prod(dims)) if rank else 4
        arr = np.frombuffer(blob, dtype="<f4", count=max(int(np.prod(dims)), 1) if rank else 1,
                            offset=off).reshape(dims)
        tensors[name] = arr.copy()
        off += n_bytes
    return Checkpoint(metadata=metadata, tensors=tensors)


# ---------------------------------------------------------------------------
# model <-> checkpoint
# ---------------------------------------------------------------------------

def checkpoint_from_lm(model: LmModel, vocab: Vocab, token_mode: str,
                       extra: Optional[dict] = None) -> Checkpoint:
    meta = {
        "kind": "lm",
        "lm_config": model.config.to_dict(),
        "token_mode": token_mode,
        "vocab": vocab.id_to_token,
    }
    if extra:
        meta.update(extra)
    tensors = {name: p.data for name, p in model.named_params().items()}
    return Checkpoint(metadata=meta, tensors=tensors)


def checkpoint_from_classifier(model: ClassifierModel, vocab: Vocab,
                               token_mode: str, labels: list[str],
                               extra: Optional[dict] = None) -> Checkpoint:
    meta = {
        "kind": "classifier",
        "lm_config": model.trunk.config.to_dict(),
        "head_config": {
            "n_classes": model.head.config.n_classes,
            "hidden": model.head.config.hidden,
            "drops": list(model.head.config.drops),
            "use_batch_norm": model.head.config.use_batch_norm,
        },
        "token_mode": token_mode,
        "vocab": vocab.id_to_token,
        "labels": labels,
    }
    if extra:
        meta.update(extra)
    tensors = {name: p.data for name, p in model.named_params().items()}
    tensors.update(model.head.named_buffers())
    return Checkpoint(metadata=meta, tensors=tensors)


def _fill_params(named, tensors, source: str) -> None:
    expected = set(named)
    got = set(tensors)
    if expected - got:
        raise CheckpointError(f"{source}: missing tensors {sorted(expected - got)}")
    for name, param in named.items():
        arr = tensors[name]
        if tuple(arr.shape) != tuple(param.shape):
            raise CheckpointError(
                f"{source}: tensor {name!r} has shape {arr.shape}, "
                f"model expects {param.shape}")
        param.data = arr.astype(param.data.dtype, copy=True)


def restore_lm(ckpt: Checkpoint) -> tuple[LmModel, Vocab, str]:
    """Rebuild an LM (architecture from metadata) and load its weights."""
    if ckpt.metadata.get("kind") != "lm":
        raise CheckpointError(f"checkpoint holds {ckpt.metadata.get('kind')!r}, not an LM")
    config = LmConfig.from_dict(ckpt.metadata["lm_config"])
    vocab = Vocab(ckpt.metadata["vocab"])
    model = LmModel(config)
    named = model.named_params()
    unknown = set(ckpt.tensors) - set(named)
    if unknown:
        raise CheckpointError(f"unknown tensor names {sorted(unknown)}")
    _fill_params(named, ckpt.tensors, "lm checkpoint")
    return model, vocab, ckpt.metadata["token_mode"]


def restore_classifier(ckpt: Checkpoint) -> tuple[ClassifierModel, Vocab, str, list[str]]:
    if ckpt.metadata.get("kind") != "classifier":
        raise CheckpointError(
            f"checkpoint holds {ckpt.metadata.get('kind')!r}, not a classifier")
    config = LmConfig.from_dict(ckpt.metadata["lm_config"])
    hc = ckpt.metadata["head_config"]
    head_config = HeadConfig(n_classes=hc["n_classes"], hidden=hc["hidden"],
                             drops=tuple(hc["drops"]),
                             use_batch_norm=hc["use_batch_norm"])
    vocab = Vocab(ckpt.metadata["vocab"])
    trunk = LmModel(config)
    model = ClassifierModel(trunk, head_config)
    named = model.named_params()
    buffers = model.head.named_buffers()
    unknown = set(ckpt.tensors) - set(named) - set(buffers)
    if unknown:
        raise CheckpointError(f"unknown tensor names {sorted(unknown)}")
    _fill_params(named, {k: v for k, v in ckpt.tensors.items() if k in named},
                 "classifier checkpoint")
    for name, buf in buffers.items():
        if name in ckpt.tensors:
            arr = ckpt.tensors[name]
            if arr.shape != buf.shape:
                raise CheckpointError(
                    f"buffer {name!r} has shape {arr.shape}, expected {buf.shape}")
            buf[:] = arr
    return model, vocab, ckpt.metadata["token_mode"], list(ckpt.metadata["labels"])
