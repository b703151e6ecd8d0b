"""Binary checkpoint format.

Layout, all integers little-endian:

    magic b"DSWN" | version u32
    config block: u64 length + UTF-8 key=value lines (model geometry)
    extra block:  u64 length + UTF-8 key=value lines (caller metadata)
    tensor count u64, then per tensor:
        u16 name length + name | u8 dtype code | u8 ndim | u64 dims | raw data
    sha256 of everything above (32 bytes)

Optimizer moments travel as ordinary tensor records under reserved
"adam.m."/"adam.v." name prefixes, so a best-model checkpoint can simply
omit them. Every failure mode gets its own error class: bad magic or
truncation, unknown version, digest mismatch, shape disagreement with the
embedded config, and config mismatch against the caller's expectation.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .embedding import PatchConfig
from .errors import (
    CheckpointFormatError,
    CheckpointIncompatibleError,
    CheckpointIntegrityError,
    CheckpointShapeError,
    CheckpointVersionError,
)
from .model import ModelConfig, ModelParams, init_model, named_parameters
from .tensor import Tensor

MAGIC = b"DSWN"
VERSION = 1
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_MOMENT_PREFIXES = ("adam.m.", "adam.v.")


def _config_to_text(config: ModelConfig) -> str:
    p = config.patch
    items = [
        ("image_h", p.image_h), ("image_w", p.image_w), ("patch_size", p.patch_size),
        ("embed_dim", p.embed_dim), ("channels", p.channels), ("cls_mode", p.cls_mode),
        ("depths", ",".join(map(str, config.depths))),
        ("heads", ",".join(map(str, config.heads))),
        ("window", config.window), ("expansion", config.expansion), ("kernel", config.kernel),
        ("num_classes", config.num_classes), ("head_dropout", repr(config.head_dropout)),
        ("sublayer_kind", config.sublayer_kind),
        ("stage_merging", int(config.stage_merging)),
        ("irb_inner_skip", int(config.irb_inner_skip)),
    ]
    return "".join(f"{k}={v}\n" for k, v in items)


def _parse_kv(text: str, what: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise CheckpointFormatError(f"malformed {what} line: {line!r}")
        k, _, v = line.partition("=")
        out[k] = v
    return out


def _config_from_text(text: str) -> ModelConfig:
    kv = _parse_kv(text, "config")
    try:
        patch = PatchConfig(
            image_h=int(kv["image_h"]), image_w=int(kv["image_w"]),
            patch_size=int(kv["patch_size"]), embed_dim=int(kv["embed_dim"]),
            channels=int(kv["channels"]), cls_mode=kv["cls_mode"],
        )
        return ModelConfig(
            patch=patch,
            depths=tuple(int(x) for x in kv["depths"].split(",")),
            heads=tuple(int(x) for x in kv["heads"].split(",")),
            window=int(kv["window"]), expansion=int(kv["expansion"]), kernel=int(kv["kernel"]),
            num_classes=int(kv["num_classes"]), head_dropout=float(kv["head_dropout"]),
            sublayer_kind=kv["sublayer_kind"],
            stage_merging=bool(int(kv["stage_merging"])),
            irb_inner_skip=bool(int(kv["irb_inner_skip"])),
        )
    except KeyError as exc:
        raise CheckpointFormatError(f"config block is missing {exc}") from exc


def _encode_block(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<Q", len(raw)) + raw


def _encode_tensor(name: str, data: np.ndarray) -> bytes:
    dtype = np.dtype(data.dtype)
    if dtype not in _DTYPE_CODES:
        raise CheckpointFormatError(f"unsupported dtype {dtype} for {name!r}")
    nraw = name.encode("utf-8")
    head = struct.pack("<H", len(nraw)) + nraw
    head += struct.pack("<BB", _DTYPE_CODES[dtype], data.ndim)
    head += struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b""
    little = data.astype(dtype.newbyteorder("<"), copy=False)
    return head + np.ascontiguousarray(little).tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


@dataclass
class LoadedCheckpoint:
    params: ModelParams
    config: ModelConfig
    extra: dict[str, str]
    moments: Optional[dict[str, tuple[np.ndarray, np.ndarray]]]


def save_checkpoint(
    path,
    params: ModelParams,
    config: ModelConfig,
    extra: Optional[dict[str, str]] = None,
    moments: Optional[dict[str, tuple[np.ndarray, np.ndarray]]] = None,
) -> None:
    extra = dict(extra or {})
    for k, v in extra.items():
        if "\n" in k or "\n" in str(v) or "=" in k:
            raise CheckpointFormatError(f"metadata key/value must be single-line, '=': {k!r}")
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    chunks.append(_encode_block(_config_to_text(config)))
    chunks.append(_encode_block("".join(f"{k}={v}\n" for k, v in sorted(extra.items()))))

    records: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in named_parameters(params)]
    if moments:
        for name in sorted(moments):
            m, v = moments[name]
            records.append((f"adam.m.{name}", m))
            records.append((f"adam.v.{name}", v))
    chunks.append(struct.pack("<Q", len(records)))
    for name, data in records:
        chunks.append(_encode_tensor(name, data))

    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> LoadedCheckpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4 + 32:
        raise CheckpointFormatError("checkpoint is truncated")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic bytes)")
    (version,) = struct.unpack_from("<I", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    body, digest = raw[:-32], raw[-32:]

    r = _Reader(body)
    r.take(len(MAGIC) + 4)
    (clen,) = r.unpack("<Q")
    config = _config_from_text(r.take(clen).decode("utf-8"))
    if expected_config is not None and config != expected_config:
        raise CheckpointIncompatibleError(
            "checkpoint was produced by a different model configuration"
        )
    (elen,) = r.unpack("<Q")
    extra = _parse_kv(r.take(elen).decode("utf-8"), "metadata")

    (count,) = r.unpack("<Q")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointFormatError(f"unknown dtype code {code} for {name!r}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        dtype = _CODE_DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(r.take(n * dtype.itemsize), dtype=dtype).reshape(shape)
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor record {name!r}")
        tensors[name] = data
    if r.pos != len(body):
        raise CheckpointFormatError("trailing bytes after tensor records")
    # Structure is sound; now insist the payload is byte-for-byte intact.
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError("checkpoint digest mismatch (file corrupted)")

    params = init_model(config, seed=0)
    moments: dict[str, tuple[Optional[np.ndarray], Optional[np.ndarray]]] = {}
    expected = dict(named_parameters(params))
    for name, data in tensors.items():
        prefix = next((p for p in _MOMENT_PREFIXES if name.startswith(p)), None)
        key = name[len(prefix):] if prefix else name
        if key not in expected:
            raise CheckpointFormatError(f"unexpected tensor record {name!r}")
        if data.shape != expected[key].data.shape:
            raise CheckpointShapeError(
                f"tensor {name!r} has shape {data.shape}, config implies {expected[key].data.shape}"
            )
        # frombuffer views are read-only; training mutates storage in place.
        if prefix is None:
            expected[key].data = data.copy()
        else:
            slot = moments.setdefault(key, [None, None])
            slot[0 if prefix == "adam.m." else 1] = data.copy()
    missing = [n for n, t in expected.items() if n not in tensors]
    if missing:
        raise CheckpointFormatError(f"checkpoint is missing tensors: {missing[:3]}")
    for key, (m, v) in moments.items():
        if m is None or v is None:
            raise CheckpointFormatError(f"optimizer moments for {key!r} are incomplete")

    out_moments = {k: (m, v) for k, (m, v) in moments.items()} if moments else None
    return LoadedCheckpoint(params, config, extra, out_moments)
