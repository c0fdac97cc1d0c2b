"""CKPT1 checkpoints: named EMB1 sections plus a trailing config hash.

Layout (little-endian)::

    b"CKPT" | u32 version=1 | u32 section count
    per section: u16 name length | name bytes (UTF-8) | EMB1 record
    32-byte SHA-256 of the canonical training config

Besides one section per parameter tensor, two bookkeeping sections are
written: ``@frozen`` (1×P flags in parameter order) and ``@config`` (the
canonical config text, one byte per f32 value).
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np

from .. import emb
from ..diffcore import ModelParams
from ..emb import FormatError
from .config import TrainConfig
from .model import ErbaModel

log = logging.getLogger(__name__)

MAGIC = b"CKPT"
VERSION = 1
HASH_BYTES = 32
FROZEN_SECTION = "@frozen"
CONFIG_SECTION = "@config"


def encode_checkpoint(params: ModelParams, config: TrainConfig) -> bytes:
    text = config.canonical_text().encode("utf-8")
    sections: list[tuple[str, np.ndarray]] = [(name, t.data) for name, t in params.items()]
    sections.append((FROZEN_SECTION, np.array([[float(params.is_frozen(n)) for n in params.names()]])))
    sections.append((CONFIG_SECTION, np.frombuffer(text, dtype=np.uint8).astype(np.float64)[None, :]))
    out = bytearray(MAGIC + struct.pack("<II", VERSION, len(sections)))
    for name, data in sections:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw + emb.encode(data)
    out += config.config_hash()
    return bytes(out)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], bytes]:
    if len(buf) < 12:
        raise FormatError("truncated checkpoint header", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    offset = 12
    sections: dict[str, np.ndarray] = {}
    for i in range(count):
        if len(buf) - offset <= HASH_BYTES:
            raise FormatError(f"section count mismatch: header declares {count}, found {i}", offset)
        (nlen,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        if offset + nlen > len(buf):
            raise FormatError("truncated section name", offset)
        name = bytes(buf[offset:offset + nlen]).decode("utf-8")
        offset += nlen
        if name in sections:
            raise FormatError(f"duplicate section {name!r}", offset - nlen)
        sections[name], offset = emb.decode(buf, offset)
    if len(buf) - offset != HASH_BYTES:
        raise FormatError(
            f"expected {HASH_BYTES}-byte config hash after {count} sections, found {len(buf) - offset} bytes",
            offset)
    return sections, bytes(buf[offset:])


def save_checkpoint(model: ErbaModel, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(model.params, model.config))


def load_checkpoint(path: str | Path, expected: TrainConfig | None = None) -> ErbaModel:
    """Rebuild a model from a checkpoint; warn when ``expected`` hashes differently."""
    sections, digest = decode_checkpoint(Path(path).read_bytes())
    try:
        frozen = sections.pop(FROZEN_SECTION).ravel()
        text_codes = sections.pop(CONFIG_SECTION).ravel()
    except KeyError as exc:
        raise FormatError(f"missing bookkeeping section {exc}", 0) from exc
    config = TrainConfig.from_text(bytes(text_codes.astype(np.uint8)).decode("utf-8"), str(path))
    if config.config_hash() != digest:
        raise FormatError("stored config does not match the config hash", 0)
    if frozen.size != len(sections):
        raise FormatError(f"frozen flags cover {frozen.size} tensors, file has {len(sections)}", 0)
    if expected is not None and expected.config_hash() != digest:
        log.warning("checkpoint %s was trained with a different config", path)

    params = ModelParams()
    for (name, data), flag in zip(sections.items(), frozen):
        params.add(name, data, frozen=bool(flag))
    model = ErbaModel(config, params)
    if set(model.params.names()) != set(sections):
        raise FormatError("checkpoint tensors do not match the model layout", 0)
    return model
