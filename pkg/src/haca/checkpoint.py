"""Binary checkpoints.

Layout: magic ``b"HACA"``, one version byte, then a sequence of sections::

    u16 name length | name (utf-8) | u64 payload length | payload | u32 crc32(payload)

all little-endian, closed by a section named ``end`` with an empty payload.
Tensor payloads are ``u8 ndim``, ``ndim`` x ``u32`` dims, then float64 data.
Text payloads (config, metadata) are ``key = value`` lines; the generator
state is JSON.  Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"HACA"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict[str, str]
    params: dict[str, np.ndarray]
    optimizer: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    rng_state: dict | None = None
    epoch: int = 0
    meta: dict[str, str] = field(default_factory=dict)
    version: int = VERSION


def _encode_tensor(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape) + a.tobytes()


def _decode_tensor(payload: bytes, where: str) -> np.ndarray:
    if len(payload) < 1:
        raise CheckpointError(f"{where}: empty tensor payload")
    ndim = payload[0]
    head = 1 + 4 * ndim
    if len(payload) < head:
        raise CheckpointError(f"{where}: truncated tensor header")
    shape = struct.unpack_from(f"<{ndim}I", payload, 1)
    count = int(np.prod(shape)) if ndim else 1
    if len(payload) != head + 8 * count:
        raise CheckpointError(
            f"{where}: tensor of shape {shape} needs {8 * count} data bytes, "
            f"found {len(payload) - head}")
    return np.frombuffer(payload, dtype="<f8", offset=head).reshape(shape).astype(np.float64)


def _encode_text(values: dict[str, str]) -> bytes:
    return "".join(f"{k} = {v}\n" for k, v in values.items()).encode()


def _decode_text(payload: bytes) -> dict[str, str]:
    out = {}
    for line in payload.decode().splitlines():
        if line.strip():
            k, _, v = line.partition(" = ")
            out[k] = v
    return out


def _section(name: str, payload: bytes) -> bytes:
    raw = name.encode()
    return (struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(payload)) + payload
            + struct.pack("<I", zlib.crc32(payload)))


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, bytes([ckpt.version])]
    parts.append(_section("config", _encode_text(ckpt.config)))
    meta = dict(ckpt.meta)
    meta["epoch"] = str(ckpt.epoch)
    parts.append(_section("meta", _encode_text(meta)))
    for name, arr in ckpt.params.items():
        parts.append(_section(f"param:{name}", _encode_tensor(arr)))
    for slot, arrays in ckpt.optimizer.items():
        for name, arr in arrays.items():
            parts.append(_section(f"opt:{slot}:{name}", _encode_tensor(arr)))
    if ckpt.rng_state is not None:
        parts.append(_section("rng", json.dumps(ckpt.rng_state, sort_keys=True).encode()))
    parts.append(_section("end", b""))
    return b"".join(parts)


def from_bytes(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{source} offset 0: bad magic {blob[:4]!r}, not a checkpoint")
    if len(blob) < 5:
        raise CheckpointError(f"{source} offset 4: missing version byte")
    version = blob[4]
    if version != VERSION:
        raise CheckpointError(
            f"{source} offset 4: checkpoint version {version}, this build reads {VERSION}")
    ckpt = Checkpoint(config={}, params={}, version=version)
    pos = 5
    ended = False
    while pos < len(blob):
        start = pos
        if pos + 2 > len(blob):
            raise CheckpointError(f"{source} offset {start}: truncated section header")
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if pos + nlen + 8 > len(blob):
            raise CheckpointError(f"{source} offset {start}: truncated section header")
        name = blob[pos:pos + nlen].decode(errors="replace")
        pos += nlen
        (plen,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        if pos + plen + 4 > len(blob):
            raise CheckpointError(
                f"{source} offset {start}: section {name!r} truncated "
                f"(needs {plen + 4} bytes at offset {pos}, file has {len(blob) - pos})")
        payload = blob[pos:pos + plen]
        pos += plen
        (crc,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"{source} offset {start}: checksum mismatch in section {name!r}")
        where = f"{source} offset {start} ({name})"
        if name == "end":
            ended = True
            break
        if name == "config":
            ckpt.config = _decode_text(payload)
        elif name == "meta":
            ckpt.meta = _decode_text(payload)
            ckpt.epoch = int(ckpt.meta.pop("epoch", "0"))
        elif name.startswith("param:"):
            ckpt.params[name[6:]] = _decode_tensor(payload, where)
        elif name.startswith("opt:"):
            _, slot, pname = name.split(":", 2)
            ckpt.optimizer.setdefault(slot, {})[pname] = _decode_tensor(payload, where)
        elif name == "rng":
            ckpt.rng_state = json.loads(payload.decode())
        else:
            raise CheckpointError(f"{where}: unknown section")
    if not ended:
        raise CheckpointError(f"{source} offset {pos}: missing end section (file truncated)")
    if pos != len(blob):
        raise CheckpointError(f"{source} offset {pos}: trailing bytes after end section")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(to_bytes(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes(), str(path))
