"""Bit-exact binary persistence for checkpoints and masks.

Checkpoint file (all integers little-endian)::

    b"LTCK" | u32 version | u64 payload_len | payload | sha256(payload)

    payload = u32 json_len | json            # model config, prunable names, meta, rng state
              u32 n_tensors | tensor*        # u8 group | u16 name_len | name | u8 ndim |
                                             #   u32 dims* | f64 data (row-major)
              u8 has_mask [| u64 size | u16 id_len | id | u64 popcount | packed bits]
              u8 has_opt  [| u64 step]

Groups: 0 backbone, 1 head, 2 buffer, 3 optimizer momentum. Creation time
and lineage notes live in a JSON sidecar (``<file>.json``) outside the
checksummed payload, so equal content gives byte-identical files.

Mask file::

    b"LTMK" | u32 version | u64 size | u64 popcount | u16 id_len | id | packed bits
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .mask import LayoutMismatch, Mask
from .network import ModelConfig, ParamStore
from .training import OptState

CKPT_MAGIC = b"LTCK"
MASK_MAGIC = b"LTMK"
VERSION = 1
_GROUPS = ("backbone", "head", "buffers", "opt")


class StoreError(IOError):
    """Base class for unreadable or inconsistent files."""


class ChecksumError(StoreError):
    pass


class VersionError(StoreError):
    pass


class CorruptFile(StoreError):
    pass


@dataclass
class Checkpoint:
    params: ParamStore
    mask: Mask | None = None
    opt: OptState | None = None
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    @property
    def id(self) -> str:
        return hashlib.sha256(encode_payload(self)).hexdigest()[:16]


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_tensor(buf: io.BytesIO, group: int, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<BH", group, len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def encode_payload(ckpt: Checkpoint) -> bytes:
    p = ckpt.params
    header = {"model": asdict(p.config), "prunable": list(p.prunable),
              "meta": ckpt.meta, "rng_state": ckpt.rng_state}
    buf = io.BytesIO()
    js = _canonical_json(header)
    buf.write(struct.pack("<I", len(js)))
    buf.write(js)
    tensors = [(0, k, v) for k, v in p.backbone.items()]
    tensors += [(1, k, v) for k, v in p.head.items()]
    tensors += [(2, k, v) for k, v in p.buffers.items()]
    if ckpt.opt is not None:
        tensors += [(3, k, v) for k, v in ckpt.opt.buffers.items()]
    buf.write(struct.pack("<I", len(tensors)))
    for group, name, arr in tensors:
        _write_tensor(buf, group, name, arr)
    if ckpt.mask is None:
        buf.write(b"\x00")
    else:
        m = ckpt.mask
        mid = m.layout_id.encode("ascii")
        buf.write(b"\x01" + struct.pack("<QH", m.size, len(mid)) + mid)
        buf.write(struct.pack("<Q", m.popcount) + m.packed.tobytes())
    if ckpt.opt is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01" + struct.pack("<Q", ckpt.opt.step))
    return buf.getvalue()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    payload = encode_payload(ckpt)
    return (CKPT_MAGIC + struct.pack("<IQ", VERSION, len(payload)) + payload
            + hashlib.sha256(payload).digest())


class _Reader:
    def __init__(self, data: bytes, base: int = 0):
        self.data = data
        self.pos = 0
        self.base = base

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptFile(f"unexpected end of payload at byte {self.base + self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 16:
        raise CorruptFile("file too short for a checkpoint header")
    if data[:4] != CKPT_MAGIC:
        raise CorruptFile(f"bad magic {data[:4]!r}, expected {CKPT_MAGIC!r}")
    version, length = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    if len(data) != 16 + length + 32:
        raise CorruptFile(f"truncated or padded checkpoint: header says {length} payload bytes, "
                          f"file has {len(data) - 48}")
    payload = data[16:16 + length]
    if hashlib.sha256(payload).digest() != data[16 + length:]:
        raise ChecksumError("checkpoint checksum mismatch")
    r = _Reader(payload, 16)
    (jlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(jlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"bad checkpoint header: {exc}") from None
    groups = {g: {} for g in _GROUPS}
    (count,) = r.unpack("<I")
    for _ in range(count):
        group, nlen = r.unpack("<BH")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        if group >= len(_GROUPS):
            raise CorruptFile(f"unknown tensor group {group}")
        groups[_GROUPS[group]][name] = arr
    mask = None
    if r.take(1) == b"\x01":
        size, idlen = r.unpack("<QH")
        layout_id = r.take(idlen).decode("ascii")
        (pop,) = r.unpack("<Q")
        mask = Mask(np.frombuffer(r.take((size + 7) // 8), dtype=np.uint8), size, layout_id)
        if mask.popcount != pop:
            raise CorruptFile("mask popcount does not match its bits")
    opt = None
    if r.take(1) == b"\x01":
        (step,) = r.unpack("<Q")
        opt = OptState(groups["opt"], step)
    if r.pos != len(payload):
        raise CorruptFile("trailing bytes in checkpoint payload")
    config = ModelConfig(**header["model"])
    params = ParamStore(config, groups["backbone"], groups["head"], groups["buffers"],
                        tuple(header["prunable"]))
    return Checkpoint(params, mask, opt, header.get("rng_state"), header.get("meta") or {})


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(ckpt: Checkpoint, path, sidecar: dict | None = None) -> Path:
    """Write the binary atomically plus a sidecar JSON with id, time and lineage."""
    path = Path(path)
    _atomic_write(path, encode_checkpoint(ckpt))
    info = {"id": ckpt.id, "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "meta": ckpt.meta, **(sidecar or {})}
    _atomic_write(sidecar_path(path), json.dumps(info, indent=2, sort_keys=True).encode())
    return path


def load_checkpoint(path, expect_layout: str | None = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StoreError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = decode_checkpoint(data)
    if expect_layout is not None and ckpt.params.layout.layout_id != expect_layout:
        raise LayoutMismatch(f"checkpoint layout {ckpt.params.layout.layout_id} "
                             f"!= expected {expect_layout}")
    return ckpt


# ---------------------------------------------------------------- masks

def encode_mask(mask: Mask) -> bytes:
    mid = mask.layout_id.encode("ascii")
    return (MASK_MAGIC + struct.pack("<IQQH", VERSION, mask.size, mask.popcount, len(mid))
            + mid + mask.packed.tobytes())


def decode_mask(data: bytes) -> Mask:
    if len(data) < 26 or data[:4] != MASK_MAGIC:
        raise CorruptFile("not a mask file (bad magic or too short)")
    version, size, pop, idlen = struct.unpack("<IQQH", data[4:26])
    if version != VERSION:
        raise VersionError(f"mask version {version} is not supported (expected {VERSION})")
    body = data[26:]
    nbytes = (size + 7) // 8
    if len(body) != idlen + nbytes:
        raise CorruptFile(f"mask payload has {len(body)} bytes, expected {idlen + nbytes}")
    try:
        mask = Mask(np.frombuffer(body[idlen:], dtype=np.uint8), size,
                    body[:idlen].decode("ascii"))
    except ValueError as exc:
        raise CorruptFile(str(exc)) from None
    if mask.popcount != pop:
        raise CorruptFile(f"popcount header {pop} != {mask.popcount} bits set")
    return mask


def save_mask(mask: Mask, path) -> Path:
    path = Path(path)
    _atomic_write(path, encode_mask(mask))
    return path


def load_mask(path, expect_layout: str | None = None) -> Mask:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StoreError(f"cannot read mask {path}: {exc}") from exc
    mask = decode_mask(data)
    if expect_layout is not None and mask.layout_id != expect_layout:
        raise LayoutMismatch(f"mask layout {mask.layout_id} != expected {expect_layout}")
    return mask


def resolve_checkpoint(store, key) -> Checkpoint:
    """Look up a rewind source: a Checkpoint, a mapping entry, or a file path."""
    if isinstance(key, Checkpoint):
        return key
    if isinstance(store, Mapping):
        if key not in store:
            raise KeyError(f"unknown checkpoint id {key!r}")
        return store[key]
    if store is not None:
        return store.get(key)
    return load_checkpoint(key)


class CheckpointStore:
    """Directory of ``<name>.ltck`` files addressable by name or content id."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / f"{name}.ltck"

    def put(self, name: str, ckpt: Checkpoint, sidecar: dict | None = None) -> Path:
        return save_checkpoint(ckpt, self.path(name), sidecar)

    def get(self, key) -> Checkpoint:
        p = Path(key)
        if p.suffix == ".ltck" and p.exists():
            return load_checkpoint(p)
        if self.path(str(key)).exists():
            return load_checkpoint(self.path(str(key)))
        for side in sorted(self.root.glob("*.ltck.json")):
            if json.loads(side.read_text()).get("id") == key:
                return load_checkpoint(side.with_suffix(""))
        raise KeyError(f"no checkpoint {key!r} under {self.root}")


def mask_id(mask: Mask) -> str:
    """Content id of a mask: first 16 hex digits of the sha256 of its file bytes."""
    return hashlib.sha256(encode_mask(mask)).hexdigest()[:16]
