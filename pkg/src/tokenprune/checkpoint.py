"""Versioned binary checkpoints with bit-exact round trips.

Layout: magic ``TPCK`` | u32 version | u64 manifest length | manifest JSON |
raw little-endian array data (params, then optimizer moments, in manifest
order) | u32 CRC32 of everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import Tensor
from .errors import CorruptionError, FormatError, IncompatibleError
from .model import ModelConfig, VisionTransformer, param_shapes

MAGIC = b"TPCK"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    opt_state: dict | None = None   # {"t": int, "m": {...}, "v": {...}}
    epoch: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)
    version: int = VERSION


def _dtype_tag(arr: np.ndarray) -> str:
    kind = np.dtype(arr.dtype)
    if kind == np.float32:
        return "<f4"
    if kind == np.float64:
        return "<f8"
    raise FormatError(f"unsupported parameter dtype {arr.dtype}")


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    arrays: list[np.ndarray] = []
    param_entries = []
    for name in sorted(ckpt.params):
        arr = ckpt.params[name]
        param_entries.append({"name": name, "shape": list(arr.shape), "dtype": _dtype_tag(arr)})
        arrays.append(arr)
    opt_entry = None
    if ckpt.opt_state is not None:
        opt_entry = {"t": int(ckpt.opt_state["t"]), "arrays": []}
        for kind in ("m", "v"):
            for name in sorted(ckpt.opt_state[kind]):
                arr = ckpt.opt_state[kind][name]
                opt_entry["arrays"].append(
                    {"kind": kind, "name": name, "shape": list(arr.shape), "dtype": _dtype_tag(arr)}
                )
                arrays.append(arr)
    manifest = {
        "config": asdict(ckpt.config),
        "params": param_entries,
        "opt": opt_entry,
        "epoch": int(ckpt.epoch),
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", ckpt.version)
    blob += struct.pack("<Q", len(mbytes))
    blob += mbytes
    for arr in arrays:
        blob += np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20:
        raise FormatError(f"{path}: too short to be a checkpoint ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise IncompatibleError(f"{path}: checkpoint version {version}, expected {VERSION}")
    (crc_stored,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc_stored:
        raise CorruptionError(f"{path}: CRC32 mismatch, file is corrupt")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    mstart = 16
    mend = mstart + mlen
    if mend > len(raw) - 4:
        raise FormatError(f"{path}: manifest length {mlen} exceeds file size")
    manifest = json.loads(raw[mstart:mend].decode("utf-8"))

    config = ModelConfig(**manifest["config"])
    expected = param_shapes(config)
    offset = mend
    params: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        name, shape, dtag = entry["name"], tuple(entry["shape"]), entry["dtype"]
        if name not in expected or expected[name] != shape:
            raise IncompatibleError(f"{path}: parameter {name} shape {shape} disagrees with embedded config")
        arr, offset = _read_array(raw, offset, shape, dtag, path)
        params[name] = arr
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        raise IncompatibleError(f"{path}: manifest is missing parameters {missing[:3]}...")

    opt_state = None
    if manifest["opt"] is not None:
        opt_state = {"t": manifest["opt"]["t"], "m": {}, "v": {}}
        for entry in manifest["opt"]["arrays"]:
            arr, offset = _read_array(raw, offset, tuple(entry["shape"]), entry["dtype"], path)
            opt_state[entry["kind"]][entry["name"]] = arr
    if offset != len(raw) - 4:
        raise FormatError(f"{path}: {len(raw) - 4 - offset} unexpected trailing bytes")

    return Checkpoint(
        config=config, params=params, opt_state=opt_state,
        epoch=manifest["epoch"], rng_state=manifest["rng_state"],
        extra=manifest.get("extra", {}), version=version,
    )


def _read_array(raw: bytes, offset: int, shape: tuple, dtag: str, path: str):
    dtype = np.dtype(dtag)
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
    end = offset + nbytes
    if end > len(raw) - 4:
        raise FormatError(f"{path}: array data truncated at offset {offset}")
    arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)) if shape else 1, offset=offset)
    return arr.reshape(shape).copy(), end


def model_from_checkpoint(ckpt: Checkpoint, dtype=None) -> VisionTransformer:
    """Rebuild a model from saved parameters; optionally cast (e.g. to float64
    for verification runs)."""
    params = {}
    for name, arr in ckpt.params.items():
        data = arr if dtype is None else arr.astype(dtype)
        params[name] = Tensor(data, requires_grad=True)
    target_dtype = dtype if dtype is not None else next(iter(ckpt.params.values())).dtype
    return VisionTransformer(ckpt.config, params=params, dtype=target_dtype)
