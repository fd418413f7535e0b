"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic            8 bytes  b"MLMLABCK"
    version          u32      (currently 1)
    config_len       u64      followed by canonical config text (utf-8)
    step             u64
    rng_len          u64      followed by rng-state json (utf-8)
    has_opt          u8       optimizer moments present?
    n_arrays         u64
    then per array, sorted by name (params first, then "adam.m.*"/"adam.v.*"):
    name_len u16 | name utf-8 | dtype u8 (1=<f4, 2=<f8) | rank u8
    | extents u64*rank | payload, row-major IEEE-754

Writes are atomic (temp file + rename).  load(save(x)) round-trips bit-exactly.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = b"MLMLABCK"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    step: int
    rng_json: str
    params: dict[str, np.ndarray]
    opt: dict[str, np.ndarray] | None = field(default=None)

    def names(self) -> list[str]:
        return sorted(self.params)


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    tag = _DTYPE_TAGS.get(np.dtype(arr.dtype.str.replace(">", "<")))
    if tag is None:
        raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<BB", tag, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    arrays: list[tuple[str, np.ndarray]] = [(k, ckpt.params[k]) for k in sorted(ckpt.params)]
    if ckpt.opt is not None:
        arrays += [(k, ckpt.opt[k]) for k in sorted(ckpt.opt)]
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            cfg = ckpt.config_text.encode("utf-8")
            fh.write(struct.pack("<Q", len(cfg)))
            fh.write(cfg)
            fh.write(struct.pack("<Q", ckpt.step))
            rng = ckpt.rng_json.encode("utf-8")
            fh.write(struct.pack("<Q", len(rng)))
            fh.write(rng)
            fh.write(struct.pack("<B", 1 if ckpt.opt is not None else 0))
            fh.write(struct.pack("<Q", len(arrays)))
            for name, arr in arrays:
                _write_array(fh, name, arr)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(b)}")
    return b


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (clen,) = struct.unpack("<Q", _read_exact(fh, 8))
        config_text = _read_exact(fh, clen).decode("utf-8")
        (step,) = struct.unpack("<Q", _read_exact(fh, 8))
        (rlen,) = struct.unpack("<Q", _read_exact(fh, 8))
        rng_json = _read_exact(fh, rlen).decode("utf-8")
        (has_opt,) = struct.unpack("<B", _read_exact(fh, 1))
        (n_arrays,) = struct.unpack("<Q", _read_exact(fh, 8))
        params: dict[str, np.ndarray] = {}
        opt: dict[str, np.ndarray] = {}
        for _ in range(n_arrays):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, nlen).decode("utf-8")
            tag, rank = struct.unpack("<BB", _read_exact(fh, 2))
            if tag not in _TAG_DTYPES:
                raise CheckpointError(f"{path}: array {name!r} has unknown dtype tag {tag}")
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            dt = _TAG_DTYPES[tag]
            arr = np.frombuffer(_read_exact(fh, dt.itemsize * int(np.prod(shape, dtype=np.int64))),
                                dtype=dt).reshape(shape).copy()
            (opt if name.startswith("adam.") else params)[name] = arr
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after arrays")
    if has_opt and not opt:
        raise CheckpointError(f"{path}: optimizer flag set but no adam.* arrays")
    if not has_opt and opt:
        raise CheckpointError(f"{path}: unexpected adam.* arrays")
    return Checkpoint(config_text, step, rng_json, params, opt if has_opt else None)
