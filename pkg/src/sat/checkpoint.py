"""Binary checkpoint format, bit-exact:

    magic "SATCKPT1" | u32 header_len | UTF-8 JSON header | records...
    record: u32 name_len | name | u8 dtype_tag (0 = f64) | u8 rank
            | rank * u64 dims | raw little-endian values

The header carries run config, normalization statistics, the embodiment
registry manifest, the RNG seed, and the step count — everything needed to
resume training deterministically. Optimizer moments ride along as ordinary
records named "opt.m.<param>" / "opt.v.<param>".
"""

import json
import struct

import numpy as np

from .autodiff import Tensor

MAGIC = b"SATCKPT1"
FORMAT_VERSION = 1
_DTYPE_F64 = 0


class CheckpointError(Exception):
    pass


def _write_record(fh, name: str, arr: np.ndarray):
    # asarray (not ascontiguousarray): the latter promotes 0-d to 1-d
    data = np.asarray(arr, dtype="<f8", order="C")
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<I", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<BB", _DTYPE_F64, data.ndim))
    fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
    fh.write(data.tobytes())


def save_checkpoint(path: str, params: dict, header: dict,
                    opt_moments: dict | None = None):
    """Write params (name -> Tensor/array) and optional optimizer moments.

    header must be JSON-serializable; "format_version" is stamped into it.
    Records are written in sorted-name order so identical state produces
    identical bytes.
    """
    head = dict(header)
    head["format_version"] = FORMAT_VERSION
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in sorted(params):
            t = params[name]
            _write_record(fh, name, t.data if isinstance(t, Tensor) else t)
        if opt_moments:
            for kind in ("m", "v"):
                for name in sorted(opt_moments[kind]):
                    _write_record(fh, f"opt.{kind}.{name}", opt_moments[kind][name])


def _read_exact(fh, n: int, what: str, path: str):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"{path}: truncated while reading {what}")
    return data


def load_checkpoint(path: str):
    """Read a checkpoint; returns (params, opt_moments, header).

    params values are Tensors with requires_grad=True; opt_moments is
    {"m": {...}, "v": {...}} with plain arrays (empty dicts if the file
    carries no optimizer state).
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(
                f"{path}: bad magic {magic!r}, expected {MAGIC!r}"
            )
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length", path))
        try:
            header = json.loads(_read_exact(fh, header_len, "header", path))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {version!r}"
            )
        params: dict = {}
        moments = {"m": {}, "v": {}}
        index = 0
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError(f"{path}: truncated at record {index}")
            (name_len,) = struct.unpack("<I", head)
            try:
                name = _read_exact(fh, name_len, f"record {index} name", path).decode("utf-8")
                tag, rank = struct.unpack(
                    "<BB", _read_exact(fh, 2, f"record {index} ({name}) tag", path))
                if tag != _DTYPE_F64:
                    raise CheckpointError(
                        f"{path}: record {index} ({name}) has unknown dtype tag {tag}")
                dims = struct.unpack(
                    f"<{rank}Q",
                    _read_exact(fh, 8 * rank, f"record {index} ({name}) dims", path))
                count = 1
                for dim in dims:
                    count *= dim
                raw = _read_exact(fh, 8 * count, f"record {index} ({name}) data", path)
            except CheckpointError:
                raise
            arr = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
            if name.startswith("opt.m."):
                moments["m"][name[len("opt.m."):]] = arr
            elif name.startswith("opt.v."):
                moments["v"][name[len("opt.v."):]] = arr
            else:
                params[name] = Tensor(arr, requires_grad=True)
            index += 1
    return params, moments, header
