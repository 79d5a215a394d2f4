"""Single-file checkpoint container.

Layout: 4-byte magic ``SSLM``, little-endian u32 format version, u64 header
length, a UTF-8 JSON header, then the raw payload. The header records the
config snapshot, an array table (name, shape, dtype, offset, nbytes), scalar
optimizer fields, and the RNG state. Array payloads are little-endian raw
bytes; the round trip is bit-exact by contract.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .model import ModelConfig
from .tensor import Tensor

MAGIC = b"SSLM"
FORMAT_VERSION = 1


@dataclass
class CheckpointBundle:
    config: ModelConfig
    params: dict[str, np.ndarray]
    opt_state: dict | None
    rng_state: dict | None


def _le_dtype(arr: np.ndarray) -> np.dtype:
    dt = arr.dtype
    return dt.newbyteorder("<") if dt.byteorder == ">" else dt


def save_checkpoint(path, config: ModelConfig, params: dict[str, Tensor],
                    opt_state: dict | None = None,
                    rng_state: dict | None = None) -> None:
    """Write params (+ optional optimizer arrays and RNG state) to one file.

    ``opt_state`` is a plain dict; any ndarray values under its "m"/"v" keys
    go into the payload, scalars stay in the header.
    """
    arrays: list[tuple[str, np.ndarray]] = []
    for name, tensor in params.items():
        arrays.append((name, np.ascontiguousarray(tensor.data)))
    opt_header: dict | None = None
    if opt_state is not None:
        opt_header = {k: v for k, v in opt_state.items() if k not in ("m", "v")}
        for slot in ("m", "v"):
            for name, arr in opt_state.get(slot, {}).items():
                arrays.append((f"opt.{slot}.{name}", np.ascontiguousarray(arr)))

    table = []
    offset = 0
    blobs = []
    for name, arr in arrays:
        arr = arr.astype(_le_dtype(arr), copy=False)
        blob = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape),
                      "dtype": arr.dtype.str, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)

    header = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "arrays": table,
        "optimizer": opt_header,
        "rng": rng_state,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> CheckpointBundle:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise DataError(f"{path} is not a checkpoint file")
    version, header_len = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    payload = raw[16 + header_len:]

    params: dict[str, np.ndarray] = {}
    opt_arrays: dict[str, dict[str, np.ndarray]] = {"m": {}, "v": {}}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start:start + nbytes], dtype=entry["dtype"])
        arr = arr.reshape(entry["shape"]).copy()
        name = entry["name"]
        if name.startswith("opt.m."):
            opt_arrays["m"][name[len("opt.m."):]] = arr
        elif name.startswith("opt.v."):
            opt_arrays["v"][name[len("opt.v."):]] = arr
        else:
            params[name] = arr

    opt_state = None
    if header.get("optimizer") is not None:
        opt_state = dict(header["optimizer"])
        opt_state["m"] = opt_arrays["m"]
        opt_state["v"] = opt_arrays["v"]
    config = ModelConfig.from_dict(header["config"])
    return CheckpointBundle(config=config, params=params, opt_state=opt_state,
                            rng_state=header.get("rng"))


def params_to_tensors(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {name: Tensor(arr.copy(), requires_grad=True) for name, arr in arrays.items()}
