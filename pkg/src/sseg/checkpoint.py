"""Single-file checkpoint container.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"SSEGCKPT"
    offset 8   uint32    format version (1)
    offset 12  uint64    header length in bytes (n)
    offset 20  n bytes   UTF-8 JSON header
    ...        blob      raw array data, each array 8-byte aligned

The header holds ``kind``, ``config`` (model config), ``vocab`` (token list),
``meta`` (free-form JSON) and ``arrays``: a list of
``{"name", "dtype", "shape", "offset", "nbytes"}`` entries whose offsets are relative
to the start of the blob. Every dtype is stored explicitly little-endian (``"<f4"``,
``"<f8"``, ``"<i8"``, ...) in C order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"SSEGCKPT"
VERSION = 1


def write_container(path, arrays: dict[str, np.ndarray], header: dict):
    entries = []
    offset = 0
    prepared = []
    for name, arr in arrays.items():
        arr = np.asarray(arr).copy(order="C")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = le.tobytes(order="C")
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        prepared.append(data)
        offset += len(data) + (-len(data)) % 8
    head = dict(header, arrays=entries)
    head_bytes = json.dumps(head, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<Q", len(head_bytes)))
            fh.write(head_bytes)
            for data in prepared:
                fh.write(data)
                fh.write(b"\0" * ((-len(data)) % 8))
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return path


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise InputError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, 12)
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    blob = memoryview(raw)[20 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        chunk = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype=dt).reshape(e["shape"]).astype(
            dt.newbyteorder("="), copy=True)
    return header, arrays


# ----------------------------------------------------------------------------
# model + optimizer state


def save_checkpoint(path, model, vocab, optimizer=None, meta=None, kind="sseg"):
    import torch

    arrays = {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.detach().cpu().numpy()
    for name, b in model.named_buffers():
        arrays[f"buffer/{name}"] = b.detach().cpu().numpy()
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                for key, val in st.items():
                    arrays[f"optim/{n}/{key}"] = (val.detach().cpu().numpy() if torch.is_tensor(val)
                                                  else np.asarray(val))
    header = {
        "kind": kind,
        "config": model.config.to_dict(),
        "vocab": list(vocab.tokens) if vocab is not None else None,
        "meta": meta or {},
    }
    return write_container(path, arrays, header)


def load_state(model, arrays, optimizer=None):
    import torch

    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            key = f"param/{name}"
            if key not in arrays:
                raise InputError(f"checkpoint lacks parameter {name}")
            p.copy_(torch.from_numpy(arrays[key]))
        for name, b in model.named_buffers():
            if f"buffer/{name}" in arrays:
                b.copy_(torch.from_numpy(arrays[f"buffer/{name}"]))
    if optimizer is not None:
        for name, p in params.items():
            prefix = f"optim/{name}/"
            st = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items()
                  if k.startswith(prefix)}
            if st:
                optimizer.state[p] = st


def load_model(path):
    """Return ``(model, vocab, header, arrays)`` for an sseg checkpoint."""
    import torch

    from .data import Vocabulary
    from .model import ModelConfig, init_params

    header, arrays = read_container(path)
    if header.get("kind") != "sseg":
        raise InputError(f"{path}: expected an sseg checkpoint, found {header.get('kind')!r}")
    config = ModelConfig.from_dict(header["config"])
    dtype = torch.from_numpy(arrays["param/log_temperature"]).dtype
    model = init_params(config, 0, dtype)
    load_state(model, arrays)
    vocab = Vocabulary(header["vocab"])
    return model, vocab, header, arrays
