"""Versioned checkpoint container.

Layout: a magic/version line, an 8-byte little-endian manifest length, a JSON
manifest (sorted keys) describing config, history, RNG state, and the array
table, then the raw arrays concatenated in manifest order as little-endian
IEEE-754 bytes (complex128 for weights, float64 for moments).  Writing,
reading, and re-writing a checkpoint is byte-identical.
"""

import io
import json
import struct
from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np

MAGIC = b"AFOPT-CKPT-1\n"


@dataclass
class Checkpoint:
    params: dict
    adam_m: dict
    adam_v: dict
    adam_step: int
    lr: float
    config: dict
    task: dict
    epoch: int
    history: list = field(default_factory=list)
    rng_state: dict | None = None
    status: str = "ok"


def _flatten(tree, prefix=""):
    out = []
    if isinstance(tree, dict):
        for key in sorted(tree):
            out.extend(_flatten(tree[key], f"{prefix}{key}/"))
    else:
        out.append((prefix[:-1], np.asarray(tree)))
    return out


def _unflatten(items):
    root = {}
    for name, value in items:
        node = root
        parts = name.split("/")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = jnp.asarray(value)
    return root


def save_checkpoint(path, ckpt: Checkpoint):
    arrays = []
    for group, tree in (("params", ckpt.params), ("adam_m", ckpt.adam_m),
                        ("adam_v", ckpt.adam_v)):
        for name, arr in _flatten(tree, group + "/"):
            arrays.append((name, arr))
    manifest = {
        "arrays": [{"name": n, "dtype": str(a.dtype), "shape": list(a.shape)}
                   for n, a in arrays],
        "adam_step": int(ckpt.adam_step),
        "lr": float(ckpt.lr),
        "config": ckpt.config,
        "task": ckpt.task,
        "epoch": int(ckpt.epoch),
        "history": ckpt.history,
        "rng_state": ckpt.rng_state,
        "status": ckpt.status,
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for _, arr in arrays:
        buf.write(np.ascontiguousarray(arr).astype(
            arr.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path} is not an afopt checkpoint "
                         "(bad magic or version)")
    off = len(MAGIC)
    if len(data) < off + 8:
        raise ValueError(f"{path} is truncated")
    (blob_len,) = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) < off + blob_len:
        raise ValueError(f"{path} is truncated")
    manifest = json.loads(data[off:off + blob_len])
    off += blob_len
    rng_state = manifest.get("rng_state")
    groups = {"params": [], "adam_m": [], "adam_v": []}
    for spec in manifest["arrays"]:
        dtype = np.dtype(spec["dtype"]).newbyteorder("<")
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * dtype.itemsize
        if len(data) < off + nbytes:
            raise ValueError(f"{path} is truncated")
        arr = np.frombuffer(data[off:off + nbytes], dtype=dtype).reshape(
            spec["shape"]).astype(np.dtype(spec["dtype"]))
        off += nbytes
        group, name = spec["name"].split("/", 1)
        groups[group].append((name, arr))
    return Checkpoint(
        params=_unflatten(groups["params"]),
        adam_m=_unflatten(groups["adam_m"]),
        adam_v=_unflatten(groups["adam_v"]),
        adam_step=manifest["adam_step"],
        lr=manifest["lr"],
        config=manifest["config"],
        task=manifest["task"],
        epoch=manifest["epoch"],
        history=manifest["history"],
        rng_state=rng_state,
        status=manifest.get("status", "ok"),
    )
