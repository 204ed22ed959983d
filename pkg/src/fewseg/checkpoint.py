"""Checkpoint container: a versioned header plus raw little-endian tensors.

Layout:

    bytes 0..8    magic ``FSEGCKPT``
    bytes 8..12   container version, uint32 little-endian
    bytes 12..20  header length in bytes, uint64 little-endian
    header        UTF-8 JSON: {"config": {...}, "manifest": [...]}
    payload       tensor buffers concatenated in manifest order

Each manifest entry records name, parameter group (backbone, relation,
scale_attn, or decoder[N]), dtype, shape, and byte length. Loading rebuilds
the model from the embedded config and refuses any manifest that does not
match it shape-for-shape.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
import torch

from .config import config_from_dict
from .errors import CheckpointError, ConfigError

MAGIC = b"FSEGCKPT"
VERSION = 1

_DTYPES = {
    "float32": ("<f4", torch.float32),
    "float64": ("<f8", torch.float64),
    "int64": ("<i8", torch.int64),
}
_TORCH_NAMES = {torch.float32: "float32", torch.float64: "float64", torch.int64: "int64"}


def parameter_group(name):
    """Map a state-dict key to its named parameter group."""
    if name.startswith("backbone."):
        return "backbone"
    if name.startswith("relation."):
        return "relation"
    if name.startswith(("scale_attn.", "fuse_proj.")):
        return "scale_attn"
    if name.startswith("decoders."):
        return f"decoder[{name.split('.')[1]}]"
    raise CheckpointError(f"parameter {name!r} belongs to no known group")


def save_checkpoint(model, cfg, path):
    """Serialize every parameter group and the full config."""
    state = model.state_dict()
    manifest = []
    buffers = []
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        dtype_name = _TORCH_NAMES.get(tensor.dtype)
        if dtype_name is None:
            raise CheckpointError(f"unsupported dtype {tensor.dtype} for {name}")
        np_dtype = _DTYPES[dtype_name][0]
        buf = tensor.numpy().astype(np_dtype, copy=False).tobytes()
        manifest.append({
            "name": name,
            "group": parameter_group(name),
            "dtype": dtype_name,
            "shape": list(tensor.shape),
            "nbytes": len(buf),
        })
        buffers.append(buf)
    header = json.dumps({"config": cfg.to_dict(), "manifest": manifest},
                        sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for buf in buffers:
            fh.write(buf)
    os.replace(tmp, path)
    return path


def read_header(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint container")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"unsupported container version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt header in {path}") from exc
        payload_offset = fh.tell()
    if "config" not in header or "manifest" not in header:
        raise CheckpointError(f"header of {path} is missing required fields")
    return header, payload_offset


def _manifest_diff(manifest, state):
    expected = {name: tuple(t.shape) for name, t in state.items()}
    listed = {m["name"]: tuple(m["shape"]) for m in manifest}
    lines = []
    for name in sorted(set(expected) | set(listed)):
        if name not in listed:
            lines.append(f"  missing from file: {name} {expected[name]}")
        elif name not in expected:
            lines.append(f"  unexpected in file: {name} {listed[name]}")
        elif listed[name] != expected[name]:
            lines.append(f"  shape mismatch: {name} file={listed[name]} model={expected[name]}")
    return lines


def load_checkpoint(path, expected_cfg=None):
    """Rebuild the model from the embedded config and load all parameters.

    Returns (model, config). A provided ``expected_cfg`` must agree on every
    architecture field; a different decoder arity is reported explicitly.
    """
    from .network import build_model

    header, offset = read_header(path)
    cfg = config_from_dict(header["config"])
    if expected_cfg is not None:
        if expected_cfg.n_way != cfg.n_way:
            raise ConfigError(
                f"decoder head mismatch: checkpoint was built for "
                f"{cfg.n_way}-way episodes, config requests {expected_cfg.n_way}-way"
            )
        for field in ("channels", "z_scales", "fusion_mode", "backbone",
                      "relation_groups", "use_support_attention",
                      "use_scale_attention"):
            if getattr(expected_cfg, field) != getattr(cfg, field):
                raise ConfigError(
                    f"checkpoint/config mismatch on {field!r}: "
                    f"{getattr(cfg, field)!r} vs {getattr(expected_cfg, field)!r}"
                )

    model = build_model(cfg)
    state = model.state_dict()
    diff = _manifest_diff(header["manifest"], state)
    if diff:
        raise CheckpointError(
            "checkpoint manifest does not match the model:\n" + "\n".join(diff)
        )

    new_state = {}
    with open(path, "rb") as fh:
        fh.seek(offset)
        for entry in header["manifest"]:
            if entry["dtype"] not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {entry['dtype']!r}")
            np_dtype, torch_dtype = _DTYPES[entry["dtype"]]
            buf = fh.read(entry["nbytes"])
            if len(buf) != entry["nbytes"]:
                raise CheckpointError(f"truncated payload for {entry['name']}")
            arr = np.frombuffer(buf, dtype=np_dtype).reshape(entry["shape"]).copy()
            new_state[entry["name"]] = torch.from_numpy(arr).to(torch_dtype)
        if fh.read(1):
            raise CheckpointError("trailing bytes after declared payload")
    model.load_state_dict(new_state)
    if cfg.backbone_frozen:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
    return model, cfg
