"""Checkpoint files: JSON header + raw little-endian float32 parameter data.

Layout::

    b"TPCK"             magic
    u32 LE              format version
    u64 LE              header length in bytes
    header              UTF-8 JSON: {"config": ..., "params": [{"name", "shape",
                        "offset"}...], "meta": ...}; offsets are relative to
                        the start of the data block
    data                concatenated float32 LE arrays
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autograd import Value
from .trainer import AdamW, ModelState, TrainConfig
from .vit import ViTConfig

MAGIC = b"TPCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], config: dict, meta: dict | None = None) -> None:
    manifest, offset = [], 0
    blobs = []
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"config": config, "params": manifest, "meta": meta or {}}, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen])
    base = _PREFIX.size + hlen
    arrays = {}
    for rec in header["params"]:
        n = int(np.prod(rec["shape"])) if rec["shape"] else 1
        start = base + rec["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=start).reshape(rec["shape"])
        arrays[rec["name"]] = arr.astype(np.float32)
    return arrays, header["config"], header.get("meta", {})


def save_state(path, state: ModelState, train_cfg: TrainConfig | None = None, meta: dict | None = None) -> None:
    """Parameters, optimizer moments and counters; enough to resume bit-exactly."""
    arrays = {f"backbone/{k}": v.data for k, v in state.backbone.items()}
    arrays.update({f"aggregator/{k}": v.data for k, v in state.aggregator.items()})
    arrays.update({f"init/backbone/{k}": v for k, v in state.init_backbone.items()})
    arrays.update({f"init/aggregator/{k}": v for k, v in state.init_aggregator.items()})
    arrays.update({f"opt/backbone/{k}": v for k, v in state.opt_backbone.state_arrays().items()})
    arrays.update({f"opt/aggregator/{k}": v for k, v in state.opt_aggregator.state_arrays().items()})
    if state.prev_update is not None:
        arrays["prev_update"] = state.prev_update
    config = {"vit": state.vit.to_dict(), "n_out": state.n_out}
    if train_cfg is not None:
        config["train"] = train_cfg.to_dict()
    m = {"epoch": state.epoch, "step": state.step,
         "opt_t": [state.opt_backbone.t, state.opt_aggregator.t]}
    m.update(meta or {})
    save_arrays(path, arrays, config, m)


def load_state(path) -> tuple[ModelState, dict, dict]:
    arrays, config, meta = load_arrays(path)
    try:
        vit = ViTConfig(**config["vit"])
        n_out = int(config["n_out"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed config ({exc})") from None
    tc = config.get("train") or {}
    cfg = TrainConfig(**tc) if tc else TrainConfig()

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    backbone = {k: Value(v.copy(), requires_grad=True, name=k) for k, v in group("backbone/").items()}
    head = {k: Value(v.copy(), requires_grad=True, name=k) for k, v in group("aggregator/").items()}
    if set(head) != {"W", "b"} or head["W"].shape[0] != n_out:
        raise CheckpointError(f"{path}: aggregator parameters do not match n_out={n_out}")
    opt_b = AdamW(backbone, cfg.lr_backbone, cfg.weight_decay)
    opt_a = AdamW(head, cfg.lr_aggregator, cfg.weight_decay)
    t_b, t_a = meta.get("opt_t", [0, 0])
    if group("opt/backbone/"):
        opt_b.load_state(group("opt/backbone/"), t_b)
        opt_a.load_state(group("opt/aggregator/"), t_a)
    init_b = group("init/backbone/") or {k: v.data.copy() for k, v in backbone.items()}
    init_a = group("init/aggregator/") or {k: v.data.copy() for k, v in head.items()}
    state = ModelState(
        vit=vit, backbone=backbone, aggregator=head, opt_backbone=opt_b, opt_aggregator=opt_a,
        init_backbone=init_b, init_aggregator=init_a,
        epoch=int(meta.get("epoch", 0)), step=int(meta.get("step", 0)),
        prev_update=arrays["prev_update"].copy() if "prev_update" in arrays else None,
    )
    return state, config, meta
