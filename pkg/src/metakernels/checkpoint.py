"""Versioned checkpoints: a JSON document plus an optional raw float64 sidecar.

The JSON carries every array as shortest round-trip decimals so it is
readable from any language.  The ``.bin`` sidecar stores the same arrays
back to back as little-endian float64; when present it is what
:func:`load_checkpoint` reads, and its SHA-256 is checked first.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_dict
from .networks import MetaKernelNet
from .optim import AdamState

FORMAT = "metakernels-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    net: MetaKernelNet
    optimizer: AdamState
    next_iteration: int


def build_net(cfg: RunConfig) -> MetaKernelNet:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seeds.init]))
    return MetaKernelNet(cfg.task.d_in, cfg.model.feature_dim, cfg.model.hidden, cfg.train.mode, rng)


def save_checkpoint(path, cfg: RunConfig, net: MetaKernelNet, opt: AdamState, next_iteration: int,
                    sidecar: bool = True) -> Path:
    """Write ``path`` (a .json) and, by default, ``path`` with suffix .bin."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs: list[np.ndarray] = []
    offset = 0

    def entry(arr: np.ndarray) -> dict:
        nonlocal offset
        arr = np.ascontiguousarray(arr, dtype="<f8")
        e = {"shape": list(arr.shape), "offset": offset, "data": arr.reshape(-1).tolist()}
        blobs.append(arr.reshape(-1))
        offset += arr.size
        return e

    params = {name: entry(arr) for name, arr in net.named_parameters().items()}
    moments = {
        "m": {name: entry(arr) for name, arr in sorted(opt.m.items())},
        "v": {name: entry(arr) for name, arr in sorted(opt.v.items())},
    }
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "next_iteration": int(next_iteration),
        "params": params,
        "optimizer": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                      "step": opt.step, **moments},
        # the inference state is reset at every meta-batch boundary
        "lstm_state": {"h": [0.0] * cfg.model.hidden, "c": [0.0] * cfg.model.hidden},
        "rng": {
            "scheme": "SeedSequence([seed, stream, index, ...])",
            "tasks_seed": cfg.seeds.tasks,
            "init_seed": cfg.seeds.init,
            "sampling_seed": cfg.seeds.sampling,
            "next_iteration": int(next_iteration),
        },
        "sidecar": None,
    }
    if sidecar:
        raw = np.concatenate(blobs).astype("<f8").tobytes() if blobs else b""
        bin_path = path.with_suffix(".bin")
        bin_path.write_bytes(raw)
        doc["sidecar"] = {"file": bin_path.name, "sha256": hashlib.sha256(raw).hexdigest(),
                          "count": offset}
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)
    return path


def load_checkpoint(path, expect_config: RunConfig | None = None) -> Checkpoint:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != FORMAT or doc.get("version") != VERSION:
        raise CheckpointError(
            f"checkpoint format/version {doc.get('format')!r}/{doc.get('version')!r} "
            f"!= expected {FORMAT!r}/{VERSION}"
        )
    cfg = config_from_dict(doc["config"])
    if cfg.hash() != doc["config_hash"]:
        raise CheckpointError("embedded config does not match its recorded hash")
    if expect_config is not None and expect_config.hash() != doc["config_hash"]:
        mine, theirs = expect_config.to_dict(), doc["config"]
        diff = _dict_diff(theirs, mine)
        raise CheckpointError(f"checkpoint config differs from the given config: {diff}")

    flat = None
    side = doc.get("sidecar")
    if side:
        bin_path = path.with_name(side["file"])
        if bin_path.exists():
            raw = bin_path.read_bytes()
            if hashlib.sha256(raw).hexdigest() != side["sha256"]:
                raise CheckpointError(f"sidecar {bin_path} fails its checksum")
            flat = np.frombuffer(raw, dtype="<f8")

    def array(e):
        shape = tuple(e["shape"])
        if flat is not None:
            n = int(np.prod(shape))
            return flat[e["offset"]:e["offset"] + n].astype(np.float64).reshape(shape)
        return np.array(e["data"], dtype=np.float64).reshape(shape)

    net = build_net(cfg)
    own = net.named_parameters()
    stored = {name: array(e) for name, e in doc["params"].items()}
    problems = []
    for name in sorted(set(own) | set(stored)):
        if name not in stored:
            problems.append(f"missing {name} {own[name].shape}")
        elif name not in own:
            problems.append(f"unexpected {name} {stored[name].shape}")
        elif own[name].shape != stored[name].shape:
            problems.append(f"{name}: checkpoint {stored[name].shape} vs model {own[name].shape}")
    if problems:
        raise CheckpointError("parameter layout mismatch: " + "; ".join(problems))
    net.load_parameters(stored)

    o = doc["optimizer"]
    opt = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"])
    opt.m = {name: array(e) for name, e in o["m"].items()}
    opt.v = {name: array(e) for name, e in o["v"].items()}
    return Checkpoint(cfg, net, opt, int(doc["next_iteration"]))


def _dict_diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    out = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            out.extend(_dict_diff(va, vb, f"{prefix}{key}."))
        elif va != vb:
            out.append(f"{prefix}{key}: {va!r} -> {vb!r}")
    return out
