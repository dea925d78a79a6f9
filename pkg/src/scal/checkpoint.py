"""Versioned, checksummed training checkpoints for bit-exact resume.

Layout::

    b"SCALCKPT" | u32 version | u64 header length | header (UTF-8 JSON)
    | payload: little-endian float64 arrays, back to back
    | SHA-256 of everything above (32 bytes)

The header lists every array by name, shape and byte offset, and carries the
config, optimizer scalars, RNG bit-generator states and the metrics so far.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

from . import config as config_mod
from .errors import ChecksumError
from .metrics import MetricsLog
from .nn import MLP, DenseLayer
from .autodiff import Tensor
from .training import ScalNetworks, TrainState, make_optimizers

MAGIC = b"SCALCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _net_spec(net: MLP) -> dict[str, Any]:
    return {"dims": net.dims, "activations": net.activations}


def _rng_state(rng: np.random.Generator) -> dict[str, Any]:
    return rng.bit_generator.state


def _restore_rng(state: dict[str, Any]) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def encode(state: TrainState, cfg) -> bytes:
    nets = state.networks
    arrays: dict[str, np.ndarray] = {}
    for name, t in nets.named_parameters().items():
        arrays[f"param.{name}"] = t.values
    for tag, opt in (("fs", state.opt_fs), ("adv", state.opt_adv)):
        for name, v in opt.state.velocities.items():
            arrays[f"velocity.{tag}.{name}"] = v
    if state.last_centers is not None:
        arrays["last_centers"] = state.last_centers

    index, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)

    header = {
        "version": VERSION,
        "config": config_mod.to_dict(cfg),
        "networks": {
            "num_classes": nets.num_classes,
            "conditioned": nets.conditioned,
            "layers": {k: _net_spec(v) for k, v in nets.heads().items()},
        },
        "arrays": index,
        "optimizers": {
            tag: {k: getattr(opt.state, k) for k in ("lr0", "alpha", "beta", "momentum", "progress")}
            for tag, opt in (("fs", state.opt_fs), ("adv", state.opt_adv))
        },
        "rng": {"shuffle": _rng_state(state.shuffle_rng), "noise": _rng_state(state.noise_rng)},
        "epoch": state.epoch,
        "iteration": state.iteration,
        "metrics": state.log.to_json(),
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save(path, state: TrainState, cfg) -> None:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(state, cfg))
    os.replace(tmp, path)


def decode(blob: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Verify and split a checkpoint into (header, arrays)."""
    if len(blob) < _PREFIX.size + 32:
        raise ChecksumError("checkpoint truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch (file corrupted)")
    magic, version, hlen = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise ChecksumError("not a checkpoint file")
    if version != VERSION:
        raise ChecksumError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    header = json.loads(body[start:start + hlen])
    payload = memoryview(body)[start + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return header, arrays


def _build_net(spec: dict[str, Any], arrays: dict[str, np.ndarray], prefix: str) -> MLP:
    layers = []
    for i, act in enumerate(spec["activations"]):
        w = arrays[f"param.{prefix}.{i}.weight"]
        b = arrays[f"param.{prefix}.{i}.bias"]
        layers.append(DenseLayer(Tensor(w), Tensor(b), act))
    return MLP(layers)


def load(path) -> tuple[TrainState, config_mod.ExperimentConfig]:
    header, arrays = decode(Path(path).read_bytes())
    cfg = config_mod.from_dict(header["config"])
    spec = header["networks"]
    nets = ScalNetworks(
        *(_build_net(spec["layers"][k], arrays, k) for k in ("G", "F", "FS", "D")),
        num_classes=spec["num_classes"],
        conditioned=spec["conditioned"],
    )
    opt_fs, opt_adv = make_optimizers(nets, cfg)
    for tag, opt in (("fs", opt_fs), ("adv", opt_adv)):
        for k, v in header["optimizers"][tag].items():
            setattr(opt.state, k, v)
        prefix = f"velocity.{tag}."
        opt.state.velocities = {n[len(prefix):]: a for n, a in arrays.items() if n.startswith(prefix)}
    state = TrainState(
        networks=nets,
        opt_fs=opt_fs,
        opt_adv=opt_adv,
        shuffle_rng=_restore_rng(header["rng"]["shuffle"]),
        noise_rng=_restore_rng(header["rng"]["noise"]),
        epoch=header["epoch"],
        iteration=header["iteration"],
        last_centers=arrays.get("last_centers"),
        log=MetricsLog.from_json(header["metrics"]),
    )
    return state, cfg
