"""Versioned binary checkpoints.

Layout: magic, u32 format version, u64 header length, a canonical JSON
header (sorted keys, compact separators), then raw float32 little-endian
tensor blobs in header-table order. Tensors are tagged with the role they
belong to (base, coprocessor, bank, optimizer moments). Canonical headers
plus fixed-order blobs make save -> load -> save byte-identical, which the
reproducibility tests rely on.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .engine import InjectionMode, SoftTokenBank, base_trainable, has_coprocessor
from .errors import ContractError, DataFormatError
from .model import ModelConfig, ModelParams, param_names
from .training import LatentSystem, OptimizerState

_MAGIC = b"KVCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    system: LatentSystem
    opt: OptimizerState
    step: int
    seed: int
    extra: dict


def _tensor_table(system: LatentSystem, opt: OptimizerState):
    """Deterministic (role, name, array) listing for serialization."""
    out: list[tuple[str, str, np.ndarray]] = []
    for name, node in system.base.named_tensors():
        out.append(("base", name, node.values))
    if system.coproc is not None:
        for name, node in system.coproc.named_tensors():
            out.append(("coprocessor", name, node.values))
    out.append(("bank", "soft", system.bank.embeddings.values))
    for key in sorted(opt.m):
        out.append(("opt.m", key, opt.m[key]))
    for key in sorted(opt.v):
        out.append(("opt.v", key, opt.v[key]))
    return out


def save_checkpoint(path, system: LatentSystem, opt: OptimizerState,
                    step: int, seed: int, extra: dict | None = None) -> None:
    table = _tensor_table(system, opt)
    entries = []
    offset = 0
    for role, name, arr in table:
        if arr.dtype != np.float32:
            raise ContractError(f"checkpoint: tensor {role}/{name} must be "
                                f"float32, got {arr.dtype}")
        entries.append({"name": name, "role": role,
                        "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = {
        "version": FORMAT_VERSION,
        "mode": system.mode.value,
        "model": dataclasses.asdict(system.base.config),
        "n_latents": system.bank.n_latents,
        "optimizer": {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                      "weight_decay": opt.weight_decay, "step": opt.step},
        "rng": {"seed": int(seed), "next_step": int(step)},
        "step": int(step),
        "tensors": entries,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(np.uint32(FORMAT_VERSION).tobytes())
        f.write(np.uint64(len(blob)).tobytes())
        f.write(blob)
        for _, _, arr in table:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise DataFormatError(f"{path}: not a checkpoint file")
        version = int(np.frombuffer(f.read(4), dtype=np.uint32)[0])
        if version != FORMAT_VERSION:
            raise DataFormatError(f"{path}: checkpoint version {version}, "
                                  f"this build reads {FORMAT_VERSION}")
        hlen = int(np.frombuffer(f.read(8), dtype=np.uint64)[0])
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()

    try:
        mode = InjectionMode(header["mode"])
        config = ModelConfig(**header["model"])
        tensors = {}
        for ent in header["tensors"]:
            shape = tuple(ent["shape"])
            size = int(np.prod(shape)) * 4 if shape else 4
            raw = payload[ent["offset"]: ent["offset"] + size]
            if len(raw) != size:
                raise DataFormatError(f"{path}: truncated tensor "
                                      f"{ent['role']}/{ent['name']}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            tensors[(ent["role"], ent["name"])] = arr
        opt_h = header["optimizer"]
        seed = int(header["rng"]["seed"])
        step = int(header["step"])
        extra = header.get("extra", {})
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"{path}: malformed checkpoint header ({e})") \
            from e

    expected = param_names(config)
    base_t = {name: T.TensorNode(arr) for (role, name), arr in tensors.items()
              if role == "base"}
    if set(base_t) != expected:
        raise DataFormatError(f"{path}: base tensor set does not match the "
                              f"stored architecture")
    base = ModelParams(config, "base", base_t,
                       trainable=base_trainable(mode))
    coproc = None
    cop_t = {name: T.TensorNode(arr) for (role, name), arr in tensors.items()
             if role == "coprocessor"}
    if cop_t:
        if set(cop_t) != expected:
            raise DataFormatError(f"{path}: coprocessor tensor set does not "
                                  f"match the stored architecture")
        coproc = ModelParams(config, "coprocessor", cop_t, trainable=True)
    elif has_coprocessor(mode):
        raise DataFormatError(f"{path}: mode {mode.value} needs coprocessor "
                              f"tensors, none stored")
    bank_arr = tensors.get(("bank", "soft"))
    if bank_arr is None:
        raise DataFormatError(f"{path}: missing soft token bank")
    bank = SoftTokenBank(T.TensorNode(bank_arr, requires_grad=True))
    system = LatentSystem(mode, base, coproc, bank)
    opt = OptimizerState(beta1=float(opt_h["beta1"]),
                         beta2=float(opt_h["beta2"]),
                         eps=float(opt_h["eps"]),
                         weight_decay=float(opt_h["weight_decay"]),
                         step=int(opt_h["step"]))
    for (role, name), arr in tensors.items():
        if role == "opt.m":
            opt.m[name] = arr
        elif role == "opt.v":
            opt.v[name] = arr
    return Checkpoint(system, opt, step, seed, extra)
