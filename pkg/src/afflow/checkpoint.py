"""AFCK checkpoint format.

Layout: magic ``AFCK``, a little-endian u32-counted metadata section of
(key, value) utf-8 string pairs, then a u32-counted manifest of hierarchical
parameter names, each immediately followed by its embedded AFT1 tensor.
Metadata carries the flow/encoder configuration, per-layer actnorm
initialized flags, and optional optimizer/RNG state for exact resume.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .aft import decode_aft, encode_aft
from .flow import FlowConfig
from .model import ArtifactFlowModel, ModelConfig

MAGIC = b"AFCK"


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _unpack_str(data: bytes, pos: int) -> tuple[str, int]:
    (length,) = struct.unpack_from("<I", data, pos)
    pos += 4
    return data[pos:pos + length].decode("utf-8"), pos + length


def write_checkpoint(path, meta: dict[str, str], arrays: dict[str, np.ndarray]):
    blob = bytearray(MAGIC)
    blob += struct.pack("<I", len(meta))
    for key in sorted(meta):
        blob += _pack_str(key)
        blob += _pack_str(str(meta[key]))
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        blob += _pack_str(name)
        blob += encode_aft(arr)
    Path(path).write_bytes(bytes(blob))


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4
    (n_meta,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = {}
    for _ in range(n_meta):
        key, pos = _unpack_str(data, pos)
        val, pos = _unpack_str(data, pos)
        meta[key] = val
    (n_arrays,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = {}
    tail = data[pos:]
    for _ in range(n_arrays):
        (length,) = struct.unpack_from("<I", tail, 0)
        name = tail[4:4 + length].decode("utf-8")
        arrays[name], tail = decode_aft(tail[4 + length:])
    if tail:
        raise ValueError(f"{path}: {len(tail)} trailing bytes")
    return meta, arrays


# ---------------------------------------------------------------------------
# model <-> checkpoint


def model_meta(model: ArtifactFlowModel) -> dict[str, str]:
    cfg = model.config
    meta = {
        "format": "1",
        "flow.levels": str(cfg.flow.levels),
        "flow.steps": str(cfg.flow.steps),
        "flow.lambda0": repr(cfg.flow.lambda0),
        "flow.decay_a": repr(cfg.flow.decay_a),
        "flow.hidden": str(cfg.flow.hidden),
        "flow.eps_inv": repr(cfg.flow.eps_inv),
        "ace.features": str(cfg.ace_features),
        "ace.blocks": str(cfg.ace_blocks),
        "in_channels": str(cfg.in_channels),
        "init_seed": str(cfg.init_seed),
    }
    for name, initialized in model.actnorm_flags().items():
        meta[f"init.{name}"] = "1" if initialized else "0"
    return meta


def save_model(path, model: ArtifactFlowModel, extra_meta: dict[str, str] | None = None,
               extra_arrays: dict[str, np.ndarray] | None = None):
    meta = model_meta(model)
    if extra_meta:
        meta.update(extra_meta)
    arrays = {name: p.data for name, p in model.named_params().items()}
    if extra_arrays:
        arrays.update(extra_arrays)
    write_checkpoint(path, meta, arrays)


def config_from_meta(meta: dict[str, str]) -> ModelConfig:
    try:
        flow = FlowConfig(
            levels=int(meta["flow.levels"]),
            steps=int(meta["flow.steps"]),
            lambda0=float(meta["flow.lambda0"]),
            decay_a=float(meta["flow.decay_a"]),
            hidden=int(meta["flow.hidden"]),
            eps_inv=float(meta["flow.eps_inv"]),
        )
        return ModelConfig(flow=flow,
                           ace_features=int(meta["ace.features"]),
                           ace_blocks=int(meta["ace.blocks"]),
                           in_channels=int(meta["in_channels"]),
                           init_seed=int(meta["init_seed"]))
    except KeyError as err:
        raise ValueError(f"checkpoint metadata missing {err}") from None


def load_model(path) -> tuple[ArtifactFlowModel, dict[str, str], dict[str, np.ndarray]]:
    """Rebuild the model from a checkpoint; also return raw meta and arrays."""
    meta, arrays = read_checkpoint(path)
    model = ArtifactFlowModel(config_from_meta(meta))
    for name, param in model.named_params().items():
        if name not in arrays:
            raise ValueError(f"checkpoint missing parameter '{name}'")
        if arrays[name].shape != param.data.shape:
            raise ValueError(f"parameter '{name}' shape {arrays[name].shape} "
                             f"!= expected {param.data.shape}")
        param.data = np.array(arrays[name], dtype=np.float64)
    flags = {name[len("init."):]: val == "1"
             for name, val in meta.items() if name.startswith("init.")}
    model.set_actnorm_flags(flags)
    return model, meta, arrays
