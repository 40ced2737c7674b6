"""Binary checkpoints: config, named float32 tensors, Adam moments, step.

Layout (little-endian)::

    b"SFCKPT" u16 version
    u32 n, n bytes of UTF-8 JSON header (configs, step, rng, bpe model text)
    u32 count, then per tensor: u16 name_len, name, u8 ndim, u32 dims..., f32 data
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, SlowFastTransformer, parameter_shapes
from .numerics import ParameterSet
from .segmentation import BpeModel
from .training import Adam, TrainConfig

MAGIC = b"SFCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: SlowFastTransformer
    optim: Adam | None
    train_cfg: TrainConfig
    bpe: BpeModel | None

    @property
    def step(self) -> int:
        return self.optim.t if self.optim is not None else 0


def _write_tensors(fh, named: list[tuple[str, np.ndarray]]) -> None:
    fh.write(struct.pack("<I", len(named)))
    for name, arr in named:
        raw = name.encode()
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_tensors(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", fh.read(2))
        name = fh.read(n).decode()
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape)
    return out


def save_checkpoint(path, model: SlowFastTransformer, optim: Adam | None, train_cfg: TrainConfig,
                    bpe: BpeModel | None = None) -> None:
    header = {
        "model": model.cfg.to_dict(),
        "training": train_cfg.to_dict(),
        "step": optim.t if optim else 0,
        "rng": {"seed": train_cfg.seed, "step": optim.t if optim else 0},
        "bpe": bpe.dumps() if bpe else None,
    }
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<H", VERSION))
    raw = json.dumps(header).encode()
    buf.write(struct.pack("<I", len(raw)) + raw)
    params = model.params
    _write_tensors(buf, [(n, t.data) for n, t in params])
    moments = []
    if optim is not None:
        off = 0
        for n, t in params:
            size = t.data.size
            moments.append(("adam.m/" + n, optim.m[off:off + size].reshape(t.shape)))
            moments.append(("adam.v/" + n, optim.v[off:off + size].reshape(t.shape)))
            off += size
    _write_tensors(buf, moments)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    fh = io.BytesIO(Path(path).read_bytes())
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    (version,) = struct.unpack("<H", fh.read(2))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(n).decode())
    cfg = ModelConfig(**header["model"])
    train_cfg = TrainConfig(**header["training"])
    tensors = _read_tensors(fh)
    expected = parameter_shapes(cfg)
    if set(expected) != set(tensors) or any(tuple(tensors[k].shape) != v for k, v in expected.items()):
        raise CheckpointError(f"{path}: parameters do not match the stored model config")
    params = ParameterSet({k: tensors[k] for k in expected}, np.float32)
    model = SlowFastTransformer(cfg, params)
    moments = _read_tensors(fh)
    optim = Adam(params, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
    optim.t = header["step"]
    if moments:
        optim.m = np.concatenate([moments["adam.m/" + k].reshape(-1) for k in expected]).astype(np.float32)
        optim.v = np.concatenate([moments["adam.v/" + k].reshape(-1) for k in expected]).astype(np.float32)
    bpe = BpeModel.loads(header["bpe"]) if header.get("bpe") else None
    if bpe is not None and (len(bpe.vocab) != cfg.src_vocab or len(bpe.vocab) != cfg.tgt_vocab):
        raise CheckpointError(f"{path}: vocabulary size does not match the stored model")
    return Checkpoint(model, optim, train_cfg, bpe)
