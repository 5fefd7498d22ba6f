"""Versioned binary checkpoint container.

Layout: magic "PFIDMDL1", a fixed header (version, shard role, split
points, model config), then weight matrices in declared order as
little-endian binary32. Roles let one container format carry a full model,
a client export (head + tail) or a server export (middle only).
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .model import LayerWeights, ModelConfig, TransformerModel
from .shard import ClientShards, MiddleShard, ShardSpec, ShardedModel

__all__ = [
    "CheckpointError",
    "ROLE_FULL",
    "ROLE_CLIENT",
    "ROLE_MIDDLE",
    "save_model",
    "load_model",
    "save_client",
    "load_client",
    "save_middle",
    "load_middle",
    "checkpoint_role",
    "file_sha256",
]

MAGIC = b"PFIDMDL1"
VERSION = 1
ROLE_FULL, ROLE_CLIENT, ROLE_MIDDLE = 0, 1, 2

_HEADER = struct.Struct("<8sIIIIIIIIIIQ")
# magic, version, role, split_k, split_n,
# n_layers, d_model, n_heads, d_ff, vocab_size, max_seq, seed

_LAYER_FIELDS = ("wq", "wk", "wv", "wo", "w1", "w2", "g_attn", "g_ff")


class CheckpointError(Exception):
    pass


def _layer_shapes(cfg: ModelConfig) -> list[tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    return [(d, d), (d, d), (d, d), (d, d), (d, f), (f, d), (d,), (d,)]


def _write(fh, arrays) -> None:
    for a in arrays:
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read(fh, shapes) -> list[np.ndarray]:
    out = []
    for shape in shapes:
        count = int(np.prod(shape))
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise CheckpointError("checkpoint truncated")
        out.append(np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape))
    return out


def _layer_arrays(layers: list[LayerWeights]):
    for lw in layers:
        for name in _LAYER_FIELDS:
            yield getattr(lw, name)


def _read_layers(fh, cfg: ModelConfig, count: int) -> list[LayerWeights]:
    shapes = _layer_shapes(cfg)
    return [LayerWeights(*_read(fh, shapes)) for _ in range(count)]


def _header_bytes(cfg: ModelConfig, role: int, spec: ShardSpec | None) -> bytes:
    k = spec.split_k if spec else 0
    n = spec.split_n if spec else 0
    if not (0 <= cfg.seed < 2**64):
        raise CheckpointError(f"seed {cfg.seed} not representable as u64")
    return _HEADER.pack(
        MAGIC, VERSION, role, k, n,
        cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_ff,
        cfg.vocab_size, cfg.max_seq, cfg.seed,
    )


def _read_header(fh) -> tuple[int, ShardSpec | None, ModelConfig]:
    raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise CheckpointError("file too short for checkpoint header")
    magic, version, role, k, n, n_layers, d, heads, dff, vocab, max_seq, seed = (
        _HEADER.unpack(raw)
    )
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if role not in (ROLE_FULL, ROLE_CLIENT, ROLE_MIDDLE):
        raise CheckpointError(f"unknown shard role {role}")
    cfg = ModelConfig(
        n_layers=n_layers, d_model=d, n_heads=heads, d_ff=dff,
        vocab_size=vocab, max_seq=max_seq, seed=seed,
    )
    spec = None
    if role != ROLE_FULL:
        spec = ShardSpec(k, n)
        spec.validate(cfg.n_layers)
    return role, spec, cfg


def save_model(path: str | Path, model: TransformerModel) -> None:
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(_header_bytes(cfg, ROLE_FULL, None))
        _write(fh, [model.embedding, model.pos])
        _write(fh, _layer_arrays(model.layers))
        _write(fh, [model.g_final, model.lm_head])


def load_model(path: str | Path) -> TransformerModel:
    with open(path, "rb") as fh:
        role, _, cfg = _read_header(fh)
        if role != ROLE_FULL:
            raise CheckpointError(f"expected a full-model checkpoint, found role {role}")
        emb, pos = _read(fh, [(cfg.vocab_size, cfg.d_model), (cfg.max_seq, cfg.d_model)])
        layers = _read_layers(fh, cfg, cfg.n_layers)
        g_final, lm_head = _read(fh, [(cfg.d_model,), (cfg.d_model, cfg.vocab_size)])
    return TransformerModel(
        config=cfg, embedding=emb, pos=pos, layers=layers,
        g_final=g_final, lm_head=lm_head,
    )


def save_client(path: str | Path, sharded: ShardedModel) -> None:
    cfg = sharded.config
    with open(path, "wb") as fh:
        fh.write(_header_bytes(cfg, ROLE_CLIENT, sharded.spec))
        _write(fh, [sharded.embedding, sharded.pos])
        _write(fh, _layer_arrays(sharded.head_layers))
        _write(fh, _layer_arrays(sharded.tail_layers))
        _write(fh, [sharded.g_final, sharded.lm_head])


def load_client(path: str | Path) -> ClientShards:
    with open(path, "rb") as fh:
        role, spec, cfg = _read_header(fh)
        if role != ROLE_CLIENT:
            raise CheckpointError(f"expected a client export, found role {role}")
        emb, pos = _read(fh, [(cfg.vocab_size, cfg.d_model), (cfg.max_seq, cfg.d_model)])
        head = _read_layers(fh, cfg, spec.split_k)
        tail = _read_layers(fh, cfg, cfg.n_layers - spec.split_n)
        g_final, lm_head = _read(fh, [(cfg.d_model,), (cfg.d_model, cfg.vocab_size)])
    return ClientShards(
        config=cfg, spec=spec, embedding=emb, pos=pos,
        head_layers=head, tail_layers=tail, g_final=g_final, lm_head=lm_head,
    )


def save_middle(path: str | Path, sharded: ShardedModel) -> None:
    with open(path, "wb") as fh:
        fh.write(_header_bytes(sharded.config, ROLE_MIDDLE, sharded.spec))
        _write(fh, _layer_arrays(sharded.middle_layers))


def load_middle(path: str | Path) -> MiddleShard:
    with open(path, "rb") as fh:
        role, spec, cfg = _read_header(fh)
        if role != ROLE_MIDDLE:
            raise CheckpointError(f"expected a middle export, found role {role}")
        layers = _read_layers(fh, cfg, spec.split_n - spec.split_k)
    return MiddleShard(config=cfg, spec=spec, middle_layers=layers)


def checkpoint_role(path: str | Path) -> int:
    with open(path, "rb") as fh:
        role, _, _ = _read_header(fh)
    return role


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
