"""Three-way layer-range split of one transformer: head / middle / tail.

The split is weight-preserving and copy-free: shards hold references into
the original model's arrays. Embedding and positions live with the head;
final norm and LM head live with the tail, so a client holding head + tail
can both start and finish decoding locally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import Matrix, check_matrix
from .model import (
    LayerWeights,
    ModelConfig,
    TransformerModel,
    _embed_tokens,
    _layer_forward,
    _lm_logits,
)

__all__ = [
    "ShardSpec",
    "ShardedModel",
    "ClientShards",
    "MiddleShard",
    "split",
    "head_forward",
    "middle_forward",
    "tail_forward",
]


@dataclass(frozen=True)
class ShardSpec:
    """Head = layers [0, split_k), middle = [split_k, split_n), tail = rest."""

    split_k: int
    split_n: int

    def validate(self, n_layers: int) -> None:
        if not (0 < self.split_k < self.split_n < n_layers):
            raise ValueError(
                f"invalid shard spec: need 0 < K < N < n_layers, "
                f"got K={self.split_k}, N={self.split_n}, n_layers={n_layers}"
            )


@dataclass
class ClientShards:
    """What the client deploys: head and tail plus embedding and LM head."""

    config: ModelConfig
    spec: ShardSpec
    embedding: Matrix
    pos: Matrix
    head_layers: list[LayerWeights]
    tail_layers: list[LayerWeights]
    g_final: np.ndarray
    lm_head: Matrix


@dataclass
class MiddleShard:
    """What the server deploys: the proprietary middle layers only."""

    config: ModelConfig
    spec: ShardSpec
    middle_layers: list[LayerWeights]


@dataclass
class ShardedModel:
    config: ModelConfig
    spec: ShardSpec
    embedding: Matrix
    pos: Matrix
    head_layers: list[LayerWeights]
    middle_layers: list[LayerWeights]
    tail_layers: list[LayerWeights]
    g_final: np.ndarray
    lm_head: Matrix

    def client(self) -> ClientShards:
        return ClientShards(
            config=self.config, spec=self.spec, embedding=self.embedding, pos=self.pos,
            head_layers=self.head_layers, tail_layers=self.tail_layers,
            g_final=self.g_final, lm_head=self.lm_head,
        )

    def middle(self) -> MiddleShard:
        return MiddleShard(config=self.config, spec=self.spec, middle_layers=self.middle_layers)


def split(model: TransformerModel, spec: ShardSpec) -> ShardedModel:
    """Partition a model by layer range; the original model is untouched."""
    spec.validate(model.config.n_layers)
    return ShardedModel(
        config=model.config,
        spec=spec,
        embedding=model.embedding,
        pos=model.pos,
        head_layers=model.layers[: spec.split_k],
        middle_layers=model.layers[spec.split_k : spec.split_n],
        tail_layers=model.layers[spec.split_n :],
        g_final=model.g_final,
        lm_head=model.lm_head,
    )


def _run_layers(layers: list[LayerWeights], h: Matrix, n_heads: int) -> Matrix:
    # same layout normalization as model.forward_layers, for bit-exact
    # equality between sharded and monolithic execution
    x = np.ascontiguousarray(h.T)
    for lw in layers:
        x = _layer_forward(lw, x, n_heads)
    return x.T


def head_forward(shard: ShardedModel | ClientShards, tokens: list[int]) -> Matrix:
    """Embedding plus the head layer range; d x n output."""
    h = _embed_tokens(shard.embedding, shard.pos, tokens, shard.config.vocab_size).T
    return _run_layers(shard.head_layers, h, shard.config.n_heads)


def middle_forward(shard: ShardedModel | MiddleShard, h: Matrix) -> Matrix:
    h = check_matrix(h, "h")
    if h.shape[0] != shard.config.d_model:
        raise ValueError(f"hidden state has {h.shape[0]} rows, expected {shard.config.d_model}")
    return _run_layers(shard.middle_layers, h, shard.config.n_heads)


def tail_forward(shard: ShardedModel | ClientShards, h: Matrix) -> Matrix:
    """Tail layer range plus final norm and LM head; vocab x n logits."""
    h = check_matrix(h, "h")
    if h.shape[0] != shard.config.d_model:
        raise ValueError(f"hidden state has {h.shape[0]} rows, expected {shard.config.d_model}")
    out = _run_layers(shard.tail_layers, h, shard.config.n_heads)
    return _lm_logits(shard.g_final, shard.lm_head, np.ascontiguousarray(out.T)).T
