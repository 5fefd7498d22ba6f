"""Desk-scale decoder-only transformer.

Pre-norm residual blocks with RMS normalization, causal multi-head
attention, GELU feed-forward, learned absolute positional embeddings, and a
linear LM head. All weights and activations are float64.

Hidden states cross public boundaries as d x n matrices (features x
positions) to match the wire convention; internally the forward pass works
on the transposed n x d layout and converts at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import Matrix, check_matrix
from .trace import GenerationTrace, StepRecord, top5_fingerprint

__all__ = [
    "ModelConfig",
    "LayerWeights",
    "TransformerModel",
    "SamplingParams",
    "init_model",
    "embed",
    "forward_layers",
    "logits",
    "filtered_distribution",
    "sample_next",
    "pipeline_generate",
]

RMS_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 96
    max_seq: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_layers < 3:
            raise ValueError(f"n_layers must be >= 3 to admit a 3-way split, got {self.n_layers}")
        if self.d_model < 1 or self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if min(self.d_ff, self.vocab_size, self.max_seq) < 1:
            raise ValueError("d_ff, vocab_size and max_seq must be positive")


@dataclass
class LayerWeights:
    wq: Matrix
    wk: Matrix
    wv: Matrix
    wo: Matrix
    w1: Matrix
    w2: Matrix
    g_attn: np.ndarray
    g_ff: np.ndarray


@dataclass
class TransformerModel:
    config: ModelConfig
    embedding: Matrix          # vocab x d
    pos: Matrix                # max_seq x d
    layers: list[LayerWeights]
    g_final: np.ndarray        # d
    lm_head: Matrix            # d x vocab

    def param_tensors(self) -> dict[str, np.ndarray]:
        """Named weight tensors in a stable declared order."""
        out = {"embedding": self.embedding, "pos": self.pos}
        for i, lw in enumerate(self.layers):
            for name in ("wq", "wk", "wv", "wo", "w1", "w2", "g_attn", "g_ff"):
                out[f"layer{i}.{name}"] = getattr(lw, name)
        out["g_final"] = self.g_final
        out["lm_head"] = self.lm_head
        return out


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    top_p: float = 0.5
    top_k: int = 50
    max_new_tokens: int = 300
    greedy: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not (0 < self.top_p <= 1):
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be positive, got {self.top_k}")
        if self.max_new_tokens < 1:
            raise ValueError(f"max_new_tokens must be positive, got {self.max_new_tokens}")


def init_model(config: ModelConfig) -> TransformerModel:
    """Seeded Gaussian init; residual output projections are down-scaled by
    1/sqrt(2 * n_layers) to keep the residual stream tame at depth."""
    rng = np.random.default_rng(config.seed)
    d, dff, v = config.d_model, config.d_ff, config.vocab_size
    std = 0.02
    res_std = std / np.sqrt(2.0 * config.n_layers)

    def w(rows, cols, scale):
        return scale * rng.standard_normal((rows, cols))

    layers = [
        LayerWeights(
            wq=w(d, d, std), wk=w(d, d, std), wv=w(d, d, std), wo=w(d, d, res_std),
            w1=w(d, dff, std), w2=w(dff, d, res_std),
            g_attn=np.ones(d), g_ff=np.ones(d),
        )
        for _ in range(config.n_layers)
    ]
    return TransformerModel(
        config=config,
        embedding=w(v, d, std),
        pos=w(config.max_seq, d, std),
        layers=layers,
        g_final=np.ones(d),
        lm_head=w(d, v, std),
    )


def _rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    scale = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x * scale * gain


def _gelu_with_tanh(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # tanh approximation; x*x instead of x**2 to stay on the fast ufunc path
    t = np.tanh(0.7978845608028654 * x * (1.0 + 0.044715 * (x * x)))
    return 0.5 * x * (1.0 + t), t


def _gelu(x: np.ndarray) -> np.ndarray:
    return _gelu_with_tanh(x)[0]


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _attention(lw: LayerWeights, x: np.ndarray, n_heads: int) -> np.ndarray:
    n, d = x.shape
    dh = d // n_heads
    q = (x @ lw.wq).reshape(n, n_heads, dh).transpose(1, 0, 2)
    k = (x @ lw.wk).reshape(n, n_heads, dh).transpose(1, 0, 2)
    v = (x @ lw.wv).reshape(n, n_heads, dh).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    probs = _softmax_rows(scores)
    out = (probs @ v).transpose(1, 0, 2).reshape(n, d)
    return out @ lw.wo


def _layer_forward(lw: LayerWeights, x: np.ndarray, n_heads: int) -> np.ndarray:
    x = x + _attention(lw, _rms_norm(x, lw.g_attn), n_heads)
    x = x + _gelu(_rms_norm(x, lw.g_ff) @ lw.w1) @ lw.w2
    return x


def _embed_tokens(embedding: Matrix, pos: Matrix, tokens: list[int], vocab: int) -> np.ndarray:
    if len(tokens) == 0:
        raise ValueError("cannot embed an empty token sequence")
    if len(tokens) > pos.shape[0]:
        raise ValueError(f"sequence length {len(tokens)} exceeds max_seq {pos.shape[0]}")
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= vocab:
        raise ValueError(f"token id out of range 0..{vocab - 1}")
    return embedding[ids] + pos[: len(ids)]


def _lm_logits(g_final: np.ndarray, lm_head: Matrix, x: np.ndarray) -> np.ndarray:
    return _rms_norm(x, g_final) @ lm_head


def embed(model: TransformerModel, tokens: list[int]) -> Matrix:
    """Token + positional embedding, as a d x n hidden state."""
    return _embed_tokens(model.embedding, model.pos, tokens, model.config.vocab_size).T


def forward_layers(model: TransformerModel, start: int, stop: int, h_in: Matrix) -> Matrix:
    """Apply decoder layers [start, stop) with causal masking to a d x n state."""
    if not (0 <= start <= stop <= model.config.n_layers):
        raise ValueError(
            f"bad layer range [{start}, {stop}) for {model.config.n_layers} layers"
        )
    h_in = check_matrix(h_in, "h_in")
    if h_in.shape[0] != model.config.d_model:
        raise ValueError(f"hidden state has {h_in.shape[0]} rows, expected {model.config.d_model}")
    # materialize the transpose so BLAS sees the same layout regardless of
    # whether the state arrived from embed() or off the wire; keeps sharded
    # and monolithic forwards bit-identical
    x = np.ascontiguousarray(h_in.T)
    for lw in model.layers[start:stop]:
        x = _layer_forward(lw, x, model.config.n_heads)
    return x.T


def logits(model: TransformerModel, h: Matrix) -> Matrix:
    """Final norm + LM head: d x n hidden state to vocab x n logits."""
    h = check_matrix(h, "h")
    if h.shape[0] != model.config.d_model:
        raise ValueError(f"hidden state has {h.shape[0]} rows, expected {model.config.d_model}")
    return _lm_logits(model.g_final, model.lm_head, np.ascontiguousarray(h.T)).T


def filtered_distribution(
    logits_last: np.ndarray, params: SamplingParams
) -> tuple[np.ndarray, np.ndarray]:
    """Token ids and probabilities after temperature, top-k, then top-p.

    Candidates are ordered by descending logit (ties by ascending id); the
    nucleus is the shortest prefix whose probability mass reaches top_p.
    """
    z = np.asarray(logits_last, dtype=np.float64) / params.temperature
    order = np.argsort(-z, kind="stable")
    kept = order[: min(params.top_k, z.size)]
    probs = _softmax_rows(z[kept])
    cum = np.cumsum(probs)
    cut = int(np.searchsorted(cum, params.top_p, side="left")) + 1
    kept = kept[:cut]
    probs = probs[:cut] / probs[:cut].sum()
    return kept, probs


def sample_next(logits_last: np.ndarray, params: SamplingParams, rng: np.random.Generator) -> int:
    """Draw the next token id; greedy mode is a pure argmax (ties: lowest id)."""
    logits_last = np.asarray(logits_last, dtype=np.float64)
    if logits_last.ndim != 1 or not np.isfinite(logits_last).all():
        raise ValueError("logits must be a finite 1-D vector")
    if params.greedy:
        return int(np.argmax(logits_last))
    ids, probs = filtered_distribution(logits_last, params)
    u = rng.random()
    return int(ids[np.searchsorted(np.cumsum(probs), u, side="right").clip(0, ids.size - 1)])


def pipeline_generate(
    model: TransformerModel,
    prompt_tokens: list[int],
    params: SamplingParams,
    eos_id: int | None = None,
) -> GenerationTrace:
    """Monolithic autoregressive decoding, the unsplit baseline."""
    if not prompt_tokens:
        raise ValueError("prompt must be nonempty")
    n_layers = model.config.n_layers
    rng = np.random.default_rng(params.seed)
    tokens = list(prompt_tokens)
    trace = GenerationTrace(mode="pipeline", prompt="", seed=params.seed)
    stop_reason = "max_new_tokens"
    for _ in range(params.max_new_tokens):
        if len(tokens) >= model.config.max_seq:
            stop_reason = "max_seq"
            break
        h = forward_layers(model, 0, n_layers, embed(model, tokens))
        lg = logits(model, h)[:, -1]
        tok = sample_next(lg, params, rng)
        trace.steps.append(StepRecord(token_id=tok, logits=lg, top5=top5_fingerprint(lg)))
        tokens.append(tok)
        if eos_id is not None and tok == eos_id:
            stop_reason = "eos"
            break
    trace.stop_reason = stop_reason
    return trace
