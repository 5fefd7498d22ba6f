import numpy as np
import pytest

from pfid.model import ModelConfig, SamplingParams, init_model, pipeline_generate
from pfid.tokenizer import ascii96
from pfid.training import batch_loss, loss_and_grads, train


def small_config(**kw):
    base = dict(n_layers=3, d_model=16, n_heads=2, d_ff=32, vocab_size=96, max_seq=32, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def test_gradients_match_central_finite_differences():
    """10 sampled coordinates per weight tensor, eps 1e-4, 1e-3 relative."""
    cfg = ModelConfig(n_layers=3, d_model=16, n_heads=2, d_ff=32, vocab_size=20,
                      max_seq=24, seed=0)
    model = init_model(cfg)
    rng = np.random.default_rng(1)
    inputs = rng.integers(0, 20, size=(2, 10))
    targets = rng.integers(0, 20, size=(2, 10))
    _, grads = loss_and_grads(model, inputs, targets)

    eps = 1e-4
    for name, w in model.param_tensors().items():
        flat = w.reshape(-1)
        gflat = grads[name].reshape(-1)
        coords = rng.choice(flat.size, size=min(10, flat.size), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = batch_loss(model, inputs, targets)
            flat[c] = orig - eps
            down = batch_loss(model, inputs, targets)
            flat[c] = orig
            fd = (up - down) / (2 * eps)
            denom = max(abs(fd), abs(gflat[c]), 1e-8)
            assert abs(fd - gflat[c]) / denom <= 1e-3, f"{name}[{c}]: {fd} vs {gflat[c]}"


def test_loss_decreases():
    model = init_model(small_config())
    corpus = "alice met bob at the park.\nbob met alice at the lake.\n" * 20
    ids = np.asarray(ascii96().encode(corpus), dtype=np.int64)
    rng = np.random.default_rng(0)
    windows = np.stack([ids[s : s + 17] for s in rng.integers(0, len(ids) - 18, size=8)])
    before = batch_loss(model, windows[:, :-1], windows[:, 1:])
    result = train(model, corpus, steps=200, lr=3e-3, seed=0)
    after = batch_loss(result.model, windows[:, :-1], windows[:, 1:])
    assert after < before
    assert result.losses[-1] < result.losses[0]


def test_train_deterministic():
    model = init_model(small_config())
    corpus = "dana is 44 years old.\n" * 10
    a = train(model, corpus, steps=20, lr=1e-3, seed=5)
    b = train(model, corpus, steps=20, lr=1e-3, seed=5)
    for (na, wa), (nb, wb) in zip(
        a.model.param_tensors().items(), b.model.param_tensors().items()
    ):
        assert na == nb and np.array_equal(wa, wb)


def test_train_does_not_mutate_input_model():
    model = init_model(small_config())
    before = model.embedding.copy()
    train(model, "alice met bob.\n" * 10, steps=5, lr=1e-3, seed=0)
    assert np.array_equal(model.embedding, before)


def test_overfit_two_lines_memorizes_continuations():
    """After enough steps on a 2-line corpus, greedy decoding reproduces
    each line from its first 3 characters."""
    tok = ascii96()
    lines = ["erik owes fiona 92 dollars.", "hana calls gleb every monday."]
    corpus = ("\n".join(lines) + "\n") * 1
    model = init_model(small_config(max_seq=40))
    result = train(
        model, corpus * 30, steps=2000, lr=2e-3, seed=1, batch_size=4, seq_len=30
    )
    params = SamplingParams(greedy=True, max_new_tokens=35)
    for line in lines:
        prompt = tok.encode(line[:3])
        trace = pipeline_generate(result.model, prompt, params, eos_id=tok.eos_id)
        text = tok.decode(trace.token_ids)
        assert text.rstrip("\n") == line[3:], f"memorization failed: {text!r}"


def test_empty_corpus_rejected():
    model = init_model(small_config())
    with pytest.raises(ValueError, match="empty"):
        train(model, "", steps=1)


def test_zero_steps_rejected():
    model = init_model(small_config())
    with pytest.raises(ValueError, match="steps"):
        train(model, "abc\n" * 10, steps=0)
