import numpy as np
import pytest

from pfid.model import ModelConfig, embed, forward_layers, init_model, logits
from pfid.shard import ShardSpec, head_forward, middle_forward, split, tail_forward


def small_config(**kw):
    base = dict(n_layers=8, d_model=16, n_heads=2, d_ff=32, vocab_size=24, max_seq=40, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def monolithic_logits(model, tokens):
    h = forward_layers(model, 0, model.config.n_layers, embed(model, tokens))
    return logits(model, h)


class TestSplit:
    def test_default_split_sizes(self):
        m = init_model(small_config())
        s = split(m, ShardSpec(3, 5))
        assert (len(s.head_layers), len(s.middle_layers), len(s.tail_layers)) == (3, 2, 3)

    def test_paper_scale_split_sizes(self):
        m = init_model(ModelConfig(n_layers=32, d_model=8, n_heads=2, d_ff=16,
                                   vocab_size=10, max_seq=8, seed=0))
        s = split(m, ShardSpec(13, 19))
        assert (len(s.head_layers), len(s.middle_layers), len(s.tail_layers)) == (13, 6, 13)

    def test_empty_head_rejected(self):
        m = init_model(small_config())
        with pytest.raises(ValueError, match="K=0, N=5, n_layers=8"):
            split(m, ShardSpec(0, 5))

    @pytest.mark.parametrize("k,n", [(5, 3), (3, 3), (3, 8), (-1, 2)])
    def test_invalid_specs_rejected(self, k, n):
        m = init_model(small_config())
        with pytest.raises(ValueError, match="shard spec"):
            split(m, ShardSpec(k, n))

    def test_partition_is_exhaustive_and_copy_free(self):
        m = init_model(small_config())
        s = split(m, ShardSpec(2, 6))
        combined = s.head_layers + s.middle_layers + s.tail_layers
        assert [id(lw) for lw in combined] == [id(lw) for lw in m.layers]

    def test_original_model_unchanged(self):
        m = init_model(small_config())
        before = {k: v.copy() for k, v in m.param_tensors().items()}
        split(m, ShardSpec(3, 5))
        for k, v in m.param_tensors().items():
            assert np.array_equal(v, before[k])


class TestShardForwards:
    def test_composition_equals_monolithic_exactly(self):
        m = init_model(small_config())
        rng = np.random.default_rng(0)
        specs = [ShardSpec(1, 2), ShardSpec(3, 5), ShardSpec(2, 7), ShardSpec(6, 7)]
        for spec in specs:
            s = split(m, spec)
            for _ in range(5):
                tokens = list(rng.integers(0, 24, size=rng.integers(1, 12)))
                composed = tail_forward(s, middle_forward(s, head_forward(s, tokens)))
                assert np.array_equal(composed, monolithic_logits(m, tokens))

    def test_head_output_shape(self):
        m = init_model(small_config())
        s = split(m, ShardSpec(3, 5))
        assert head_forward(s, [1, 2, 3, 4]).shape == (16, 4)

    def test_narrowed_views_match_full_sharded(self):
        m = init_model(small_config())
        s = split(m, ShardSpec(3, 5))
        client, middle = s.client(), s.middle()
        tokens = [5, 6, 7]
        h = head_forward(client, tokens)
        assert np.array_equal(h, head_forward(s, tokens))
        hm = middle_forward(middle, h)
        assert np.array_equal(hm, middle_forward(s, h))
        assert np.array_equal(tail_forward(client, hm), tail_forward(s, hm))

    def test_tail_weight_isolation(self):
        m = init_model(small_config())
        s = split(m, ShardSpec(3, 5))
        tokens = [1, 2, 3]
        h_head = head_forward(s, tokens)
        h_mid = middle_forward(s, h_head)
        lg_before = tail_forward(s, h_mid)
        s.tail_layers[0].wq[0, 0] += 1.0
        assert np.array_equal(head_forward(s, tokens), h_head)
        assert np.array_equal(middle_forward(s, h_head), h_mid)
        assert not np.array_equal(tail_forward(s, h_mid), lg_before)

    def test_shape_mismatch_rejected(self):
        m = init_model(small_config())
        s = split(m, ShardSpec(3, 5))
        with pytest.raises(ValueError, match="rows"):
            middle_forward(s, np.zeros((4, 2)))
