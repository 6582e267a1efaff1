import numpy as np
import pytest

from xpronet.corpus import BOS, EOS
from xpronet.decoding import Hypothesis, beam_search, best_of, greedy_search
from xpronet.engine import ContractError, Tensor, finite_diff_check, ops
from xpronet.seq_model import (
    ModelConfig,
    VocabError,
    decode,
    decode_step,
    embed_report,
    encode,
    init_seq_params,
    sinusoidal_positions,
)


@pytest.fixture(scope="module")
def model():
    cfg = ModelConfig(vocab_size=39)
    return cfg, init_seq_params(cfg, np.random.default_rng(0))


class TestEmbedding:
    def test_shape(self, model):
        cfg, params = model
        assert embed_report([1, 5, 6, 2], params, cfg).shape == (4, 32)

    def test_empty(self, model):
        cfg, params = model
        assert embed_report(np.zeros(0, dtype=int), params, cfg).shape == (0, 32)

    def test_same_token_differs_by_position(self, model):
        cfg, params = model
        out = embed_report([7, 7], params, cfg).data
        pe = sinusoidal_positions(2, 32)
        assert np.allclose(out[1] - out[0], pe[1] - pe[0], atol=1e-15)

    def test_out_of_range(self, model):
        cfg, params = model
        with pytest.raises(VocabError):
            embed_report([1, 39], params, cfg)


class TestEncoder:
    def test_shape(self, model):
        cfg, params = model
        x = np.random.default_rng(0).normal(size=(16, 32))
        assert encode(x, params, cfg).shape == (16, 32)

    def test_permutation_equivariant_without_positions(self, model):
        cfg, params = model
        rng = np.random.default_rng(1)
        x = rng.normal(size=(16, 32))
        perm = rng.permutation(16)
        a = encode(x, params, cfg, use_positions=False).data
        b = encode(x[perm], params, cfg, use_positions=False).data
        assert np.allclose(a[perm], b, atol=1e-12)

    def test_positions_break_equivariance(self, model):
        cfg, params = model
        rng = np.random.default_rng(2)
        x = rng.normal(size=(16, 32))
        perm = rng.permutation(16)
        assert not np.allclose(encode(x, params, cfg).data[perm], encode(x[perm], params, cfg).data)

    def test_deterministic_in_eval(self, model):
        cfg, params = model
        x = np.random.default_rng(3).normal(size=(16, 32))
        assert np.array_equal(encode(x, params, cfg).data, encode(x, params, cfg).data)


class TestDecoder:
    def memory(self, model, seed=0):
        cfg, params = model
        return encode(np.random.default_rng(seed).normal(size=(16, 32)), params, cfg)

    def test_distribution_sums_to_one(self, model):
        cfg, params = model
        p = decode_step(self.memory(model), embed_report([1, 5, 6], params, cfg), params, cfg).data
        assert abs(p.sum() - 1) < 1e-12 and (p >= 0).all()

    @pytest.mark.parametrize("seed", range(10))
    def test_causality(self, model, seed):
        cfg, params = model
        rng = np.random.default_rng(seed)
        mem = self.memory(model, seed)
        prefix = rng.integers(0, cfg.vocab_size, size=int(rng.integers(2, 20)))
        longer = np.concatenate([prefix, rng.integers(0, cfg.vocab_size, size=5)])
        a = decode(mem, embed_report(prefix, params, cfg), params, cfg).data
        b = decode(mem, embed_report(longer, params, cfg), params, cfg).data
        assert np.allclose(a, b[: len(prefix)], atol=1e-12)

    def test_near_uniform_at_init(self, model):
        cfg, params = model
        p = decode_step(self.memory(model), embed_report([1], params, cfg), params, cfg).data
        entropy = -(p * np.log(p)).sum()
        assert abs(entropy - np.log(cfg.vocab_size)) / np.log(cfg.vocab_size) < 0.05

    def test_empty_prefix(self, model):
        cfg, params = model
        with pytest.raises(ContractError):
            decode(self.memory(model), np.zeros((0, 32)), params, cfg)

    def test_too_long_prefix(self, model):
        cfg, params = model
        with pytest.raises(ContractError):
            decode(self.memory(model), np.zeros((cfg.max_len + 1, 32)), params, cfg)

    def test_trace_rows_are_distributions(self, model):
        cfg, params = model
        trace = {}
        decode(self.memory(model), embed_report([1, 4, 5], params, cfg), params, cfg, trace=trace)
        cross = trace["seq.dec1.cross"]
        assert cross.shape == (1, cfg.heads, 3, 16)
        assert np.allclose(cross.sum(-1), 1.0)
        assert np.all(np.triu(trace["seq.dec0.self"][0, 0], 1) == 0)

    def test_gradient(self):
        cfg = ModelConfig(vocab_size=7, d_model=8, heads=2, d_ff=12, layers=1, max_len=6)
        params = init_seq_params(cfg, np.random.default_rng(1))
        rng = np.random.default_rng(2)
        mem_in = Tensor(rng.normal(size=(2, 4, 8)), requires_grad=True)
        tokens = rng.integers(0, 7, size=(2, 5))
        t = rng.normal(size=(2, 5, 7))

        def f():
            mem = encode(mem_in, params, cfg)
            return (ops.softmax(decode(mem, embed_report(tokens, params, cfg), params, cfg)) * t).sum()

        report = finite_diff_check(f, [mem_in] + list(params.values()))
        assert report.max_rel_error < 1e-4, str(report)


def table_step(table: np.ndarray):
    """Scorer whose next-token distribution depends only on the previous token."""
    logp = np.log(table / table.sum(axis=1, keepdims=True))
    return lambda prefixes, owners: logp[prefixes[:, -1]]


class TestSearch:
    def random_table(self, seed, v=6):
        rng = np.random.default_rng(seed)
        table = rng.random((v, v)) + 0.05
        table[:, EOS] += 0.2
        return table

    @pytest.mark.parametrize("seed", range(10))
    def test_beam_one_equals_greedy(self, seed):
        step = table_step(self.random_table(seed))
        g = greedy_search(step, 3, 10)
        b = beam_search(step, 3, 1, 10, length_normalize=False)
        assert [h.tokens for h in g] == [h.tokens for h in b]
        assert np.allclose([h.log_prob for h in g], [h.log_prob for h in b])

    @pytest.mark.parametrize("seed", range(10))
    def test_terminates_within_bound(self, seed):
        step = table_step(self.random_table(seed))
        for h in beam_search(step, 2, 3, 7) + greedy_search(step, 2, 7):
            assert 1 <= len(h.tokens) <= 7

    def test_beam_finds_better_sequence_than_greedy(self):
        # greedy takes token 4 (0.6) then is stuck; beam keeps token 5 (0.4) which ends surely
        v = 6
        table = np.full((v, v), 1e-9)
        table[BOS, 4], table[BOS, 5] = 0.6, 0.4
        table[4, :] = 1.0
        table[4, EOS] = 1.0
        table[5, EOS] = 1.0
        step = table_step(table)
        g = greedy_search(step, 1, 2)[0]
        b = beam_search(step, 1, 3, 2, length_normalize=False)[0]
        assert b.log_prob >= g.log_prob - 1e-12
        assert b.tokens == [5, EOS]

    def test_banned_tokens_never_emitted(self):
        step = table_step(np.ones((6, 6)))
        for h in greedy_search(step, 2, 5) + beam_search(step, 2, 3, 5):
            assert 0 not in h.tokens and BOS not in h.tokens

    def test_best_of_tie_is_lexicographic(self):
        a, b = Hypothesis([5, 2], -1.0), Hypothesis([4, 2], -1.0)
        assert best_of([a, b], True) is b
