import numpy as np
import pytest

from xpronet.engine import ContractError, ShapeError, Tensor, finite_diff_check, ops
from xpronet.proto_net import (
    ProtoNetConfig,
    candidate_mask,
    fuse,
    init_proto_params,
    label_mask,
    project_candidates,
    prototype_stream,
    query,
    select_category_prototypes,
    select_top,
    topk_respond,
)


def make_params(seed=0, **kw):
    cfg = ProtoNetConfig(**kw)
    return cfg, init_proto_params(cfg, np.random.default_rng(seed))


def identity_params(dim: int, heads: int = 1):
    eye = np.eye(dim)
    return {
        "proto.W_pv": Tensor(eye),
        "proto.W_v": Tensor(eye),
        "proto.W_p": Tensor(eye),
        "proto.W_e": Tensor(np.stack([np.eye(dim // heads)] * heads)),
    }


class TestCandidateSelection:
    def test_single_category(self):
        pm = Tensor(np.random.default_rng(0).normal(size=(14, 20, 32)))
        mask = np.zeros(14, bool)
        mask[6] = True
        cand, prov = select_category_prototypes(pm, mask)
        assert cand.shape == (20, 32)
        assert (prov[:, 0] == 6).all() and prov[:, 1].tolist() == list(range(20))
        assert np.array_equal(cand.data, pm.data[6])

    def test_all_categories(self):
        pm = Tensor(np.zeros((14, 20, 32)))
        cand, prov = select_category_prototypes(pm, np.ones(14, bool))
        assert cand.shape[0] == 280
        assert len({tuple(p) for p in prov}) == 280

    def test_empty_mask(self):
        with pytest.raises(ContractError):
            select_category_prototypes(Tensor(np.zeros((14, 2, 3))), np.zeros(14, bool))

    def test_all_zero_labels_fall_back_to_all(self):
        assert label_mask(np.zeros((2, 14), int)).all()
        y = np.zeros(14, int)
        y[3] = 1
        assert label_mask(y).tolist() == [k == 3 for k in range(14)]

    def test_candidate_mask_expands(self):
        m = candidate_mask(np.array([True, False, True]), 2)
        assert m.tolist() == [True, True, False, False, True, True]


class TestQuery:
    def test_hand_value(self):
        params = identity_params(2)
        sims = query(Tensor([[1.0, 0.0]]), Tensor([[3.0, 4.0]]), params, heads=1)
        assert sims.data.reshape(-1)[0] == pytest.approx(1.5, abs=1e-15)

    def test_zero_feature_row(self):
        cfg, params = make_params()
        cand = params["proto.pm"].reshape((280, 32))
        feats = np.random.default_rng(0).normal(size=(3, 32))
        feats[1] = 0
        sims = query(Tensor(feats), cand, params, heads=2)
        assert np.array_equal(sims.data[:, 1, :], np.zeros((2, 280)))

    def test_homogeneous(self):
        cfg, params = make_params()
        cand = params["proto.pm"].reshape((280, 32))
        f = np.random.default_rng(1).normal(size=(1, 32))
        a = query(Tensor(f), cand, params, 2).data
        b = query(Tensor(2 * f), cand, params, 2).data
        assert np.allclose(b, 2 * a, rtol=1e-12, atol=1e-15)

    def test_shape_error(self):
        cfg, params = make_params()
        with pytest.raises(ShapeError):
            query(Tensor(np.zeros((2, 31))), params["proto.pm"].reshape((280, 32)), params)


class TestSelectTop:
    def test_ties_to_lowest_index(self):
        assert select_top(np.array([1.0, 3.0, 3.0, 3.0, 0.0]), 2).tolist() == [1, 2]

    def test_clamped_and_padded(self):
        allowed = np.array([True, False, True, False])
        out = select_top(np.array([0.1, 0.9, 0.5, 0.7]), 3, allowed)
        assert out.tolist() == [2, 0, -1]

    def test_gamma_larger_than_candidates(self):
        assert select_top(np.array([0.2, 0.1]), 15).tolist() == [0, 1]

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_stable_sort(self, seed):
        rng = np.random.default_rng(seed)
        sims = rng.integers(0, 3, size=(2, 2, 3, 30)).astype(float)
        allowed = rng.random((2, 1, 1, 30)) < 0.6
        got = select_top(sims, 5, allowed)
        neg = np.where(allowed, -sims, np.inf)
        ref = np.argsort(neg, axis=-1, kind="stable")[..., :5]
        ref = np.where(np.isfinite(np.take_along_axis(neg, ref, -1)), ref, -1)
        assert np.array_equal(got, ref)


class TestRespond:
    def test_literal_linear_hand_case(self):
        params = identity_params(2)
        sims = Tensor(np.array([[[0.5, 0.2, 0.3]]]))
        cand = Tensor(np.eye(3, 2))
        res = topk_respond(sims, cand, 2, params, normalizer="literal-linear")
        assert res.indices.reshape(-1).tolist() == [0, 2]
        assert np.allclose(res.weights.reshape(-1), [0.625, 0.375], atol=1e-15)

    def test_gamma_one_is_nearest(self):
        cfg, params = make_params(gamma=1)
        feats = Tensor(np.random.default_rng(2).normal(size=(5, 32)))
        cand = params["proto.pm"].reshape((280, 32))
        sims = query(feats, cand, params, cfg.heads)
        res = topk_respond(sims, cand, 1, params)
        p_star = project_candidates(cand, params).data
        best = sims.data.argmax(axis=-1)  # [h, N]
        dh = cfg.head_dim
        for h in range(cfg.heads):
            expect = p_star[best[h], h * dh : (h + 1) * dh] @ params["proto.W_e"].data[h]
            assert np.array_equal(res.weights[h, :, 0], np.ones(5))
            assert np.allclose(res.responses.data[:, h * dh : (h + 1) * dh], expect, atol=1e-14)

    def test_identical_candidates_independent_of_gamma(self):
        cfg, params = make_params()
        cand = Tensor(np.tile(np.random.default_rng(3).normal(size=(1, 32)), (40, 1)))
        feats = Tensor(np.random.default_rng(4).normal(size=(3, 32)))
        outs = []
        for g in (1, 5, 40):
            sims = query(feats, cand, params, cfg.heads)
            outs.append(topk_respond(sims, cand, g, params).responses.data)
        assert np.allclose(outs[0], outs[1], atol=1e-14) and np.allclose(outs[0], outs[2], atol=1e-14)

    def test_weights_form_probability_vectors(self):
        cfg, params = make_params()
        feats = Tensor(np.random.default_rng(5).normal(size=(4, 16, 32)))
        mask = np.random.default_rng(6).random((4, 14)) < 0.3
        res, fused = prototype_stream(feats, params, cfg, label_mask(mask.astype(int)))
        assert np.all(res.weights >= 0)
        assert np.max(np.abs(res.weights.sum(axis=-1) - 1)) < 1e-9
        assert fused.shape == (4, 16, 32)

    def test_mask_soundness_many_trials(self):
        cfg, params = make_params(n_protos=5, gamma=4)
        rng = np.random.default_rng(7)
        for _ in range(1000):
            y = (rng.random((2, 14)) < 0.2).astype(int)
            feats = Tensor(rng.normal(size=(2, 3, 32)))
            mask = label_mask(y)
            res, _ = prototype_stream(feats, params, cfg, mask)
            cats = np.where(res.indices >= 0, res.indices // cfg.n_protos, -1)
            for b in range(2):
                picked = cats[b][cats[b] >= 0]
                assert mask[b, picked].all()

    def test_candidate_permutation(self):
        cfg, params = make_params()
        cand = params["proto.pm"].reshape((280, 32))
        perm = np.random.default_rng(8).permutation(280)
        feats = Tensor(np.random.default_rng(9).normal(size=(6, 32)))
        a = topk_respond(query(feats, cand, params, 2), cand, 15, params)
        cand_p = Tensor(cand.data[perm])
        b = topk_respond(query(feats, cand_p, params, 2), cand_p, 15, params)
        assert np.max(np.abs(a.responses.data - b.responses.data)) < 1e-12
        assert np.array_equal(np.sort(perm[b.indices], axis=-1), np.sort(a.indices, axis=-1))

    def test_single_head_matches_plain_computation(self):
        cfg, params = make_params(heads=1, gamma=3)
        cand = params["proto.pm"].reshape((280, 32))
        f = np.random.default_rng(10).normal(size=(2, 32))
        res = topk_respond(query(Tensor(f), cand, params, 1), cand, 3, params)
        p_star = project_candidates(cand, params).data
        d = (f @ params["proto.W_v"].data) @ p_star.T / 32
        for n in range(2):
            top = np.argsort(-d[n], kind="stable")[:3]
            w = np.exp(d[n, top] - d[n, top].max())
            w /= w.sum()
            expect = w @ (p_star[top] @ params["proto.W_e"].data[0])
            assert np.allclose(res.responses.data[n], expect, atol=1e-14)


class TestFuse:
    def test_identity_weights_zero_response(self):
        cfg, params = make_params()
        f = np.random.default_rng(0).normal(size=(5, 32))
        out = fuse(Tensor(f), Tensor(np.zeros((5, 32))), params)
        assert np.allclose(out.data, f, atol=1e-15)

    def test_length_mismatch(self):
        cfg, params = make_params()
        with pytest.raises(ShapeError):
            fuse(Tensor(np.zeros((5, 32))), Tensor(np.zeros((4, 32))), params)

    def test_gradient_to_both_branches(self):
        cfg, params = make_params()
        rng = np.random.default_rng(1)
        feat = Tensor(rng.normal(size=(1, 32)), requires_grad=True)
        resp = Tensor(rng.normal(size=(1, 32)), requires_grad=True)
        t = rng.normal(size=(1, 32))
        report = finite_diff_check(lambda: (fuse(feat, resp, params) * t).sum(), [feat, resp])
        assert report.max_rel_error < 1e-5, str(report)


@pytest.mark.parametrize("normalizer", ["softmax", "literal-linear"])
def test_pipeline_gradient_with_fixed_selection(normalizer):
    cfg, params = make_params(n_protos=4, gamma=3, normalizer=normalizer, seed=3)
    rng = np.random.default_rng(11)
    feats = Tensor(rng.normal(size=(2, 3, 32)), requires_grad=True)
    mask = label_mask((rng.random((2, 14)) < 0.3).astype(int))
    res, _ = prototype_stream(feats, params, cfg, mask)
    t = rng.normal(size=(2, 3, 32))

    def f():
        _, fused = prototype_stream(feats, params, cfg, mask, selection=res.indices)
        return (fused * t).sum()

    report = finite_diff_check(f, [feats] + list(params.values()))
    assert report.max_rel_error < 1e-4, str(report)
