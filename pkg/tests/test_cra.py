import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from selfalign.autodiff import Tensor
from selfalign.cra import (ContextFlags, SideContext, build_negative_pool, contextual_similarity,
                           contrastive_scalar, contrastive_term, cra_loss, enhance_batch, enhance_context,
                           gated_fuse_array, global_local_contrastive)
from selfalign.encoder import encode_image, encode_text, triplet_hardest
from selfalign.numeric import cosine, cosine_matrix


def _batch(model, rng, B=3, M=4, D=3, training=True, flags=None):
    h = model.hidden
    Vc = Tensor(rng.standard_normal((B, M, h)).astype(np.float32))
    Tc = Tensor(rng.standard_normal((B, D, h)).astype(np.float32))
    return enhance_batch(model.tensors(), model.bn, Vc, Tc, training, flags), Vc, Tc


def test_pooled_context_is_row_mean(model, rng):
    ctx, Vc, Tc = _batch(model, rng)
    np.testing.assert_allclose(ctx.t_pooled.data, Tc.data.astype(np.float64).mean(axis=1), rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(ctx.v_pooled.data, Vc.data.astype(np.float64).mean(axis=1), rtol=1e-6, atol=1e-6)


def test_starred_outputs_nonnegative_and_relu_floor(model, rng):
    ctx, _, _ = _batch(model, rng)
    for t in (ctx.t_star, ctx.v_star, ctx.t_proj, ctx.v_proj):
        assert np.all(t.data >= 0)
    model.weights["bn.img_local.beta"][...] = -100.0
    ctx, _, _ = _batch(model, rng)
    assert not np.any(ctx.v_star.data)


def test_single_region_aggregate_is_that_local(model, rng):
    ctx, _, _ = _batch(model, rng, M=1, training=False)
    np.testing.assert_array_equal(ctx.v_agg.data, ctx.v_star.data[:, 0])


def test_gate_limits():
    s, g0 = np.array([1.0, 2.0]), np.array([-3.0, 0.5])
    w = np.zeros(4)
    out, g = gated_fuse_array(s, g0, w, np.array([60.0]))
    np.testing.assert_allclose(out, s)
    out, g = gated_fuse_array(s, g0, w, np.array([-60.0]))
    np.testing.assert_allclose(out, g0)
    out, g = gated_fuse_array(s, s, np.ones(4), np.array([0.3]))
    np.testing.assert_allclose(out, s)
    assert 0 < g < 1


def test_context_similarity_identity():
    v = np.array([1.0, 2.0, 3.0])
    u = np.array([0.5, -1.0, 2.0])
    img = SideContext(None, None, None, local_agg=v, fused=u, gate=0.5)
    txt = SideContext(None, None, None, local_agg=u, fused=v, gate=0.5)
    assert contextual_similarity(img, txt) == pytest.approx(1.0)
    one = contextual_similarity(img, txt, ContextFlags(image_attended=False))
    assert one == pytest.approx(cosine(v, v))


@settings(max_examples=50, deadline=None)
@given(*[arrays(np.float64, 4, elements=st.floats(-5, 5)) for _ in range(4)])
def test_context_similarity_bounded(a, b, c, d):
    s = contextual_similarity(SideContext(None, None, None, a, b, None), SideContext(None, None, None, c, d, None))
    assert -1.0 <= s <= 1.0


def test_contrastive_hand_example():
    tau = 0.7
    pos, neg = [0.8, 0.2], [0.5, 0.1]
    expected = np.mean([-np.log(np.exp(p / tau) / (np.exp(p / tau) + sum(np.exp(n / tau) for n in neg)))
                        for p in pos])
    assert contrastive_scalar(pos, neg, tau) == pytest.approx(expected, rel=1e-12)
    literal = np.mean([-np.log(np.exp(p / tau) / sum(np.exp(n / tau) for n in neg)) for p in pos])
    assert contrastive_scalar(pos, neg, tau, literal=True) == pytest.approx(literal, rel=1e-12)


def test_contrastive_degenerate_and_limit():
    assert contrastive_scalar([0.3], [], 0.7) == pytest.approx(0.0)
    assert contrastive_scalar([1.0], [-1.0] * 8, 0.01) < 1e-30


def test_negative_pool_excludes_own_pair_and_orders():
    cos = np.array([[0.9, 0.8, 0.3, 0.3, 0.7, 0.1],
                    [0.2, 0.5, 0.9, 0.9, 0.4, 0.6]])
    pool = build_negative_pool(cos, 2, 3)
    assert pool.indices[0].tolist() == [4, 2, 3]
    assert pool.indices[1].tolist() == [5, 1, 4]
    assert build_negative_pool(cos, 2, 99).indices.shape == (2, 4)


def test_contrastive_term_matches_scalar_oracle(rng):
    B, n, h, N = 3, 4, 5, 6
    anchor, locs = rng.standard_normal((B, h)), rng.standard_normal((B, n, h))
    got = float(contrastive_term(Tensor(anchor), Tensor(locs), 0.7, N).data)
    per = []
    for i in range(B):
        pos = cosine_matrix(anchor[[i]], locs[i])[0]
        others = np.concatenate([locs[j] for j in range(B) if j != i])
        neg = np.sort(cosine_matrix(anchor[[i]], others)[0])[::-1][:N]
        per.append(contrastive_scalar(pos, neg, 0.7))
    assert got == pytest.approx(np.mean(per), rel=1e-10)


def test_contrastive_term_needs_two_samples(rng):
    assert contrastive_term(Tensor(rng.standard_normal((1, 3))), Tensor(rng.standard_normal((1, 2, 3))), 0.7, 4) is None


def test_small_batch_warns(model, rng):
    ctx, _, _ = _batch(model, rng, B=1, training=False)
    with pytest.warns(RuntimeWarning):
        assert global_local_contrastive(ctx, 0.7, 4)[2] is None


def test_cra_loss_composes_scalar_oracles(model, rng):
    model.weights["bn.txt_local.beta"][...] = 0.5  # keep starred locals away from all-zero rows
    model.weights["bn.img_local.beta"][...] = 0.5
    ctx, _, _ = _batch(model, rng, B=3)
    total, parts = cra_loss(ctx, 0.2, 0.7, 4)
    v_agg, t_agg = ctx.v_agg.data, ctx.t_agg.data
    S = 0.5 * (cosine_matrix(v_agg, ctx.t_fused.data) + cosine_matrix(ctx.v_fused.data, t_agg))
    l_ca = triplet_hardest(S, 0.2)

    def term(anchor, locs):
        vals = []
        for i in range(len(anchor)):
            pos = cosine_matrix(anchor[[i]], locs[i])[0]
            others = np.concatenate([locs[j] for j in range(len(anchor)) if j != i])
            vals.append(contrastive_scalar(pos, np.sort(cosine_matrix(anchor[[i]], others)[0])[::-1][:4], 0.7))
        return np.mean(vals)

    l_cs = 0.5 * (term(ctx.t_proj.data, ctx.v_star.data) + term(ctx.v_proj.data, ctx.t_star.data))
    assert float(parts["L_ca"].data) == pytest.approx(l_ca, abs=1e-5)
    assert float(parts["L_cs"].data) == pytest.approx(l_cs, abs=1e-5)
    assert float(total.data) == pytest.approx(l_ca + l_cs, abs=1e-5)
    only_cs, _ = cra_loss(ctx, 0.2, 0.7, 4, ca_enabled=False)
    assert float(only_cs.data) == pytest.approx(float(parts["L_cs"].data))


def test_perfectly_separated_batch_has_zero_alignment_loss():
    assert triplet_hardest(2 * np.eye(3) - 1, 0.2) == 0.0


def test_dropped_side_uses_one_term(model, rng):
    ctx, _, _ = _batch(model, rng, flags=ContextFlags(text_attended=False))
    assert ctx.t_proj is None and ctx.t_gate is None
    np.testing.assert_array_equal(ctx.t_fused.data, ctx.t_pooled.data)
    l_tg, l_vg, l_cs = global_local_contrastive(ctx, 0.7, 4, flags=ContextFlags(text_attended=False))
    assert l_tg is None and float(l_cs.data) == float(l_vg.data)


def test_per_sample_enhancement_is_batch_independent(model, small_dataset):
    model.eval()
    pairs = small_dataset.pairs[:4]
    encs = [(encode_image(p.image, model), encode_text(p.text, model)) for p in pairs]
    ctx = enhance_context(*encs[2], model)
    h = model.hidden
    Vc = Tensor(np.stack([e[0].context for e in encs]))
    Tc = Tensor(np.stack([e[1].context for e in encs]))
    batch = enhance_batch(model.tensors(), model.bn, Vc, Tc, False)
    assert 0 < ctx.image.gate < 1 and 0 < ctx.text.gate < 1
    np.testing.assert_allclose(ctx.image.fused, batch.v_fused.data[2], rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(ctx.text.local_agg, batch.t_agg.data[2], rtol=1e-6, atol=1e-7)
    assert ctx.image.fused.shape == (h,)
