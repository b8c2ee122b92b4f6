import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixreorg.losses import (
    contrastive_pair_loss,
    multilabel_contrastive_loss,
    predict_masks,
    seg_loss,
    similarity,
    total_loss,
)
from mixreorg.numerics import Tensor, grad_check, precision


def _unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# plain-numpy oracles, written from the definitions without the autodiff library


def _np_log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def _np_pair(zi, zt, tau):
    b = len(zi)
    logits = zi @ zt.T / tau
    return -np.mean([_np_log_softmax(logits)[i, i] for i in range(b)]) - np.mean(
        [_np_log_softmax(logits.T)[i, i] for i in range(b)]
    )


def _np_multilabel(zi, zp, tau):
    k, b, _ = zp.shape
    i2t = 0.0
    for i in range(b):
        all_logits = np.array([[zi[i] @ zp[kk, j] / tau for j in range(b)] for kk in range(k)])
        pos = all_logits[:, i]
        i2t += np.log(np.exp(all_logits).sum()) - np.log(np.exp(pos).sum())
    t2i = 0.0
    for kk in range(k):
        for i in range(b):
            row = np.array([zp[kk, i] @ zi[j] / tau for j in range(b)])
            t2i += -_np_log_softmax(row)[i]
    return i2t / b + t2i / (k * b)


def _np_seg(mp, mask, eps=1e-8):
    return float(np.mean(-np.log((mp[mask > 0] + eps) / (1.0 + eps))))


# ---------------------------------------------------------------------------
# analytic values


@pytest.mark.parametrize("b", [2, 4, 16])
def test_identical_embeddings_pair_loss_is_two_log_b(b):
    z = np.tile(_unit(np.random.default_rng(0), 1, 8), (b, 1))
    with precision(np.float64):
        loss = contrastive_pair_loss(Tensor(z), Tensor(z), 0.07)
    assert abs(float(loss.data) - 2 * math.log(b)) <= 1e-6


@pytest.mark.parametrize("b", [2, 4, 16])
def test_uniform_mask_prediction_gives_log_b(b):
    mask = np.zeros((2, 5, b))
    mask[:, :, 0] = 1.0
    with precision(np.float64):
        loss = seg_loss(Tensor(np.full((2, 5, b), 1.0 / b)), mask)
    assert abs(float(loss.data) - math.log(b)) <= 1e-6


def test_perfect_mask_prediction_hits_epsilon_floor():
    mask = np.eye(4)[np.random.default_rng(1).integers(0, 4, size=(2, 6))]
    with precision(np.float64):
        assert float(seg_loss(Tensor(mask.copy()), mask).data) <= 1e-6


def test_multilabel_with_one_prompt_equals_pair_loss():
    rng = np.random.default_rng(2)
    zi, zt = _unit(rng, 6, 8), _unit(rng, 6, 8)
    with precision(np.float64):
        a = multilabel_contrastive_loss(Tensor(zi), Tensor(zt[None]), 0.1)
        b = contrastive_pair_loss(Tensor(zi), Tensor(zt), 0.1)
    assert abs(float(a.data) - float(b.data)) <= 1e-9


def test_multilabel_duplicated_prompts_equal_pair_loss():
    # K identical prompt sets: the ln K in numerator and denominator cancel
    rng = np.random.default_rng(3)
    zi, zt = _unit(rng, 5, 8), _unit(rng, 5, 8)
    with precision(np.float64):
        a = multilabel_contrastive_loss(Tensor(zi), Tensor(np.stack([zt] * 3)), 0.1)
        b = contrastive_pair_loss(Tensor(zi), Tensor(zt), 0.1)
    assert abs(float(a.data) - float(b.data)) <= 1e-9


def test_orthonormal_pairs_at_low_temperature():
    b = 4
    z = np.eye(b)
    with precision(np.float64):
        loss = float(contrastive_pair_loss(Tensor(z), Tensor(z), 0.01).data)
    # each direction: -log(e^100 / (e^100 + (b-1) e^0))
    expected = 2 * math.log1p((b - 1) * math.exp(-100.0))
    assert loss == pytest.approx(expected, abs=1e-12)


def test_pair_loss_b2_against_oracle():
    zi = np.array([[1.0, 0.0], [0.6, 0.8]])
    zt = np.array([[0.8, 0.6], [0.0, 1.0]])
    tau = 0.5
    with precision(np.float64):
        got = float(contrastive_pair_loss(Tensor(zi), Tensor(zt), tau).data)
    # image 0: logits [1.6, 0.0]; image 1: [1.92, 1.6]; text 0: [1.6, 1.92]; text 1: [0.0, 1.6]
    i2t = (math.log(1 + math.exp(-1.6)) + math.log(1 + math.exp(1.92 - 1.6))) / 2
    t2i = (math.log(1 + math.exp(1.92 - 1.6)) + math.log(1 + math.exp(-1.6))) / 2
    assert got == pytest.approx(i2t + t2i, abs=1e-12)


def test_multilabel_b2_k2_against_oracle():
    rng = np.random.default_rng(4)
    zi, zp = _unit(rng, 2, 3), _unit(rng, 2, 2, 3)
    with precision(np.float64):
        got = float(multilabel_contrastive_loss(Tensor(zi), Tensor(zp), 0.2).data)
    assert got == pytest.approx(_np_multilabel(zi, zp, 0.2), abs=1e-12)


def test_batch_of_one_rejected():
    z = Tensor(np.ones((1, 4)) / 2)
    with pytest.raises(ValueError, match="at least 2"):
        contrastive_pair_loss(z, z, 0.1)
    with pytest.raises(ValueError, match="at least 2"):
        multilabel_contrastive_loss(z, Tensor(np.ones((2, 1, 4)) / 2), 0.1)


def test_out_of_range_float_temperature_warns_and_clamps():
    rng = np.random.default_rng(5)
    zi, zt = _unit(rng, 3, 4), _unit(rng, 3, 4)
    with pytest.warns(UserWarning, match="clamped"):
        a = float(contrastive_pair_loss(Tensor(zi), Tensor(zt), 1e-4).data)
    b = float(contrastive_pair_loss(Tensor(zi), Tensor(zt), 0.01).data)
    assert a == b


# ---------------------------------------------------------------------------
# properties


def _orthogonal(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8), st.floats(0.02, 1.0))
def test_losses_invariant_to_joint_rotation(seed, b, tau):
    rng = np.random.default_rng(seed)
    zi, zt, zp = _unit(rng, b, 6), _unit(rng, b, 6), _unit(rng, 2, b, 6)
    q = _orthogonal(rng, 6)
    with precision(np.float64):
        a = float(contrastive_pair_loss(Tensor(zi), Tensor(zt), tau).data)
        r = float(contrastive_pair_loss(Tensor(zi @ q), Tensor(zt @ q), tau).data)
        ma = float(multilabel_contrastive_loss(Tensor(zi), Tensor(zp), tau).data)
        mr = float(multilabel_contrastive_loss(Tensor(zi @ q), Tensor(zp @ q), tau).data)
    assert a == pytest.approx(r, rel=1e-9, abs=1e-9)
    assert ma == pytest.approx(mr, rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(1, 3), st.floats(0.02, 1.0))
def test_losses_match_oracles_and_are_non_negative(seed, b, k, tau):
    rng = np.random.default_rng(seed)
    zi, zt, zp = _unit(rng, b, 5), _unit(rng, b, 5), _unit(rng, k, b, 5)
    with precision(np.float64):
        pair = float(contrastive_pair_loss(Tensor(zi), Tensor(zt), tau).data)
        ml = float(multilabel_contrastive_loss(Tensor(zi), Tensor(zp), tau).data)
    assert pair >= 0 and ml >= 0
    assert pair == pytest.approx(_np_pair(zi, zt, tau), rel=1e-9)
    assert ml == pytest.approx(_np_multilabel(zi, zp, tau), rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_seg_loss_matches_oracle_and_is_non_negative(seed):
    rng = np.random.default_rng(seed)
    raw = rng.random((2, 5, 4))
    mp = raw / raw.sum(-1, keepdims=True)
    mask = np.eye(4)[rng.integers(0, 4, size=(2, 5))]
    with precision(np.float64):
        got = float(seg_loss(Tensor(mp), mask).data)
    assert got >= 0
    assert got == pytest.approx(_np_seg(mp, mask), rel=1e-12)


# ---------------------------------------------------------------------------
# mask prediction


def test_predict_masks_matches_triple_loop():
    rng = np.random.default_rng(6)
    a = rng.random((2, 5, 3))
    s = rng.random((2, 3, 4))
    with precision(np.float64):
        got = predict_masks(Tensor(a), Tensor(s)).data
    ref = np.zeros((2, 5, 4))
    for m in range(2):
        for i in range(5):
            for b in range(4):
                ref[m, i, b] = sum(a[m, i, k] * s[m, k, b] for k in range(3))
    np.testing.assert_allclose(got, ref, rtol=1e-12)


def test_one_hot_attention_copies_segment_row():
    a = np.zeros((1, 4, 2))
    a[0, [0, 1, 3], 0] = 1.0
    a[0, 2, 1] = 1.0
    s = np.array([[[0.7, 0.3], [0.1, 0.9]]])
    with precision(np.float64):
        mp = predict_masks(Tensor(a), Tensor(s)).data[0]
    np.testing.assert_array_equal(mp, [s[0, 0], s[0, 0], s[0, 1], s[0, 0]])
    np.testing.assert_allclose(mp.sum(-1), 1.0)


def test_predict_masks_shape_mismatch():
    with pytest.raises(ValueError, match="incompatible"):
        predict_masks(Tensor(np.ones((1, 4, 3))), Tensor(np.ones((1, 2, 4))))


def test_similarity_rows_are_distributions():
    rng = np.random.default_rng(7)
    s = similarity(Tensor(_unit(rng, 2, 3, 4)), Tensor(_unit(rng, 5, 4)), 0.07).data
    assert s.shape == (2, 3, 5)
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)


def test_loss_gradients_check():
    rng = np.random.default_rng(8)
    zi, zt, zp = Tensor(_unit(rng, 3, 4)), Tensor(_unit(rng, 3, 4)), Tensor(_unit(rng, 2, 3, 4))
    tau = Tensor(np.array(0.3))
    assert grad_check(lambda a, b, t: contrastive_pair_loss(a, b, t), [zi, zt, tau]).passed
    assert grad_check(lambda a, p, t: multilabel_contrastive_loss(a, p, t), [zi, zp, tau]).passed
    seg, att = Tensor(_unit(rng, 2, 3, 4)), Tensor(rng.random((2, 5, 3)))
    mask = np.eye(3)[rng.integers(0, 3, size=(2, 5))]
    assert grad_check(lambda s, a, t: seg_loss(predict_masks(a, similarity(s, zt, t)), mask), [seg, att, tau]).passed


# ---------------------------------------------------------------------------
# total loss on the tiny configuration, against a straight-line recomputation


def test_total_loss_matches_straight_line_oracle():
    from mixreorg.config import tiny_config
    from mixreorg.encoders import encode_text, init_params
    from mixreorg.mixing import batch_plans_for_step, build_batch_mask, encode_branches
    from mixreorg.pipeline.train import assemble_batch
    from mixreorg.synthdata import CorpusSpec, generate_corpus

    cfg = tiny_config()
    scenes = generate_corpus(CorpusSpec(count=4, image_size=8))
    with precision(np.float64):
        p = init_params(cfg)
        images, tokens, prompts = assemble_batch(cfg, scenes, 0)
        plans = batch_plans_for_step(cfg, 0, 4)
        br = encode_branches(p, images, plans)
        zt = encode_text(p, tokens)
        zp = encode_text(p, prompts.reshape(-1, cfg.max_len)).reshape(cfg.K, 4, -1)
        mask = build_batch_mask(plans, 4)
        bundle = total_loss(br, mask, zt, zp, p.tau)

    tau = p.tau
    logits = np.einsum("msd,bd->msb", br.mixed.seg_embed.data, zt.data) / tau
    s = np.exp(_np_log_softmax(logits))
    mp = np.einsum("mis,msb->mib", br.mixed.attn.data, s)
    expected = {
        "l_seg": _np_seg(mp, mask),
        "l_re_pair": _np_pair(br.restored.z.data, zt.data, tau),
        "l_re_multilabel": _np_multilabel(br.restored.z.data, zp.data, tau),
        "l_ori_pair": _np_pair(br.original.z.data, zt.data, tau),
        "l_ori_multilabel": _np_multilabel(br.original.z.data, zp.data, tau),
    }
    expected["total"] = sum(expected.values())
    got = bundle.values()
    for name, value in expected.items():
        assert got[name] == pytest.approx(value, abs=1e-5), name


def test_disabled_terms_reported_but_not_summed():
    rng = np.random.default_rng(9)

    class _Out:
        def __init__(self):
            self.z = Tensor(_unit(rng, 2, 4))
            self.seg_embed = Tensor(_unit(rng, 2, 3, 4))
            self.attn = Tensor(np.eye(3)[rng.integers(0, 3, size=(2, 5))])

    with precision(np.float64):

        class _Br:
            original, mixed, restored = _Out(), _Out(), _Out()

        zt, zp = Tensor(_unit(rng, 2, 4)), Tensor(_unit(rng, 1, 2, 4))
        mask = np.eye(2)[rng.integers(0, 2, size=(2, 5))]
        full = total_loss(_Br, mask, zt, zp, 0.1).values()
        no_seg = total_loss(_Br, mask, zt, zp, 0.1, use_seg=False).values()
        no_re = total_loss(_Br, mask, zt, zp, 0.1, use_re=False).values()
    assert no_seg["l_seg"] == full["l_seg"]
    assert no_seg["total"] == pytest.approx(full["total"] - full["l_seg"], abs=1e-12)
    assert no_re["total"] == pytest.approx(full["total"] - full["l_re_pair"] - full["l_re_multilabel"], abs=1e-12)
