import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fasttcm import tensor as T
from fasttcm.bridge import (
    DegenerateInputError,
    LabelError,
    LanguagePromptGenerator,
    ModeError,
    VisualPromptGenerator,
    aux_loss,
    bsm,
    condition_prompt,
    cosine,
    fuse,
    match,
    total_loss,
)
from fasttcm.config import ConfigError
from fasttcm.tensor import Tensor

rng = np.random.default_rng
vec = arrays(np.float64, 6, elements=st.floats(-10, 10))


def lg(cfg, mode="fast", seed=0):
    return LanguagePromptGenerator(cfg.encoder, rng(seed), mode)


# ---------------------------------------------------------------- cue generator


def test_cc_zero_meta_query_deterministic(cfg):
    gen = lg(cfg)
    mq = Tensor(np.zeros(cfg.encoder.C))
    a, b = gen.generate_cc(mq), gen.generate_cc(mq)
    assert a.shape == (cfg.encoder.D,)
    assert a.data.tobytes() == b.data.tobytes()


def test_cc_formula(cfg):
    gen = lg(cfg)
    x = rng(1).normal(size=cfg.encoder.C)

    def ln(v, g, b):
        return g * (v - v.mean()) / np.sqrt(v.var() + 1e-5) + b

    h = np.maximum(ln(x, gen.ln1.gamma.data, gen.ln1.beta.data) @ gen.W1.data + gen.b1.data, 0)
    expected = ln(h, gen.ln2.gamma.data, gen.ln2.beta.data) @ gen.W2.data + gen.b2.data
    np.testing.assert_allclose(gen.generate_cc(Tensor(x)).data, expected, atol=1e-12)


def test_cc_depends_on_meta_query(cfg):
    gen = lg(cfg)
    mq = rng(2).normal(size=cfg.encoder.C)
    bumped = mq.copy()
    bumped[3] += 1e-3
    assert np.abs(gen.generate_cc(Tensor(bumped)).data - gen.generate_cc(Tensor(mq)).data).max() > 1e-8


def test_cc_tcm_image_dependence(cfg):
    gen = lg(cfg, "tcm")
    g1, g2 = rng(3).normal(size=(2, cfg.encoder.C))
    a, b = gen.generate_cc_tcm(Tensor(g1)), gen.generate_cc_tcm(Tensor(g2))
    assert a.shape == (cfg.encoder.D,)
    assert not np.allclose(a.data, b.data)
    assert gen.generate_cc_tcm(Tensor(g1)).data.tobytes() == a.data.tobytes()


def test_mode_mismatch(cfg):
    with pytest.raises(ModeError):
        lg(cfg, "tcm").generate_cc(Tensor(np.zeros(cfg.encoder.C)))
    with pytest.raises(ModeError):
        lg(cfg, "fast").generate_cc_tcm(Tensor(np.zeros(cfg.encoder.C)))


# ---------------------------------------------------------------- condition_prompt


def test_zero_cue_leaves_prompt():
    t_in = rng(4).normal(size=(5, 3))
    assert condition_prompt(Tensor(np.zeros(3)), Tensor(t_in)).data.tobytes() == t_in.tobytes()


def test_cue_on_zero_prompt_fills_rows():
    v = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(condition_prompt(Tensor(v), Tensor(np.zeros((4, 3)))).data, np.tile(v, (4, 1)))


def test_condition_prompt_rowwise_addition():
    t_in, cc = rng(5).normal(size=(5, 8)), rng(6).normal(size=8)
    out = condition_prompt(Tensor(cc), Tensor(t_in)).data
    for i in range(5):
        np.testing.assert_allclose(out[i], t_in[i] + cc, rtol=0, atol=1e-15)


# ---------------------------------------------------------------- bsm


def test_bsm_orthogonal():
    t, g = np.array([1.0, 0.0, 0.0]), np.array([0.0, 2.0, 0.0])
    np.testing.assert_array_equal(bsm(Tensor(t), Tensor(g)).data, t)


def test_bsm_identical():
    t = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(bsm(Tensor(t), Tensor(t)).data, 2 * t, atol=1e-15)


def test_bsm_opposite_cancels():
    t = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(bsm(Tensor(t), Tensor(-t)).data, 0.0, atol=1e-15)


def test_signed_gate_follows_weighted_sum():
    t = np.array([0.3, -1.0, 2.0])
    g = np.array([-1.0, 0.5, -0.2])
    sim = g @ t / (np.linalg.norm(g) * np.linalg.norm(t))
    assert sim < 0
    np.testing.assert_allclose(bsm(Tensor(t), Tensor(g), gate="signed").data, sim * g + t, atol=1e-15)
    np.testing.assert_allclose(bsm(Tensor(t), Tensor(g)).data, -sim * g + t, atol=1e-15)
    np.testing.assert_allclose(bsm(Tensor(t), Tensor(-t), gate="signed").data, 2 * t, atol=1e-15)


@given(vec, vec)
def test_gates_agree_for_non_negative_similarity(t, g):
    if np.linalg.norm(t) < 1e-6 or np.linalg.norm(g) < 1e-6 or g @ t < 0:
        return
    a = bsm(Tensor(t), Tensor(g)).data
    b = bsm(Tensor(t), Tensor(g), gate="signed").data
    assert a.tobytes() == b.tobytes()


def test_bsm_gradient():
    t = Tensor(rng(30).normal(size=5), requires_grad=True)
    g = Tensor(rng(31).normal(size=5), requires_grad=True)
    w = rng(32).normal(size=5)
    for gate in ("abs", "signed"):
        assert T.grad_check(lambda: T.tsum(bsm(t, g, gate=gate) * w), [t, g]) < 1e-7


def test_unknown_gate():
    with pytest.raises(ConfigError):
        bsm(Tensor(np.ones(2)), Tensor(np.ones(2)), gate="max")


def test_bsm_disabled_is_identity():
    t = Tensor(rng(7).normal(size=6))
    assert bsm(t, Tensor(rng(8).normal(size=6)), enabled=False) is t


def test_bsm_zero_norm_raises():
    with pytest.raises(DegenerateInputError):
        bsm(Tensor(np.ones(3)), Tensor(np.zeros(3)))


@given(vec, vec)
def test_cosine_bounded(a, b):
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    sim = cosine(Tensor(a), Tensor(b)).item()
    assert -1 - 1e-12 <= sim <= 1 + 1e-12


# ---------------------------------------------------------------- visual prompt


def test_visual_prompt_shape(cfg):
    vg = VisualPromptGenerator(cfg.encoder, cfg.bridge, rng(0))
    I = rng(1).normal(size=(2, 8, 8, cfg.encoder.C))
    t = rng(2).normal(size=(2, cfg.encoder.C))
    assert vg(Tensor(I), Tensor(t)).shape == I.shape
    assert vg(Tensor(I[0]), Tensor(t[0])).shape == I[0].shape


def test_cross_attention_over_single_token_is_one(cfg):
    vg = VisualPromptGenerator(cfg.encoder, cfg.bridge, rng(0))
    vg(Tensor(rng(1).normal(size=(8, 8, cfg.encoder.C))), Tensor(rng(2).normal(size=cfg.encoder.C)))
    for layer in vg.layers:
        w = layer.cross_attn.last_weights
        assert w.shape[-1] == 1
        np.testing.assert_array_equal(w, 1.0)


def _ln(x, mod):
    return mod.gamma.data * (x - x.mean()) / np.sqrt(x.var() + mod.eps) + mod.beta.data


def _lin(x, mod):
    return x @ mod.weight.data + mod.bias.data


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def test_single_cell_matches_unrolled_decoder_layer(cfg):
    c = cfg.copy(vg_layers=1)
    vg = VisualPromptGenerator(c.encoder, c.bridge, rng(11))
    I, t = rng(12).normal(size=(1, 1, c.encoder.C)), rng(13).normal(size=c.encoder.C)
    layer = vg.layers[0]
    x = _lin(I.reshape(-1), vg.q_in)
    m = _lin(t, vg.kv_in)
    # with one query and one key, each attention block reduces to its value/output maps
    h = _ln(x, layer.ln1)
    x = x + _lin(_lin(h, layer.self_attn.v), layer.self_attn.o)
    x = x + _lin(_lin(m, layer.cross_attn.v), layer.cross_attn.o)
    x = x + _lin(_gelu(_lin(_ln(x, layer.ln3), layer.ffn.fc1)), layer.ffn.fc2)
    expected = _lin(_ln(x, vg.ln_out), vg.out)
    np.testing.assert_allclose(vg(Tensor(I), Tensor(t)).data.reshape(-1), expected, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- fuse / match


def test_fuse_identities():
    I, It = rng(14).normal(size=(2, 2, 3)), rng(15).normal(size=(2, 2, 3))
    assert fuse(Tensor(I), Tensor(np.zeros_like(I))).data.tobytes() == I.tobytes()
    assert fuse(Tensor(np.zeros_like(I)), Tensor(It)).data.tobytes() == It.tobytes()
    np.testing.assert_allclose(fuse(Tensor(I), Tensor(It)).data, I + It, rtol=0, atol=1e-15)


def test_match_zero_embedding_is_half():
    P = match(Tensor(np.zeros((3, 3, 4))), Tensor(np.ones(4)), 0.07)
    assert P.shape == (3, 3, 1)
    np.testing.assert_array_equal(P.data, 0.5)


def test_match_dot_equal_to_tau():
    I = np.zeros((2, 2, 2))
    I[0, 1] = [0.07, 0.0]
    P = match(Tensor(I), Tensor(np.array([1.0, 0.0])), 0.07).data
    assert P[0, 1, 0] == pytest.approx(0.7310585786300049, abs=1e-12)
    assert P[0, 0, 0] == 0.5


def test_halving_tau_sharpens_positive_logits():
    r = rng(16)
    t = r.uniform(0.1, 1, size=4)
    I = r.uniform(0.1, 1, size=(3, 3, 4))
    a, b = match(Tensor(I), Tensor(t), 0.5).data, match(Tensor(I), Tensor(t), 0.25).data
    assert (a > 0.5).all() and (b > a).all()


@settings(max_examples=50)
@given(arrays(np.float64, (2, 2, 3), elements=st.floats(-0.5, 0.5)), arrays(np.float64, 3, elements=st.floats(-1, 1)))
def test_match_strictly_inside_unit_interval(I, t):
    P = match(Tensor(I), Tensor(t), 0.07).data
    assert ((P > 0) & (P < 1)).all()


def test_match_monotone_in_dot_product():
    t = np.array([1.0, 0.0])
    I = np.zeros((1, 5, 2))
    I[0, :, 0] = np.linspace(-0.2, 0.2, 5)
    P = match(Tensor(I), Tensor(t), 0.07).data.reshape(-1)
    assert (np.diff(P) > 0).all()


def test_match_rejects_non_positive_tau():
    with pytest.raises(ConfigError):
        match(Tensor(np.zeros((1, 1, 2))), Tensor(np.ones(2)), 0.0)


# ---------------------------------------------------------------- losses


def test_aux_loss_half_is_ln2():
    y = rng(17).integers(0, 2, size=(4, 4, 1)).astype(float)
    assert abs(aux_loss(Tensor(np.full((4, 4, 1), 0.5)), y).item() - 0.6931471805599453) <= 1e-12


def test_aux_loss_perfect_prediction():
    y = np.array([[[1.0], [0.0]], [[0.0], [1.0]]])
    eps = 1e-7
    assert aux_loss(Tensor(np.clip(y, eps, 1 - eps)), y).item() == pytest.approx(0.0, abs=2e-7)


def test_aux_loss_direct_formula():
    P = rng(18).uniform(0.05, 0.95, size=(2, 2, 1))
    y = np.array([[[1.0], [0.0]], [[0.0], [0.0]]])
    oracle = -math.fsum(
        y[i, j, 0] * math.log(P[i, j, 0]) + (1 - y[i, j, 0]) * math.log(1 - P[i, j, 0])
        for i in range(2) for j in range(2)
    ) / 4
    assert aux_loss(Tensor(P), y).item() == pytest.approx(oracle, abs=1e-12)


def test_aux_loss_rejects_soft_labels():
    with pytest.raises(LabelError):
        aux_loss(Tensor(np.full((1, 1, 1), 0.5)), np.full((1, 1, 1), 0.3))


def test_total_loss_cases():
    task, aux = Tensor(0.3), Tensor(0.2)
    assert total_loss(task, aux, 1.0).item() == pytest.approx(0.5, abs=1e-15)
    assert total_loss(task, aux, 0.0).item() == 0.3
    assert total_loss(task, aux, 1.0, use_aux=False) is task
