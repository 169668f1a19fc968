import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY, randomize_b
from flsim.errors import ConfigurationError, InputError, UsageError
from flsim.lora import LoraAdapterSet, init_adapters
from flsim.nn import (
    BOS,
    EOS,
    BaseModel,
    ModelConfig,
    OptimizerState,
    backward,
    forward_lm,
    init_base_model,
    logits_of,
    loss_next_token,
    optimizer_step,
    parameter_shapes,
)
from flsim.nn.checkpoint import dumps_model, loads_model
from flsim.errors import FormatError


# --- straight-line reference forward -----------------------------------------


def _mv(W, x):
    return [sum(W[i][j] * x[j] for j in range(len(x))) for i in range(len(W))]


def _ln(x, g, b, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + eps) * gi + bi for v, gi, bi in zip(x, g, b)]


def _gelu(v):
    return 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3)))


def reference_logits(params, cfg, tokens):
    """Per-position loops over nested lists; shares no code with flsim."""
    P = {k: v.tolist() for k, v in params.items()}
    T, d, H = len(tokens), cfg.d_model, cfg.n_heads
    hd = d // H
    xs = [[a + b for a, b in zip(P["tok_emb"][tok], P["pos_emb"][t])] for t, tok in enumerate(tokens)]
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        hs = [_ln(x, P[p + "ln1.gain"], P[p + "ln1.bias"]) for x in xs]
        q = [_mv(P[p + "attn.q"], h) for h in hs]
        k = [_mv(P[p + "attn.k"], h) for h in hs]
        v = [_mv(P[p + "attn.v"], h) for h in hs]
        att = []
        for t in range(T):
            out = [0.0] * d
            for h in range(H):
                sl = slice(h * hd, (h + 1) * hd)
                scores = [sum(a * b for a, b in zip(q[t][sl], k[s][sl])) / math.sqrt(hd) for s in range(t + 1)]
                mx = max(scores)
                e = [math.exp(s - mx) for s in scores]
                z = sum(e)
                for s in range(t + 1):
                    for j in range(hd):
                        out[h * hd + j] += e[s] / z * v[s][h * hd + j]
            att.append(out)
        xs = [[a + b for a, b in zip(x, _mv(P[p + "attn.o"], o))] for x, o in zip(xs, att)]
        hs = [_ln(x, P[p + "ln2.gain"], P[p + "ln2.bias"]) for x in xs]
        ff = [_mv(P[p + "mlp.down"], [_gelu(u) for u in _mv(P[p + "mlp.up"], h)]) for h in hs]
        xs = [[a + b for a, b in zip(x, f)] for x, f in zip(xs, ff)]
    xs = [_ln(x, P["ln_f.gain"], P["ln_f.bias"]) for x in xs]
    return np.array([_mv(P["lm_head"], x) for x in xs])


def hand_set_model(dtype=np.float64):
    cfg = ModelConfig(vocab_size=259, d_model=4, n_layers=1, n_heads=2, d_ff=8, max_seq_len=8)
    params = {}
    for n, (name, shape) in enumerate(parameter_shapes(cfg).items()):
        size = int(np.prod(shape))
        vals = np.array([math.sin(0.7 * j + 1.3 * n) for j in range(size)]).reshape(shape)
        if name.endswith("gain"):
            vals = 1.0 + 0.1 * vals
        params[name] = vals.astype(dtype)
    return BaseModel(cfg, params)


def test_forward_matches_reference_on_bos():
    model = hand_set_model()
    got = logits_of(model, None, [BOS])
    want = reference_logits(model.parameters, model.config, [BOS])
    assert np.max(np.abs(got - want)) <= 1e-6


def test_forward_matches_reference_multi_token():
    model = hand_set_model()
    toks = [BOS, 72, 105, 33, EOS]
    got = logits_of(model, None, toks)
    want = reference_logits(model.parameters, model.config, toks)
    assert np.max(np.abs(got - want)) <= 1e-6


def test_batch_rows_match_single_sequences(tiny_model):
    rng = np.random.default_rng(0)
    toks = rng.integers(0, 256, size=(3, 10))
    batched = logits_of(tiny_model, None, toks)
    for i in range(3):
        np.testing.assert_allclose(batched[i], logits_of(tiny_model, None, toks[i]), atol=1e-5)


def test_zero_b_adapters_give_bitwise_identical_logits(tiny_model, tiny_adapters):
    toks = [BOS, 10, 20, 30]
    assert np.array_equal(logits_of(tiny_model, tiny_adapters, toks), logits_of(tiny_model, None, toks))


@given(st.lists(st.integers(0, 258), min_size=1, max_size=TINY.max_seq_len))
@settings(max_examples=30, deadline=None)
def test_softmax_rows_sum_to_one(tokens):
    model = init_base_model(TINY, seed=1)
    logits = logits_of(model, None, tokens).astype(np.float64)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    assert np.all(np.isfinite(logits))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_causality(tiny_model, tiny_adapters):
    ad = randomize_b(tiny_adapters, 0)
    toks = np.array([BOS, 5, 6, 7, 8, 9, 10])
    base = logits_of(tiny_model, ad, toks)
    edited = toks.copy()
    edited[4:] = [200, 201, 202]
    other = logits_of(tiny_model, ad, edited)
    assert np.array_equal(base[:4], other[:4])
    assert not np.array_equal(base[4:], other[4:])


def test_sequence_too_long(tiny_model):
    with pytest.raises(InputError):
        forward_lm(tiny_model, None, [1] * (TINY.max_seq_len + 1))


def test_adapter_shape_mismatch_names_layer(tiny_model):
    other = init_base_model(ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=16, max_seq_len=24), 0)
    bad = init_adapters(other, 2, 0)
    with pytest.raises(ConfigurationError, match="blocks.0.attn.q"):
        forward_lm(tiny_model, bad, [BOS])


def test_model_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigurationError):
        ModelConfig(max_seq_len=1)


# --- loss --------------------------------------------------------------------


class _Logits:
    """Wrap a raw array as a tape tensor for the loss function."""

    def __new__(cls, arr):
        from flsim.nn.autodiff import GradientTape

        return GradientTape().watch("logits", arr)


def test_uniform_logits_loss_is_log_vocab():
    V = 259
    logits = _Logits(np.zeros((5, V)))
    toks = np.array([BOS, 1, 2, 3, EOS])
    mask = np.array([False, False, True, True, True])
    assert abs(float(loss_next_token(logits, toks, mask).data) - math.log(V)) <= 1e-6


def test_confident_correct_logits_loss_near_zero():
    toks = np.array([BOS, 65, 66, EOS])
    arr = np.zeros((4, 259))
    for t in range(3):
        arr[t, toks[t + 1]] = 50.0
    loss = loss_next_token(_Logits(arr), toks, np.array([False, True, True, True]))
    assert float(loss.data) < 1e-3


def test_two_token_loss_matches_hand_sum():
    rng = np.random.default_rng(4)
    arr = rng.normal(size=(3, 259))
    toks = np.array([BOS, 70, 80])
    mask = np.array([False, True, True])
    expect = 0.0
    for t in (0, 1):
        row = arr[t].tolist()
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        expect += -(row[toks[t + 1]] - lse)
    expect /= 2
    assert abs(float(loss_next_token(_Logits(arr), toks, mask).data) - expect) <= 1e-12


def test_empty_mask_is_an_error():
    with pytest.raises(InputError):
        loss_next_token(_Logits(np.zeros((3, 259))), np.array([BOS, 1, 2]), np.zeros(3, bool))
    with pytest.raises(InputError):  # position 0 can never be a target
        loss_next_token(_Logits(np.zeros((3, 259))), np.array([BOS, 1, 2]), np.array([True, False, False]))


# --- gradients ---------------------------------------------------------------


def _loss64(model, adapters, toks, mask):
    logits, _ = forward_lm(model, adapters, toks, train_adapters=False)
    return float(loss_next_token(logits, toks, mask).data)


def test_finite_difference_gradients(tiny_model64):
    ad = randomize_b(init_adapters(tiny_model64, 2, 11), 12)
    toks = np.array([BOS, 3, 99, 41, 7, 250, EOS])
    mask = np.array([0, 0, 0, 1, 1, 1, 1], bool)
    logits, tape = forward_lm(tiny_model64, ad, toks)
    loss_next_token(logits, toks, mask)
    grads = backward(tape)
    flat = ad.flat_params()
    eps = 1e-4
    worst = 0.0
    for key, arr in flat.items():
        for idx in np.ndindex(arr.shape):
            plus = {k: v.copy() for k, v in flat.items()}
            minus = {k: v.copy() for k, v in flat.items()}
            plus[key][idx] += eps
            minus[key][idx] -= eps
            num = (_loss64(tiny_model64, ad.with_flat_params(plus), toks, mask)
                   - _loss64(tiny_model64, ad.with_flat_params(minus), toks, mask)) / (2 * eps)
            worst = max(worst, abs(grads[key][idx] - num) / max(1.0, abs(num)))
    assert worst <= 1e-4


def test_zero_b_gives_zero_a_gradient(tiny_model, tiny_adapters):
    toks = np.array([BOS, 1, 2, 3])
    logits, tape = forward_lm(tiny_model, tiny_adapters, toks)
    loss_next_token(logits, toks, [0, 1, 1, 1])
    grads = backward(tape)
    for name in tiny_adapters:
        assert not np.any(grads[name + ".A"])
    assert any(np.any(grads[n + ".B"]) for n in tiny_adapters)


def test_gradient_map_has_only_adapter_keys(tiny_model, tiny_adapters):
    toks = np.array([BOS, 1, 2, 3])
    logits, tape = forward_lm(tiny_model, tiny_adapters, toks)
    loss_next_token(logits, toks, [0, 1, 1, 1])
    grads = backward(tape)
    assert set(grads) == set(tiny_adapters.flat_params())
    assert not set(grads) & set(tiny_model.parameters)
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_double_backward_raises(tiny_model, tiny_adapters):
    toks = np.array([BOS, 1, 2])
    logits, tape = forward_lm(tiny_model, tiny_adapters, toks)
    loss_next_token(logits, toks, [0, 1, 1])
    backward(tape)
    with pytest.raises(UsageError):
        backward(tape)


def test_base_parameters_are_read_only(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.parameters["lm_head"][0, 0] = 1.0


# --- optimizers --------------------------------------------------------------


def test_sgd_step():
    state = OptimizerState(kind="sgd", learning_rate=0.1)
    out = optimizer_step(state, {"w": np.array([1.0])}, {"w": np.array([2.0])})
    assert out["w"][0] == pytest.approx(0.8, abs=1e-15)
    assert state.step == 1
    assert state.m == {} and state.v == {}


@pytest.mark.parametrize("g", [2.0, -0.003, 1e3])
def test_adam_first_step_matches_scalar_oracle(g):
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    expect = 1.0 - lr * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + eps)
    state = OptimizerState(kind="adam", learning_rate=lr)
    out = optimizer_step(state, {"w": np.array([1.0])}, {"w": np.array([g])})
    assert out["w"][0] == pytest.approx(expect, rel=1e-12)
    assert abs(1.0 - out["w"][0]) == pytest.approx(lr, rel=1e-4)
    assert set(state.m) == {"w"} and state.m["w"].shape == (1,)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_leaves_params(kind):
    p = {"w": np.array([[1.5, -2.0]], dtype=np.float32)}
    out = optimizer_step(OptimizerState(kind=kind, learning_rate=0.5), p, {"w": np.zeros((1, 2), np.float32)})
    assert np.array_equal(out["w"], p["w"])


def test_optimizer_shape_mismatch():
    with pytest.raises(ConfigurationError):
        optimizer_step(OptimizerState(), {"w": np.zeros(2)}, {"w": np.zeros(3)})
    with pytest.raises(ConfigurationError):
        OptimizerState(kind="rmsprop")


# --- determinism, freezing, checkpoints --------------------------------------


def _train_steps(model, seed, steps=3):
    ad = init_adapters(model, 2, seed)
    state = OptimizerState(kind="adam", learning_rate=1e-2)
    params = ad.flat_params()
    toks = np.array([[BOS, 1, 2, 3, 4, EOS], [BOS, 9, 8, 7, 6, EOS]])
    mask = np.array([[0, 0, 0, 1, 1, 1]] * 2, bool)
    losses = []
    for _ in range(steps):
        logits, tape = forward_lm(model, ad.with_flat_params(params), toks)
        losses.append(float(loss_next_token(logits, toks, mask).data))
        params = optimizer_step(state, params, backward(tape))
    return losses


def test_training_is_deterministic_and_keeps_base_frozen(tiny_model):
    before = tiny_model.fingerprint()
    a = _train_steps(tiny_model, 0)
    b = _train_steps(tiny_model, 0)
    assert a == b
    assert a[-1] < a[0]
    assert tiny_model.fingerprint() == before


def test_checkpoint_round_trip(tiny_model):
    blob = dumps_model(tiny_model)
    assert blob[:6] == b"FLSIM1"
    again = loads_model(blob)
    assert again.config == tiny_model.config
    assert again.fingerprint() == tiny_model.fingerprint()
    assert list(again.parameters) == list(tiny_model.parameters)
    with pytest.raises(FormatError):
        loads_model(blob[:-3])
    with pytest.raises(FormatError):
        loads_model(b"XXXXXX" + blob[6:])
