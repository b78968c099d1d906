import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointasr.model import AcousticModel, tiny_preset
from jointasr.optim import (WARMUP_CONSTANT, WARMUP_DECAY, AdamState, LrSchedule, MissingGradError, adam_step,
                            lr_at, scale_encoder_grads)
from jointasr.tensor import Tensor


def params(**arrays):
    return {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for k, v in arrays.items()}


def test_first_step_closed_form():
    p = params(w=[0.5, -1.0, 2.0])
    g = np.array([0.3, -2.0, 1e-3])
    p["w"].grad = g.copy()
    st_ = AdamState(weight_decay=0.0)
    lr = 0.01
    adam_step(p, st_, lr)
    # bias correction makes m_hat = g, v_hat = g^2
    for i, (w0, gi) in enumerate(zip([0.5, -1.0, 2.0], g)):
        assert p["w"].data[i] == pytest.approx(w0 - lr * gi / (abs(gi) + 1e-6), abs=1e-15)


def test_first_step_with_decoupled_decay():
    p = params(w=[2.0])
    p["w"].grad = np.array([1.0])
    adam_step(p, AdamState(weight_decay=0.01), 0.1)
    expect = 2.0 - 0.1 * 0.01 * 2.0 - 0.1 * 1.0 / (1.0 + 1e-6)
    assert p["w"].data[0] == pytest.approx(expect, abs=1e-15)


def test_zero_grad_no_decay_is_noop():
    p = params(w=[1.0, 2.0])
    p["w"].grad = np.zeros(2)
    adam_step(p, AdamState(weight_decay=0.0), 0.1)
    assert np.array_equal(p["w"].data, [1.0, 2.0])


def test_two_steps_reduce_quadratic():
    p = params(w=[3.0, -2.0])
    st_ = AdamState()
    losses = []
    for _ in range(3):
        w = p["w"].data
        losses.append(float(np.sum(w ** 2)))
        p["w"].grad = 2 * w
        adam_step(p, st_, 0.1)
    assert losses[2] < losses[1] < losses[0]


def test_missing_grad_raises():
    with pytest.raises(MissingGradError):
        adam_step(params(w=[1.0]), AdamState(), 0.1)


def test_digest_tracks_state():
    a = AdamState()
    d0 = a.digest()
    p = params(w=[1.0])
    p["w"].grad = np.array([1.0])
    adam_step(p, a, 0.1)
    assert a.digest() != d0
    assert a.copy().digest() == a.digest()


# -- schedules --------------------------------------------------------------


def test_full_scale_schedule_endpoints():
    eta = 5e-4
    s = LrSchedule(eta, 20_000, 500_000, WARMUP_DECAY, 0.1)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 20_000) == eta
    assert lr_at(s, 500_000) == 0.1 * eta
    assert lr_at(s, 10_000) == pytest.approx(eta / 2)
    assert lr_at(s, 260_000) == pytest.approx(0.55 * eta)


def test_constant_schedule_after_warmup():
    s = LrSchedule(1e-3, 100, 1000, WARMUP_CONSTANT)
    assert lr_at(s, 0) == 0.0
    assert all(lr_at(s, t) == 1e-3 for t in range(100, 1001, 50))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 50), st.integers(1, 200), st.integers(0, 300))
def test_decay_schedule_bounded_and_clamped(w, extra, t):
    s = LrSchedule(1.0, w, w + extra)
    v = lr_at(s, t)
    assert 0.0 <= v <= 1.0
    if t >= w + extra:
        assert v == 0.1


def test_schedule_rejects_negative_step_and_kind():
    with pytest.raises(ValueError):
        lr_at(LrSchedule(1.0, 1, 2), -1)
    with pytest.raises(ValueError):
        LrSchedule(1.0, 1, 2, kind="cosine")


# -- encoder gradient scaling ----------------------------------------------


@pytest.mark.parametrize("factor", [1.0, 0.0, 0.1])
def test_scale_encoder_grads(factor):
    m = AcousticModel.create(tiny_preset(), 0)
    rng = np.random.default_rng(0)
    for _, t in m.params.items():
        t.grad = rng.normal(size=t.shape)
    before = {n: t.grad.copy() for n, t in m.params.items()}
    scale_encoder_grads(m.params, factor)
    enc = set(m.params.encoder_names())
    assert enc and all(n.startswith("encoder.") for n in enc)
    for n, t in m.params.items():
        if n in enc:
            assert np.linalg.norm(t.grad) == pytest.approx(factor * np.linalg.norm(before[n]), rel=1e-15)
        else:
            assert np.array_equal(t.grad, before[n])
