import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointasr import tensor as T
from jointasr.losses import (POOL_NON_MASKED, AlignmentInfeasibleError, ContrastiveConfig, NoNegativesError,
                             OracleSizeError, contrastive_loss, contrastive_reference, ctc_bruteforce, ctc_loss,
                             min_frames, sample_negatives)
from jointasr.model import plan_from_starts
from jointasr.tensor import Tensor


def log_softmax_np(x):
    m = x.max(-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(-1, keepdims=True))


# -- negatives --------------------------------------------------------------


def test_negatives_exhaust_pool_without_replacement():
    plan = plan_from_starts(6, [0], 1)
    cfg = ContrastiveConfig(num_negatives=5)
    negs = sample_negatives(plan, 6, 2, cfg, np.random.default_rng(0))
    assert sorted(negs.tolist()) == [0, 1, 3, 4, 5]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(1, 8), st.integers(0, 10 ** 6), st.data())
def test_anchor_never_its_own_negative(f, k, seed, data):
    anchor = data.draw(st.integers(0, f - 1))
    plan = plan_from_starts(f, [anchor], 1)
    negs = sample_negatives(plan, f, anchor, ContrastiveConfig(num_negatives=k), np.random.default_rng(seed))
    assert anchor not in negs.tolist()
    assert len(negs) == k


def test_negative_histogram_uniform():
    # multinomial oracle: each of 9 pool frames expected n*K/9 times
    f, anchor, k, n = 10, 4, 3, 33_334
    plan = plan_from_starts(f, [anchor], 1)
    rng = np.random.default_rng(1)
    cfg = ContrastiveConfig(num_negatives=k)
    counts = np.zeros(f)
    for _ in range(n):
        np.add.at(counts, sample_negatives(plan, f, anchor, cfg, rng), 1)
    assert counts[anchor] == 0
    draws = n * k
    p = 1 / 9
    mean, sd = draws * p, math.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(np.delete(counts, anchor) - mean) < 3 * sd)


def test_non_masked_pool_excludes_masked_and_falls_back():
    plan = plan_from_starts(8, [0], 4)  # frames 0..3 masked
    cfg = ContrastiveConfig(num_negatives=4, negative_pool=POOL_NON_MASKED)
    negs = sample_negatives(plan, 8, 1, cfg, np.random.default_rng(0))
    assert sorted(negs.tolist()) == [4, 5, 6, 7]
    full = plan_from_starts(3, [0], 3)
    negs = sample_negatives(full, 3, 0, ContrastiveConfig(num_negatives=2, negative_pool=POOL_NON_MASKED),
                            np.random.default_rng(0))
    assert sorted(negs.tolist()) == [1, 2]


def test_single_frame_has_no_negatives():
    with pytest.raises(NoNegativesError):
        sample_negatives(plan_from_starts(1, [0], 1), 1, 0, ContrastiveConfig(), np.random.default_rng(0))


@pytest.mark.parametrize("kw", [dict(temperature=0.0), dict(num_negatives=0), dict(negative_pool="nope")])
def test_contrastive_config_validation(kw):
    with pytest.raises(ValueError):
        ContrastiveConfig(**kw)


# -- contrastive loss -------------------------------------------------------


def test_orthogonal_negatives_value():
    # anchor == positive, two negatives orthogonal to it
    z = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    plan = plan_from_starts(3, [0], 1)
    cfg = ContrastiveConfig(temperature=0.1, num_negatives=2)
    got = contrastive_loss(Tensor(z), Tensor(z), plan, cfg, np.random.default_rng(0)).item()
    assert got == pytest.approx(math.log1p(2 * math.exp(-10)), rel=1e-12)
    assert got == pytest.approx(9.0799e-5, rel=1e-4)


@pytest.mark.parametrize("tau", [0.05, 0.1, 1.0, 7.0])
def test_equal_cosines_give_log2_for_any_tau(tau):
    # positive and the single negative make the same angle with the anchor
    z = np.array([[1.0, 1.0], [1.0, -1.0]])
    ctx = np.array([[1.0, 0.0], [0.0, 0.0]])
    plan = plan_from_starts(2, [0], 1)
    cfg = ContrastiveConfig(temperature=tau, num_negatives=1)
    got = contrastive_loss(Tensor(z), Tensor(ctx), plan, cfg, np.random.default_rng(0)).item()
    assert got == pytest.approx(math.log(2), abs=1e-14)


def test_temperature_inside_exponent():
    # a prefactor 1/tau would cancel; inside the exponent it sharpens the loss
    z = np.array([[1.0, 0.0], [0.6, 0.8]])
    plan = plan_from_starts(2, [0], 1)
    vals = [contrastive_loss(Tensor(z), Tensor(z), plan, ContrastiveConfig(t, 1), np.random.default_rng(0)).item()
            for t in (1.0, 0.1)]
    assert vals[0] == pytest.approx(math.log1p(math.exp(0.6 - 1.0)), rel=1e-12)
    assert vals[1] == pytest.approx(math.log1p(math.exp((0.6 - 1.0) / 0.1)), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_contrastive_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    z, ctx = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    plan = plan_from_starts(6, [1, 4], 1)
    cfg = ContrastiveConfig(0.3, 3)
    got = contrastive_loss(Tensor(z), Tensor(ctx), plan, cfg, np.random.default_rng(seed)).item()
    ref = contrastive_reference(z, ctx, plan, cfg, np.random.default_rng(seed))
    assert abs(got - ref) < 1e-10


def test_contrastive_grads_reach_both_inputs():
    rng = np.random.default_rng(0)
    z = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    ctx = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    contrastive_loss(z, ctx, plan_from_starts(5, [2], 1), ContrastiveConfig(0.5, 2), rng).backward()
    assert np.abs(z.grad).sum() > 0 and np.abs(ctx.grad[2]).sum() > 0
    assert np.all(ctx.grad[[0, 1, 3, 4]] == 0)


# -- CTC --------------------------------------------------------------------


def test_ctc_single_frame():
    lp = log_softmax_np(np.random.default_rng(0).normal(size=(1, 3)))
    assert ctc_loss(Tensor(lp), [1], 2).item() == pytest.approx(-lp[0, 1], abs=1e-15)


def test_ctc_uniform_two_frames_is_log3():
    lp = np.log(np.full((2, 3), 1 / 3))
    assert ctc_loss(Tensor(lp), [0], 2).item() == pytest.approx(math.log(3), abs=1e-12)
    assert ctc_bruteforce(lp, [0], 2) == pytest.approx(math.log(3), abs=1e-12)
    assert math.log(3) == pytest.approx(1.0986, abs=1e-4)


def test_ctc_repeat_needs_blank():
    # F=3, "aa": the only valid path is a-blank-a
    lp = log_softmax_np(np.random.default_rng(1).normal(size=(3, 3)))
    expect = -(lp[0, 0] + lp[1, 2] + lp[2, 0])
    assert ctc_loss(Tensor(lp), [0, 0], 2).item() == pytest.approx(expect, abs=1e-12)
    assert ctc_bruteforce(lp, [0, 0], 2) == pytest.approx(expect, abs=1e-12)


@pytest.mark.parametrize("tokens,expect", [([0], 1), ([0, 0], 3), ([0, 1], 2), ([1, 1, 1], 5), ([], 0)])
def test_min_frames(tokens, expect):
    assert min_frames(tokens) == expect


def test_ctc_infeasible():
    lp = np.log(np.full((2, 3), 1 / 3))
    with pytest.raises(AlignmentInfeasibleError):
        ctc_loss(Tensor(lp), [0, 0], 2)
    assert ctc_bruteforce(lp, [0, 0], 2) == math.inf


def test_bruteforce_size_limit():
    with pytest.raises(OracleSizeError):
        ctc_bruteforce(np.zeros((12, 5)), [0], 4)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(2, 4), st.integers(0, 10 ** 6), st.data())
def test_ctc_matches_bruteforce_property(f, v, seed, data):
    rng = np.random.default_rng(seed)
    blank = v - 1
    y = data.draw(st.lists(st.integers(0, v - 2), min_size=1, max_size=3))
    lp = log_softmax_np(rng.normal(size=(f, v)) * 2)
    brute = ctc_bruteforce(lp, y, blank)
    if brute == math.inf:
        with pytest.raises(AlignmentInfeasibleError):
            ctc_loss(Tensor(lp), y, blank)
    else:
        assert abs(ctc_loss(Tensor(lp), y, blank).item() - brute) < 1e-9


def test_ctc_grad_is_negative_occupancy():
    # gradient rows sum to -1: each frame emits exactly one label along every path
    lp = Tensor(log_softmax_np(np.random.default_rng(2).normal(size=(6, 4))), requires_grad=True)
    ctc_loss(lp, [0, 1], 3).backward()
    assert np.allclose(lp.grad.sum(-1), -1.0, atol=1e-12)
    assert np.all(lp.grad <= 1e-15)


def test_ctc_through_log_softmax_grad():
    from jointasr.gradcheck import COMPOSITE_TOL, check_fn

    x = np.random.default_rng(3).normal(size=(5, 4))
    res = check_fn("ctc", lambda a: ctc_loss(T.log_softmax(a[0]), [2, 0], 3), [x], COMPOSITE_TOL)
    assert res.passed, res
