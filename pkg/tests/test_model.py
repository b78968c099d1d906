import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointasr import tensor as T
from jointasr.data import Utterance, normalize
from jointasr.gradcheck import ELEMENTARY_TOL, model_suites, numeric_grad, rel_err
from jointasr.model import (AcousticModel, MaskPlan, ModelConfig, ModelParams, count_params, param_shapes,
                            paper_preset, plan_from_starts, sample_mask_plan, tiny_preset, toy_preset)
from jointasr.tensor import Tensor


@pytest.fixture(scope="module")
def toy():
    return AcousticModel.create(toy_preset(dropout_p=0.0, layer_drop_p=0.0), 0)


def audio(n, seed=0):
    return np.random.default_rng(seed).normal(size=n)


# -- config -----------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(ctx_heads=3), dict(pos_conv_groups=5), dict(dropout_p=1.0),
                                dict(mask_start_p=-0.1), dict(mask_span_M=0), dict(conv_strides=(2,)),
                                dict(conv_kernels=(0, 3))])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_layer_drop_one_allowed():
    assert ModelConfig(layer_drop_p=1.0).layer_drop_p == 1.0


def test_frame_counts():
    # 16000 -> 3199 -> 1599 -> 799 -> 399 -> 199 -> 99 -> 49
    assert paper_preset().num_frames(16000) == 49
    assert paper_preset().frame_stride == 320
    assert paper_preset().receptive_field == 400
    assert toy_preset().num_frames(20) == 4
    assert toy_preset().receptive_field == 8


def test_paper_preset_shapes():
    shapes = param_shapes(paper_preset())
    assert shapes["encoder.conv0.weight"] == (512, 1, 10)
    assert shapes["encoder.proj.weight"] == (512, 768)
    assert shapes["context.pos_conv.weight"] == (768, 48, 128)
    assert shapes["context.layer11.ffn1.weight"] == (768, 3072)
    assert shapes["classifier.weight"] == (768, 29)
    assert "context.layer12.ffn1.weight" not in shapes
    assert count_params(paper_preset()) > 90_000_000


def test_tiny_preset_is_small():
    assert count_params(tiny_preset()) <= 5000


def test_params_load_rejects_bad_shape():
    m = AcousticModel.create(tiny_preset(), 0)
    snap = m.params.snapshot()
    snap["mask_embedding"] = np.zeros(3)
    with pytest.raises(ValueError):
        m.params.load(snap)


# -- encoder ----------------------------------------------------------------


def test_encode_shape(toy):
    z = toy.encode(audio(400))
    assert z.shape == (toy_preset().num_frames(400), 64)


def test_too_short_input(toy):
    with pytest.raises(T.InputTooShortError):
        toy.encode(audio(7))


def test_amplitude_invariance_after_normalization(toy):
    x = audio(200, 1)
    a = normalize(Utterance("a", x, 1000)).samples
    b = normalize(Utterance("b", 2.0 * x, 1000)).samples
    assert np.allclose(toy.encode(a).data, toy.encode(b).data, atol=1e-12)


# -- masking ----------------------------------------------------------------


def test_mask_p0_forces_one_span():
    cfg = toy_preset()
    for seed in range(20):
        plan = sample_mask_plan(50, cfg, np.random.default_rng(seed), start_p=0.0)
        assert len(plan.starts) == 1
        s = plan.starts[0]
        assert plan.indices == tuple(range(s, min(s + 10, 50)))


def test_mask_saturation():
    plan = sample_mask_plan(30, toy_preset(mask_start_p=0.999999, mask_span_M=1), np.random.default_rng(0))
    assert plan.indices == tuple(range(30))


def test_mask_plan_validation():
    with pytest.raises(ValueError):
        MaskPlan(5, (3, 1), ())
    with pytest.raises(ValueError):
        MaskPlan(5, (5,), ())


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.floats(0, 0.9), st.integers(1, 12), st.integers(0, 10 ** 6))
def test_mask_plan_is_union_of_spans(f, p, m, seed):
    plan = sample_mask_plan(f, toy_preset(), np.random.default_rng(seed), start_p=p, span=m)
    cover = set()
    for s in plan.starts:
        cover.update(range(s, min(s + m, f)))
    assert set(plan.indices) == cover and len(plan) >= 1


def test_apply_mask_rows(toy):
    z = toy.encode(audio(300))
    plan = plan_from_starts(z.shape[0], [2, 20], 5)
    out = toy.apply_mask(z, plan).data
    emb = toy.params["mask_embedding"].data
    keep = [i for i in range(z.shape[0]) if i not in plan.indices]
    assert np.array_equal(out[keep], z.data[keep])
    assert np.all(out[list(plan.indices)] == emb)
    assert toy.apply_mask(z, MaskPlan(z.shape[0], (), ())) is z
    full = toy.apply_mask(z, plan_from_starts(z.shape[0], [0], z.shape[0])).data
    assert np.all(full == emb)


# -- context network --------------------------------------------------------


def test_eval_deterministic_and_attention_normalized(toy):
    z = toy.encode(audio(300))
    trace = []
    a = toy.contextualize(z, attn_trace=trace).data
    b = toy.contextualize(z).data
    assert np.array_equal(a, b)
    assert len(trace) == 2
    for attn in trace:
        assert np.allclose(attn.sum(-1), 1.0, atol=1e-12)


def test_layer_drop_one_skips_all_layers():
    cfg = toy_preset(layer_drop_p=1.0, dropout_p=0.0)
    m = AcousticModel.create(cfg, 0)
    z = m.encode(audio(200))
    out = m.contextualize(z, True, np.random.default_rng(0), np.random.default_rng(0)).data
    p = m.params
    k = cfg.pos_conv_kernel
    pos = T.conv1d(T.transpose(z), p["context.pos_conv.weight"], p["context.pos_conv.bias"],
                   groups=cfg.pos_conv_groups, padding=k // 2).data[:, :z.shape[0]]
    x = z.data + T.gelu(Tensor(pos)).data.T
    ref = T.layer_norm(Tensor(x), p["context.final_norm.gamma"], p["context.final_norm.beta"]).data
    assert np.allclose(out, ref, atol=1e-12)


def test_positional_conv_breaks_permutation_equivariance(toy):
    z = toy.encode(audio(300)).data
    perm = np.random.default_rng(0).permutation(z.shape[0])
    a = toy.contextualize(Tensor(z)).data[perm]
    b = toy.contextualize(Tensor(z[perm])).data
    assert not np.allclose(a, b, atol=1e-6)


# -- classifier -------------------------------------------------------------


def test_classifier_rows_normalized(toy):
    lp = toy.classify(toy.contextualize(toy.encode(audio(300)))).data
    lse = np.log(np.exp(lp).sum(-1))
    assert np.all(np.abs(lse) < 1e-9)


def test_zero_classifier_is_uniform():
    m = AcousticModel.create(tiny_preset(), 0)
    m.params["classifier.weight"].data[:] = 0
    m.params["classifier.bias"].data[:] = 0
    lp = m.classify(m.contextualize(m.encode(audio(40)))).data
    assert np.allclose(lp, np.log(1 / 29), atol=1e-15)


def test_classifier_weight_grad():
    m = AcousticModel.create(tiny_preset(), 0)
    ctx = m.contextualize(m.encode(audio(40))).data
    w = np.random.default_rng(1).normal(size=(ctx.shape[0], 29))
    W = m.params["classifier.weight"]

    def f():
        return T.sum_all(T.mul(m.classify(Tensor(ctx)), Tensor(w))).item()

    m.params.clear_grad()
    T.sum_all(T.mul(m.classify(Tensor(ctx)), Tensor(w))).backward()
    idx, num = numeric_grad(f, W.data, max_entries=60, rng=np.random.default_rng(0))
    assert rel_err(W.grad.reshape(-1)[idx], num) < ELEMENTARY_TOL


@pytest.mark.parametrize("result", model_suites(0), ids=lambda r: r.name)
def test_end_to_end_loss_gradients(result):
    assert result.passed, f"{result.name}: {result.max_rel_err:.2e}"


def test_model_params_is_ordered_registry():
    m = AcousticModel.create(tiny_preset(), 0)
    assert list(m.params.names()) == list(param_shapes(tiny_preset()))
    with pytest.raises(KeyError):
        m.params.load({"nope": np.zeros(1)})


def test_model_params_reject_shared_tensor():
    t = Tensor(np.zeros(2))
    with pytest.raises(ValueError):
        ModelParams({"a": t, "b": t})
