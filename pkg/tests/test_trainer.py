import json
import math

import numpy as np
import pytest
from conftest import fast_cfg, params_equal, tiny_model
from hypothesis import given, settings
from hypothesis import strategies as st

from jointasr.data import CorpusSpec, generate_corpus
from jointasr.model import AcousticModel, toy_preset
from jointasr.trainer import (ABLATION_GRID, SweepCell, Trainer, TrainerConfig, format_table, hyperparam_sweep,
                              phase_counts, run_cell, train, trace_is_valid)


@pytest.mark.parametrize("kw", [dict(update_ratio=0), dict(total_updates=0), dict(lr_s=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainerConfig(**kw)


@settings(max_examples=60)
@given(st.integers(0, 500), st.integers(1, 7))
def test_phase_counts_match_pattern(total, n):
    trace = (("U" * n + "S") * (total // (n + 1) + 1))[:total]
    assert phase_counts(total, n, True) == (trace.count("U"), trace.count("S"))
    assert phase_counts(total, n, False) == (0, total)


@pytest.mark.parametrize("trace,n,ok", [("USUS", 1, True), ("UUS", 1, False), ("UUUUUSUU", 5, True),
                                        ("SU", 1, False), ("", 3, True)])
def test_trace_validator(trace, n, ok):
    assert trace_is_valid(trace, n) is ok


# -- single steps -----------------------------------------------------------


def test_unsup_step_moves_mask_embedding_only_touches_u_state(corpora):
    lab, unl, _ = corpora
    tr = Trainer(tiny_model(), fast_cfg(), lab, unl, normalized=True)
    before = tr.model.params["mask_embedding"].data.copy()
    s_digest = tr.state.opt_s.digest()
    tr.unsup_step(unl[:2])
    assert not np.array_equal(before, tr.model.params["mask_embedding"].data)
    assert tr.state.opt_s.digest() == s_digest
    assert tr.state.opt_u.step == 1


def test_sup_step_reaches_classifier(corpora):
    lab, unl, _ = corpora
    tr = Trainer(tiny_model(), fast_cfg(), lab, unl, normalized=True)
    u_digest = tr.state.opt_u.digest()
    tr.sup_step(lab[:2])
    assert np.abs(tr.model.params["classifier.weight"].grad).sum() > 0
    assert tr.state.opt_u.digest() == u_digest


def test_step_loss_reproducible(corpora):
    lab, unl, _ = corpora
    vals = []
    for _ in range(2):
        tr = Trainer(tiny_model(), fast_cfg(), lab, unl, normalized=True)
        vals.append((tr.unsup_step(unl[:3]), tr.sup_step(lab[:3])))
    assert vals[0] == vals[1]


def test_augmentation_rng_gated_by_warmup(corpora):
    lab, _, _ = corpora
    tr = Trainer(tiny_model(), fast_cfg(warmup_updates=3), lab, normalized=True)
    aug = tr.state.rngs["augment"]
    start = json.dumps(aug.bit_generator.state)
    for _ in range(3):
        tr.sup_step(lab[:2])
    assert json.dumps(aug.bit_generator.state) == start
    tr.sup_step(lab[:2])
    assert json.dumps(aug.bit_generator.state) != start


def test_specaugment_disabled_never_consumes(corpora):
    lab, _, _ = corpora
    tr = Trainer(tiny_model(), fast_cfg(warmup_updates=0, specaugment_enabled=False), lab, normalized=True)
    start = json.dumps(tr.state.rngs["augment"].bit_generator.state)
    tr.sup_step(lab[:2])
    assert json.dumps(tr.state.rngs["augment"].bit_generator.state) == start


def test_memorization_corpus():
    spec = CorpusSpec(10, chars="abcd", token_ms=40, words_per_utt=(1, 2), word_len=(2, 3), noise_sigma=0.0,
                      base_freq=150, seed=4)
    lab = generate_corpus(spec)
    model = AcousticModel.create(toy_preset(dropout_p=0.0, layer_drop_p=0.0), 0)
    cfg = TrainerConfig(total_updates=200, warmup_updates=20, lr_s=3e-3, eval_every=0, specaugment_enabled=False,
                        sup_batch_seconds=10.0, train_eval_utts=0)
    tr = Trainer(model, cfg, lab)
    res = tr.run()
    losses = [r["loss"] for r in res.metrics if r.get("phase") == "S"]
    final = tr.evaluate_split(tr.labeled, False, 10)["loss_s"]
    assert losses[-1] < losses[0]
    assert final < 0.1


# -- loop -------------------------------------------------------------------


@pytest.mark.parametrize("n", [1, 2, 5])
def test_trace_pattern(corpora, n):
    lab, unl, _ = corpora
    res = Trainer(tiny_model(), fast_cfg(update_ratio=n, total_updates=36), lab, unl, normalized=True).run()
    assert res.state.trace_str() == (("U" * n + "S") * 36)[:36]
    assert (res.state.unsup_steps, res.state.sup_steps) == phase_counts(36, n, True)


def test_empty_unlabeled_is_supervised_only(corpora):
    lab, _, _ = corpora
    cfg = fast_cfg(total_updates=10)
    a = train(cfg, lab, [], tiny_model())
    b = Trainer(tiny_model(), cfg, lab).run()
    assert a.state.trace_str() == "S" * 10
    assert params_equal(a.model.params.snapshot(), b.model.params.snapshot())


def test_shared_optimizer_is_one_state(corpora):
    lab, unl, _ = corpora
    tr = Trainer(tiny_model(), fast_cfg(shared_optimizer=True, total_updates=6), lab, unl, normalized=True)
    tr.run()
    assert tr.state.opt_u is tr.state.opt_s and tr.state.opt_u.step == 6


def test_lr_logged_per_optimizer(corpora):
    lab, unl, _ = corpora
    cfg = fast_cfg(total_updates=20, warmup_updates=4, lr_u=1e-2, lr_s=1e-3)
    res = Trainer(tiny_model(), cfg, lab, unl, normalized=True).run()
    u = [r["lr"] for r in res.metrics if r.get("phase") == "U"]
    s = [r["lr"] for r in res.metrics if r.get("phase") == "S"]
    assert u[0] == pytest.approx(1e-2 / 4) and u[3] == pytest.approx(1e-2)
    assert u[-1] == pytest.approx(1e-3)
    assert s[3:] == [1e-3] * (len(s) - 3)


def test_eval_records_both_splits(corpora):
    lab, unl, val = corpora
    cfg = fast_cfg(total_updates=10, eval_every=5, train_eval_utts=4)
    res = Trainer(tiny_model(), cfg, lab, unl, val, normalized=True).run()
    evals = [r for r in res.metrics if "split" in r]
    assert [(r["step"], r["split"]) for r in evals] == [(5, "valid"), (5, "train"), (10, "valid"), (10, "train")]
    assert all(math.isfinite(r["loss_u"]) and math.isfinite(r["loss_s"]) for r in evals)
    assert 0 <= evals[0]["cer"]


def test_early_stopping(corpora):
    lab, _, val = corpora
    cfg = fast_cfg(total_updates=400, eval_every=2, patience=2, lr_s=1e-9)
    res = Trainer(tiny_model(), cfg, lab, [], val, normalized=True).run()
    assert res.state.stop_reason == "early_stop"
    assert res.state.global_step < 400
    assert res.best_params is not None


def test_run_dir_artifacts(corpora, tmp_path):
    lab, unl, val = corpora
    cfg = fast_cfg(total_updates=6, eval_every=3)
    Trainer(tiny_model(), cfg, lab, unl, val, run_dir=tmp_path, normalized=True).run()
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 6 + 2
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()


# -- checkpoint/resume -------------------------------------------------------


def test_resume_matches_uninterrupted(corpora, tmp_path):
    lab, unl, val = corpora
    cfg = fast_cfg(total_updates=24, eval_every=8, update_ratio=2)
    full = Trainer(tiny_model(), cfg, lab, unl, val, normalized=True).run()

    first = Trainer(tiny_model(), cfg, lab, unl, val, normalized=True)
    first.run(until=13)
    first.save(tmp_path / "mid.ckpt")
    second = Trainer(tiny_model(99), cfg, lab, unl, val, normalized=True)
    second.restore(tmp_path / "mid.ckpt")
    res = second.run()
    assert params_equal(full.model.params.snapshot(), res.model.params.snapshot())
    assert res.state.trace_str() == full.state.trace_str()
    assert res.state.opt_u.digest() == full.state.opt_u.digest()
    assert res.state.opt_s.digest() == full.state.opt_s.digest()


def test_restore_rejects_other_config(corpora, tmp_path):
    from jointasr.checkpoint import CheckpointError

    lab, _, _ = corpora
    a = Trainer(tiny_model(), fast_cfg(), lab, normalized=True)
    a.save(tmp_path / "a.ckpt")
    b = Trainer(tiny_model(), fast_cfg(lr_s=5e-3), lab, normalized=True)
    with pytest.raises(CheckpointError):
        b.restore(tmp_path / "a.ckpt")


# -- sweeps -----------------------------------------------------------------


def test_single_cell_sweep_equals_plain_train(corpora):
    lab, unl, val = corpora
    base = fast_cfg(total_updates=8, eval_every=8)
    cell = SweepCell("only", 1, 2.0, False)
    rows = hyperparam_sweep([cell], base, tiny_model().cfg, lab, unl, val)
    from dataclasses import replace

    plain = Trainer(tiny_model(), replace(base, lr_u=2 * base.lr_s), lab, unl, val).run()
    assert len(rows) == 1
    assert params_equal(rows[0]["params"], plain.model.params.snapshot())


def test_ablation_table_layout(corpora):
    lab, unl, val = corpora
    base = fast_cfg(total_updates=4, eval_every=4)
    rows = [run_cell(c, base, tiny_model().cfg, lab, unl, val) for c in ABLATION_GRID]
    table = format_table(rows)
    lines = table.strip().split("\n")
    assert len(lines) == 1 + len(ABLATION_GRID)
    assert lines[2].split("\t")[1] == "5:1"
    assert lines[3].split("\t")[2] == "4:1"
    assert lines[4].split("\t")[3] == "single"
