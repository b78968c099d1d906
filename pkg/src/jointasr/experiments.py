"""Toy-scale behavioral experiments: joint vs supervised-only, separate vs single optimizer."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

from .data import CorpusSpec, generate_corpus, normalize
from .model import AcousticModel, toy_preset
from .trainer import Trainer, TrainerConfig

ARMS = ("baseline", "joint", "single")


@dataclass(frozen=True)
class RegularizationSetup:
    """Corpus and trainer settings for the regularization experiment.

    SpecAugment is off: at the shared mask settings it hides about half the
    frames and slows supervised learning so much that no arm reaches the
    overfitting regime within the update budget.
    """

    num_labeled: int = 500
    num_unlabeled: int = 5000
    num_valid: int = 100
    chars: str = "abcdef"
    base_freq: float = 150.0
    freq_step: float = 50.0
    noise_sigma: float = 0.5
    token_ms: int = 24
    total_updates: int = 2000
    warmup_updates: int = 200
    lr_s: float = 3e-3
    lr_u: float = 3e-3
    train_eval_utts: int = 100

    def corpus_spec(self, n: int, seed: int, labeled: bool = True) -> CorpusSpec:
        return CorpusSpec(n, chars=self.chars, base_freq=self.base_freq, freq_step=self.freq_step,
                          noise_sigma=self.noise_sigma, token_ms=self.token_ms, seed=seed, labeled=labeled)

    def corpora(self):
        lab = generate_corpus(self.corpus_spec(self.num_labeled, 1), "L")
        unl = generate_corpus(self.corpus_spec(self.num_unlabeled, 2, labeled=False), "U")
        val = generate_corpus(self.corpus_spec(self.num_valid, 3), "V")
        return ([normalize(u) for u in lab], [normalize(u) for u in unl], [normalize(u) for u in val])

    def trainer_config(self, arm: str, seed: int) -> TrainerConfig:
        if arm not in ARMS:
            raise ValueError(f"unknown arm {arm!r}; expected one of {ARMS}")
        return TrainerConfig(total_updates=self.total_updates, warmup_updates=self.warmup_updates,
                             lr_s=self.lr_s, lr_u=self.lr_u, eval_every=self.total_updates,
                             eval_max_utts=self.num_valid, train_eval_utts=self.train_eval_utts,
                             specaugment_enabled=False, seed=seed, shared_optimizer=arm == "single")


def run_arm(setup: RegularizationSetup, arm: str, seed: int, corpora=None) -> dict:
    """Train one arm from scratch; returns final valid/train metrics and the final parameters."""
    lab, unl, val = corpora if corpora is not None else setup.corpora()
    cfg = setup.trainer_config(arm, seed)
    model = AcousticModel.create(toy_preset(), seed)
    res = Trainer(model, cfg, lab, [] if arm == "baseline" else unl, val, normalized=True).run()
    ev = res.final_eval
    return {"arm": arm, "seed": seed, "valid_cer": ev["valid"]["cer"], "valid_wer": ev["valid"]["wer"],
            "valid_loss_s": ev["valid"]["loss_s"], "train_loss_s": ev["train"]["loss_s"],
            "params": res.model.params.snapshot()}


def _run_star(args):
    setup, arm, seed = args
    return run_arm(setup, arm, seed)


def run_grid(setup: RegularizationSetup, arms=ARMS, seeds=(0, 1, 2), workers: int | None = None) -> list[dict]:
    """All (arm, seed) runs; ``workers`` defaults to the JOINTASR_THREADS environment variable."""
    jobs = [(setup, a, s) for s in seeds for a in arms]
    workers = workers or int(os.environ.get("JOINTASR_THREADS", "1"))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(_run_star, jobs))
    corpora = setup.corpora()
    return [run_arm(setup, a, s, corpora) for _, a, s in jobs]


def regularization_verdict(rows: list[dict]) -> dict:
    """Per seed: joint CER <= baseline CER, joint train loss higher, joint valid loss lower."""
    by = {(r["arm"], r["seed"]): r for r in rows}
    seeds = sorted({r["seed"] for r in rows})
    per_seed = {}
    for s in seeds:
        b, j = by[("baseline", s)], by[("joint", s)]
        per_seed[s] = (j["valid_cer"] <= b["valid_cer"] and j["train_loss_s"] > b["train_loss_s"]
                       and j["valid_loss_s"] < b["valid_loss_s"])
    return per_seed


def optimizer_verdict(rows: list[dict]) -> tuple[float, float]:
    """Median validation CER of (separate, single) optimizer joint runs."""
    import numpy as np

    sep = [r["valid_cer"] for r in rows if r["arm"] == "joint"]
    one = [r["valid_cer"] for r in rows if r["arm"] == "single"]
    return float(np.median(sep)), float(np.median(one))


def with_updates(setup: RegularizationSetup, n: int) -> RegularizationSetup:
    return replace(setup, total_updates=n, warmup_updates=max(1, n // 10))


def rebuild_model(params: dict) -> AcousticModel:
    model = AcousticModel.create(toy_preset(), 0)
    model.params.load(params)
    return model
