"""Alternating minimization: N contrastive updates on unlabeled audio, then one CTC update."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import TOKENIZER, BatchPlan, BatchStream, Utterance, normalize, specaugment_mask
from .decode import greedy_decode, score_corpus
from .losses import ContrastiveConfig, NoNegativesError, contrastive_loss, ctc_loss, min_frames
from .model import AcousticModel, ModelConfig, sample_mask_plan
from .optim import WARMUP_CONSTANT, WARMUP_DECAY, AdamState, LrSchedule, adam_step, lr_at, scale_encoder_grads

log = logging.getLogger(__name__)

RNG_STREAMS = ("masking", "negatives", "layerdrop", "dropout", "augment", "data_u", "data_s")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    update_ratio: int = 1
    total_updates: int = 2000
    warmup_updates: int = 200
    lr_u: float = 2e-3
    lr_s: float = 1e-4
    lr_floor: float = 0.1
    encoder_grad_scale: float = 0.1
    eval_every: int = 500
    patience: int = 0
    seed: int = 0
    unsup_batch_seconds: float = 2.0
    sup_batch_seconds: float = 2.0
    specaugment_enabled: bool = True
    specaug_start_p: float | None = None
    specaug_span: int | None = None
    shared_optimizer: bool = False
    temperature: float = 0.1
    num_negatives: int = 20
    negative_pool: str = "other-frames"
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-6
    weight_decay: float = 0.01
    eval_max_utts: int = 200
    train_eval_utts: int = 100
    eval_seed: int = 12345

    def __post_init__(self):
        if self.update_ratio < 1:
            raise ValueError("update_ratio must be >= 1")
        if self.total_updates < 1:
            raise ValueError("total_updates must be >= 1")
        if self.lr_u <= 0 or self.lr_s <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def lr_ratio(self) -> float:
        return self.lr_u / self.lr_s

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.temperature, self.num_negatives, self.negative_pool)


def phase_counts(total: int, ratio: int, has_unlabeled: bool) -> tuple[int, int]:
    """Number of unsupervised and supervised updates among the first ``total`` of (U^N S)*."""
    if not has_unlabeled:
        return 0, total
    cycle = ratio + 1
    full, rest = divmod(total, cycle)
    return full * ratio + min(rest, ratio), full + max(0, rest - ratio)


@dataclass
class TrainState:
    global_step: int = 0
    unsup_steps: int = 0
    sup_steps: int = 0
    opt_u: AdamState = field(default_factory=AdamState)
    opt_s: AdamState = field(default_factory=AdamState)
    rngs: dict = field(default_factory=dict)
    best_wer: float = math.inf
    best_step: int = -1
    evals_since_best: int = 0
    trace: list = field(default_factory=list)
    skipped_unsup: int = 0
    skipped_sup: int = 0
    stop_reason: str = ""

    def trace_str(self) -> str:
        return "".join(self.trace)


def new_state(cfg: TrainerConfig) -> TrainState:
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(RNG_STREAMS))
    rngs = {name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, seeds)}
    opt_u = AdamState(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    opt_s = opt_u if cfg.shared_optimizer else AdamState(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    return TrainState(opt_u=opt_u, opt_s=opt_s, rngs=rngs)


def trace_is_valid(trace: str, ratio: int, has_unlabeled: bool = True) -> bool:
    """True iff ``trace`` is a prefix of (U^N S)* (or S* without unlabeled data)."""
    if not has_unlabeled:
        return set(trace) <= {"S"}
    pattern = "U" * ratio + "S"
    reps = len(trace) // len(pattern) + 1
    return (pattern * reps)[:len(trace)] == trace


@dataclass
class TrainResult:
    model: AcousticModel
    state: TrainState
    metrics: list
    best_params: dict | None = None
    final_eval: dict | None = None


class Trainer:
    def __init__(self, model: AcousticModel, cfg: TrainerConfig, labeled: Sequence[Utterance],
                 unlabeled: Sequence[Utterance] = (), valid: Sequence[Utterance] = (),
                 run_dir: str | Path | None = None, normalized: bool = False):
        if not labeled:
            raise ValueError("labeled corpus is empty")
        self.model = model
        self.cfg = cfg
        prep = (lambda c: list(c)) if normalized else (lambda c: [normalize(u) for u in c])
        self.labeled = prep(labeled)
        self.unlabeled = prep(unlabeled)
        self.valid = prep(valid)
        self.contrastive = cfg.contrastive()
        self.state = new_state(cfg)
        n_u, n_s = phase_counts(cfg.total_updates, cfg.update_ratio, bool(self.unlabeled))
        self.sched_u = LrSchedule(cfg.lr_u, cfg.warmup_updates, n_u, WARMUP_DECAY, cfg.lr_floor)
        self.sched_s = LrSchedule(cfg.lr_s, cfg.warmup_updates, n_s, WARMUP_CONSTANT)
        self.stream_s = BatchStream(self.labeled, cfg.sup_batch_seconds, self.state.rngs["data_s"])
        self.stream_u = (BatchStream(self.unlabeled, cfg.unsup_batch_seconds, self.state.rngs["data_u"])
                         if self.unlabeled else None)
        self._tokens = {u.id: TOKENIZER.encode(u.transcript) for u in self.labeled}
        self.metrics: list[dict] = []
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.best_params: dict | None = None
        self._last_good: dict | None = None
        log.info("lr ratio u:s = %.3g:1, update ratio %d:1", cfg.lr_ratio, cfg.update_ratio)

    # -- steps ---------------------------------------------------------------

    def next_phase(self) -> str:
        st = self.state
        if self.stream_u is None:
            return "S"
        return "U" if st.unsup_steps < self.cfg.update_ratio * (st.sup_steps + 1) else "S"

    def unsup_step(self, batch: Sequence[Utterance]) -> float:
        """Contrastive loss on masked encoder features, then an update with the unsupervised optimizer."""
        if not batch:
            raise ValueError("empty batch")
        st, model, rngs = self.state, self.model, self.state.rngs
        params = model.params
        params.zero_grad()
        losses = []
        for u in batch:
            if model.cfg.num_frames(u.samples.size) < 2:
                log.warning("skipping %s: too short for negatives", u.id)
                st.skipped_unsup += 1
                continue
            z = model.encode(u.samples)
            plan = sample_mask_plan(z.shape[0], model.cfg, rngs["masking"], u.id)
            z_ctx = model.contextualize(model.apply_mask(z, plan), True, rngs["layerdrop"], rngs["dropout"])
            try:
                losses.append(contrastive_loss(z, z_ctx, plan, self.contrastive, rngs["negatives"]))
            except NoNegativesError:
                st.skipped_unsup += 1
        value = self._apply(losses, st.opt_u, lr_at(self.sched_u, st.unsup_steps + 1))
        st.unsup_steps += 1
        self._record("U", value, lr_at(self.sched_u, st.unsup_steps))
        return value

    def sup_step(self, batch: Sequence[Utterance]) -> float:
        """CTC loss (with span-mask augmentation after warmup), then a supervised-optimizer update."""
        if not batch:
            raise ValueError("empty batch")
        st, model, rngs, cfg = self.state, self.model, self.state.rngs, self.cfg
        augment = cfg.specaugment_enabled and st.sup_steps >= cfg.warmup_updates
        model.params.zero_grad()
        losses = []
        for u in batch:
            tokens = self._tokens[u.id]
            if model.cfg.num_frames(u.samples.size) < min_frames(tokens):
                log.warning("skipping %s: transcript cannot align", u.id)
                st.skipped_sup += 1
                continue
            z = model.encode(u.samples)
            if augment:
                z, _ = specaugment_mask(z, model, rngs["augment"], True, cfg.specaug_start_p, cfg.specaug_span)
            z_ctx = model.contextualize(z, True, rngs["layerdrop"], rngs["dropout"])
            losses.append(ctc_loss(model.classify(z_ctx), tokens, TOKENIZER.blank))
        value = self._apply(losses, st.opt_s, lr_at(self.sched_s, st.sup_steps + 1))
        st.sup_steps += 1
        self._record("S", value, lr_at(self.sched_s, st.sup_steps))
        return value

    def _apply(self, losses: list, opt: AdamState, lr: float) -> float:
        if not losses:
            return float("nan")
        loss = T.scale(T.sum_all(T.stack_scalars(losses)), 1.0 / len(losses))
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} at update {self.state.global_step}")
        loss.backward()
        scale_encoder_grads(self.model.params, self.cfg.encoder_grad_scale)
        adam_step(self.model.params, opt, lr)
        return value

    def _record(self, phase: str, value: float, lr: float) -> None:
        st = self.state
        st.trace.append(phase)
        st.global_step += 1
        self._log({"step": st.global_step, "phase": phase, "loss": value, "lr": lr,
                   "wall_ms": (time.perf_counter() - self._t0) * 1000.0 if hasattr(self, "_t0") else 0.0})

    def _log(self, rec: dict) -> None:
        self.metrics.append(rec)
        if self.run_dir is not None:
            with open(self.run_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")

    def step(self) -> str:
        phase = self.next_phase()
        if phase == "U":
            self.unsup_step(self.stream_u.next_batch())
        else:
            self.sup_step(self.stream_s.next_batch())
        return phase

    # -- evaluation ----------------------------------------------------------

    def evaluate_split(self, corpus: Sequence[Utterance], with_decode: bool, limit: int,
                       seed_offset: int = 0) -> dict:
        """Eval-mode losses (fixed private RNG) and optional greedy-decode error rates."""
        model = self.model
        rng = np.random.default_rng(self.cfg.eval_seed + seed_offset)
        lu, ls, refs, hyps, ids = [], [], [], [], []
        for u in list(corpus)[:limit]:
            n = model.cfg.num_frames(u.samples.size)
            if n < 2:
                continue
            z = model.encode(u.samples)
            plan = sample_mask_plan(n, model.cfg, rng, u.id)
            z_ctx = model.contextualize(model.apply_mask(z, plan))
            lu.append(contrastive_loss(z, z_ctx, plan, self.contrastive, rng).item())
            if u.transcript is not None:
                lp = model.classify(model.contextualize(z))
                tokens = TOKENIZER.encode(u.transcript)
                if n >= min_frames(tokens):
                    ls.append(ctc_loss(lp, tokens, TOKENIZER.blank).item())
                if with_decode:
                    refs.append(u.transcript)
                    hyps.append(greedy_decode(lp, TOKENIZER.blank))
                    ids.append(u.id)
        out = {"loss_u": float(np.mean(lu)) if lu else float("nan"),
               "loss_s": float(np.mean(ls)) if ls else float("nan")}
        if with_decode and refs:
            _, summary = score_corpus(refs, hyps, ids)
            out["wer"], out["cer"] = summary["wer"], summary["cer"]
        return out

    def evaluate(self) -> dict:
        cfg, st = self.cfg, self.state
        result = {}
        if self.valid:
            v = self.evaluate_split(self.valid, True, cfg.eval_max_utts)
            self._log({"step": st.global_step, "split": "valid", **v})
            result["valid"] = v
        if cfg.train_eval_utts > 0:
            tr = self.evaluate_split(self.labeled, False, cfg.train_eval_utts, 1)
            if self.unlabeled:
                tr["loss_u"] = self.evaluate_split(self.unlabeled, False, cfg.train_eval_utts, 2)["loss_u"]
            self._log({"step": st.global_step, "split": "train", **tr})
            result["train"] = tr
        return result

    # -- loop ----------------------------------------------------------------

    def run(self, until: int | None = None) -> TrainResult:
        cfg, st = self.cfg, self.state
        target = cfg.total_updates if until is None else min(until, cfg.total_updates)
        self._t0 = time.perf_counter()
        final_eval = None
        while st.global_step < target and not st.stop_reason:
            try:
                self.step()
            except DivergenceError as exc:
                log.error("%s; restoring last good parameters", exc)
                if self._last_good is not None:
                    self.model.params.load(self._last_good)
                st.stop_reason = "diverged"
                break
            if cfg.eval_every and st.global_step % cfg.eval_every == 0:
                final_eval = self._periodic_eval()
        if st.global_step >= cfg.total_updates and not st.stop_reason:
            st.stop_reason = "max_updates"
            if not (cfg.eval_every and st.global_step % cfg.eval_every == 0):
                final_eval = self._periodic_eval()
        return TrainResult(self.model, st, self.metrics, self.best_params, final_eval)

    def _periodic_eval(self) -> dict:
        cfg, st = self.cfg, self.state
        res = self.evaluate()
        self._last_good = self.model.params.snapshot()
        wer = res.get("valid", {}).get("wer")
        if wer is not None:
            if wer < st.best_wer:
                st.best_wer, st.best_step, st.evals_since_best = wer, st.global_step, 0
                self.best_params = self.model.params.snapshot()
                if self.run_dir is not None:
                    self.save(self.run_dir / "best.ckpt")
            else:
                st.evals_since_best += 1
                if cfg.patience and st.evals_since_best >= cfg.patience:
                    st.stop_reason = "early_stop"
        if self.run_dir is not None:
            self.save(self.run_dir / "last.ckpt")
        return res

    # -- persistence ---------------------------------------------------------

    def config_echo(self) -> dict:
        return {"model": self.model.cfg.to_dict(), "trainer": asdict(self.cfg)}

    def save(self, path: str | Path) -> None:
        st = self.state
        arrays = {f"param/{n}": t.data for n, t in self.model.params.items()}
        opts = {"u": st.opt_u} if st.opt_u is st.opt_s else {"u": st.opt_u, "s": st.opt_s}
        for tag, opt in opts.items():
            for n in opt.m:
                arrays[f"opt_{tag}/m/{n}"] = opt.m[n]
                arrays[f"opt_{tag}/v/{n}"] = opt.v[n]
        if self.best_params is not None:
            for n, a in self.best_params.items():
                arrays[f"best/{n}"] = a
        state = {
            "global_step": st.global_step, "unsup_steps": st.unsup_steps, "sup_steps": st.sup_steps,
            "opt_steps": {tag: opt.step for tag, opt in opts.items()},
            "shared_optimizer": st.opt_u is st.opt_s,
            "rngs": {k: g.bit_generator.state for k, g in st.rngs.items()},
            "stream_s": _stream_json(self.stream_s), "stream_u": _stream_json(self.stream_u),
            "best_wer": st.best_wer if math.isfinite(st.best_wer) else None, "best_step": st.best_step,
            "evals_since_best": st.evals_since_best, "trace": st.trace_str(),
            "skipped_unsup": st.skipped_unsup, "skipped_sup": st.skipped_sup, "stop_reason": st.stop_reason,
        }
        save_checkpoint(path, self.config_echo(), arrays, state)

    def restore(self, path: str | Path) -> None:
        """Load parameters and the full train state; the config must match this trainer's."""
        _, arrays, state = load_checkpoint(path, self.config_echo())
        self.model.params.load({n[len("param/"):]: a for n, a in arrays.items() if n.startswith("param/")})
        st = self.state
        st.global_step, st.unsup_steps, st.sup_steps = state["global_step"], state["unsup_steps"], state["sup_steps"]
        opts = {"u": st.opt_u} if state["shared_optimizer"] else {"u": st.opt_u, "s": st.opt_s}
        for tag, opt in opts.items():
            opt.step = state["opt_steps"][tag]
            pre_m, pre_v = f"opt_{tag}/m/", f"opt_{tag}/v/"
            opt.m = {n[len(pre_m):]: a.copy() for n, a in arrays.items() if n.startswith(pre_m)}
            opt.v = {n[len(pre_v):]: a.copy() for n, a in arrays.items() if n.startswith(pre_v)}
        for k, s in state["rngs"].items():
            st.rngs[k].bit_generator.state = s
        _stream_load(self.stream_s, state["stream_s"])
        _stream_load(self.stream_u, state["stream_u"])
        st.best_wer = math.inf if state["best_wer"] is None else state["best_wer"]
        st.best_step, st.evals_since_best = state["best_step"], state["evals_since_best"]
        st.trace = list(state["trace"])
        st.skipped_unsup, st.skipped_sup = state["skipped_unsup"], state["skipped_sup"]
        st.stop_reason = state["stop_reason"]
        best = {n[len("best/"):]: a for n, a in arrays.items() if n.startswith("best/")}
        self.best_params = best or None


def _stream_json(stream: BatchStream | None):
    if stream is None:
        return None
    d = stream.state_dict()
    d.pop("rng")  # shared with TrainState.rngs
    return d


def _stream_load(stream: BatchStream | None, d) -> None:
    if stream is None or d is None:
        return
    stream.plan = None if d["plan"] is None else BatchPlan(d["plan"], d["durations"])
    stream.pos, stream.cycles = d["pos"], d["cycles"]


def train(config: TrainerConfig, labeled: Sequence[Utterance], unlabeled: Sequence[Utterance],
          model: AcousticModel, valid: Sequence[Utterance] = (), run_dir: str | Path | None = None) -> TrainResult:
    """Run the alternating loop to completion (or early stop) and return the trained model and logs."""
    trainer = Trainer(model, config, labeled, unlabeled, valid, run_dir)
    return trainer.run()


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepCell:
    name: str
    update_ratio: int = 1
    lr_ratio: float = 20.0
    shared_optimizer: bool = False


ABLATION_GRID = (
    SweepCell("Baseline", 1, 20.0, False),
    SweepCell("Lu to Ls update ratio", 5, 20.0, False),
    SweepCell("Lu to Ls learning rate ratio", 1, 4.0, False),
    SweepCell("Single optimizer", 1, 20.0, True),
)


def run_cell(cell: SweepCell, base: TrainerConfig, model_cfg: ModelConfig, labeled, unlabeled, valid,
             model_seed: int = 0) -> dict:
    cfg = replace(base, update_ratio=cell.update_ratio, lr_u=base.lr_s * cell.lr_ratio,
                  shared_optimizer=cell.shared_optimizer)
    model = AcousticModel.create(model_cfg, model_seed)
    res = Trainer(model, cfg, labeled, unlabeled, valid, normalized=True).run()
    final = res.final_eval["valid"] if res.final_eval else {}
    return {"name": cell.name, "updates": f"{cell.update_ratio}:1", "lr": f"{cell.lr_ratio:g}:1",
            "optimizer": "single" if cell.shared_optimizer else "separate",
            "wer": final.get("wer", float("nan")), "cer": final.get("cer", float("nan")),
            "seed": cfg.seed, "params": res.model.params.snapshot()}


def hyperparam_sweep(grid: Sequence[SweepCell], base: TrainerConfig, model_cfg: ModelConfig,
                     labeled, unlabeled, valid, model_seed: int = 0, workers: int = 1) -> list[dict]:
    """One toy-scale training per grid cell; rows carry validation WER/CER for format_table."""
    labeled = [normalize(u) for u in labeled]
    unlabeled = [normalize(u) for u in unlabeled]
    valid = [normalize(u) for u in valid]
    args = [(c, base, model_cfg, labeled, unlabeled, valid, model_seed) for c in grid]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_run_cell_star, args))
    else:
        rows = [run_cell(*a) for a in args]
    return rows


def _run_cell_star(a):
    return run_cell(*a)


def format_table(rows: Sequence[dict]) -> str:
    lines = ["hyperparameter\tupdates\tlr\toptimizer\tvalid_wer\tvalid_cer"]
    for r in rows:
        lines.append(f"{r['name']}\t{r['updates']}\t{r['lr']}\t{r['optimizer']}\t{r['wer']:.4f}\t{r['cer']:.4f}")
    return "\n".join(lines) + "\n"
