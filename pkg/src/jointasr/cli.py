"""Command-line entry point: synth-data, train, eval, sweep, gradcheck, plot."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import config as C
from .checkpoint import CheckpointError, load_checkpoint
from .data import (CorpusFormatError, CorpusSpec, EmptyCorpusError, filter_by_duration, generate_corpus,
                   load_corpus, normalize, save_corpus)
from .decode import DecodeOptions, NgramLm, decode_logprobs, score_corpus, train_ngram, tune_fusion
from .model import AcousticModel, ModelConfig, ModelParams
from .tensor import Tensor

log = logging.getLogger("jointasr")

EXIT_OK = 0
EXIT_FAILED = 1  # command ran but its check failed (e.g. a gradient suite)
EXIT_USAGE = 2  # argparse
EXIT_MISSING_PATH = 3
EXIT_BAD_CONFIG = 4
EXIT_INFEASIBLE_CORPUS = 5
EXIT_BAD_CHECKPOINT = 6

THREADS_ENV = "JOINTASR_THREADS"


class InfeasibleCorpusError(ValueError):
    pass


def threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise C.ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


# ---------------------------------------------------------------------------
# helpers


def _resolve(args) -> C.RunConfig:
    cfg = C.load_config(getattr(args, "config", None))
    return C.with_overrides(cfg, getattr(args, "seed", None), getattr(args, "preset", None))


def _corpus_spec(cfg: C.RunConfig, n: int, seed: int, labeled: bool) -> CorpusSpec:
    d = cfg.data
    return CorpusSpec(n, chars=d.chars, words_per_utt=d.words_per_utt, word_len=d.word_len,
                      lexicon_size=d.lexicon_size, successors=d.successors, noise_sigma=d.noise_sigma,
                      token_ms=d.token_ms, sample_rate=d.sample_rate, base_freq=d.base_freq,
                      freq_step=d.freq_step, seed=seed, language_seed=d.language_seed, labeled=labeled)


def _load_dir(path: str, what: str, required: bool = True):
    if not path:
        if required:
            raise FileNotFoundError(f"no {what} corpus given")
        return []
    if not Path(path).is_dir():
        raise FileNotFoundError(f"{what} corpus directory not found: {path}")
    return load_corpus(path)


def _prepare(corpus, cfg: C.RunConfig, what: str, labeled: bool):
    if not corpus:
        return []
    if labeled and any(u.transcript is None for u in corpus):
        raise InfeasibleCorpusError(f"{what} corpus has utterances without transcripts")
    rate = cfg.model.sample_rate
    if any(u.sample_rate != rate for u in corpus):
        raise InfeasibleCorpusError(f"{what} corpus sample rate does not match the model ({rate} Hz)")
    kept = filter_by_duration(corpus, cfg.data.min_duration, cfg.data.max_duration)
    if len(kept) < len(corpus):
        log.info("%s: kept %d of %d utterances within duration bounds", what, len(kept), len(corpus))
    return [normalize(u) for u in kept]


def _check_budget(corpus, budget: float, what: str) -> None:
    longest = max((u.duration for u in corpus), default=0.0)
    if longest > budget:
        raise InfeasibleCorpusError(f"{what}: a {longest:.3f} s utterance exceeds the {budget} s batch budget")


def load_model(path: str | Path) -> AcousticModel:
    config, arrays, _ = load_checkpoint(path)
    mcfg = ModelConfig(**config["model"])
    params = ModelParams({n[len("param/"):]: Tensor(a, requires_grad=True)
                          for n, a in arrays.items() if n.startswith("param/")})
    return AcousticModel(mcfg, params)


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out or cfg.paths.out)
    seed = cfg.run.seed
    d = cfg.data
    splits = {"labeled": (d.num_labeled, 3 * seed + 1, True), "unlabeled": (d.num_unlabeled, 3 * seed + 2, False),
              "valid": (d.num_valid, 3 * seed + 3, True)}
    for name, (n, s, labeled) in splits.items():
        if n <= 0:
            continue
        corpus = generate_corpus(_corpus_spec(cfg, n, s, labeled), f"{name[0]}{seed}_")
        save_corpus(corpus, out / name)
        if name == "labeled":
            lm = train_ngram([u.transcript for u in corpus], cfg.decode.lm_order, cfg.decode.lm_smoothing,
                             cfg.decode.lm_k, cfg.decode.lm_discount)
            lm.save(out / "lm.arpa")
    C.echo(cfg, out)
    print(f"wrote corpus to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import Trainer

    cfg = _resolve(args)
    labeled = _prepare(_load_dir(args.labeled or cfg.paths.labeled, "labeled"), cfg, "labeled", True)
    unlabeled = _prepare(_load_dir(args.unlabeled or cfg.paths.unlabeled, "unlabeled", False), cfg,
                         "unlabeled", False)
    valid = _prepare(_load_dir(args.valid or cfg.paths.valid, "valid", False), cfg, "valid", True)
    _check_budget(labeled, cfg.trainer.sup_batch_seconds, "labeled")
    _check_budget(unlabeled, cfg.trainer.unsup_batch_seconds, "unlabeled")
    out = Path(args.out or cfg.paths.out)
    C.echo(cfg, out)
    (out / "metrics.jsonl").unlink(missing_ok=True)
    model = AcousticModel.create(cfg.model, cfg.run.seed)
    trainer = Trainer(model, cfg.trainer, labeled, unlabeled, valid, run_dir=out, normalized=True)
    res = trainer.run()
    trainer.save(out / "final.ckpt")
    summary = {"stop_reason": res.state.stop_reason, "updates": res.state.global_step,
               "unsup_updates": res.state.unsup_steps, "sup_updates": res.state.sup_steps,
               "best_wer": None if res.state.best_step < 0 else res.state.best_wer,
               "final": res.final_eval}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    model = load_model(args.checkpoint)
    cfg = replace(cfg, model=model.cfg)
    corpus = _prepare(_load_dir(args.corpus or cfg.paths.valid, "evaluation"), cfg, "evaluation", True)
    lm_path = args.lm or cfg.paths.lm
    lm = None
    if lm_path:
        if not Path(lm_path).is_file():
            raise FileNotFoundError(f"language model not found: {lm_path}")
        lm = NgramLm.load(lm_path)
    blank = model.cfg.vocab_size - 1
    lps = [model.classify(model.contextualize(model.encode(u.samples))).data for u in corpus]
    refs = [u.transcript for u in corpus]
    beam = args.beam if args.beam is not None else cfg.decode.beam
    alpha = args.alpha if args.alpha is not None else cfg.decode.alpha
    beta = args.beta if args.beta is not None else cfg.decode.beta
    if lm is not None and args.tune:
        alpha, beta, _ = tune_fusion(lps, refs, lm, beam, blank, cfg.decode.alpha_grid, cfg.decode.beta_grid)
    opts = DecodeOptions(beam, lm, alpha, beta)
    hyps = [decode_logprobs(lp, opts, blank) for lp in lps]
    records, summary = score_corpus(refs, hyps, [u.id for u in corpus])
    summary.update({"beam": beam, "lm": lm_path or None, "alpha": alpha, "beta": beta})
    out = Path(args.out or cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
        fh.write(json.dumps({"summary": summary}) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .trainer import ABLATION_GRID, format_table, hyperparam_sweep

    cfg = _resolve(args)
    labeled = _prepare(_load_dir(args.labeled or cfg.paths.labeled, "labeled"), cfg, "labeled", True)
    unlabeled = _prepare(_load_dir(args.unlabeled or cfg.paths.unlabeled, "unlabeled"), cfg, "unlabeled", False)
    valid = _prepare(_load_dir(args.valid or cfg.paths.valid, "valid"), cfg, "valid", True)
    rows = hyperparam_sweep(ABLATION_GRID, cfg.trainer, cfg.model, labeled, unlabeled, valid, cfg.run.seed, threads())
    out = Path(args.out or cfg.paths.out)
    C.echo(cfg, out)
    table = format_table(rows)
    (out / "ablation.tsv").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck as G

    suites = {"ops": G.op_suites, "model": G.model_suites, "all": G.run_all}
    results = suites[args.suite](args.seed or 0)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.name} max_rel_err={r.max_rel_err:.3e} tol={r.tol:g}")
    print(f"{len(results) - failed}/{len(results)} suites passed")
    return EXIT_OK if not failed else EXIT_FAILED


CURVES = (("loss_u", "train"), ("loss_u", "valid"), ("loss_s", "train"), ("loss_s", "valid"))


def curve_rows(metrics_path: str | Path) -> list[dict]:
    """One row per (step, curve) from the eval records of a metrics log."""
    rows = []
    with open(metrics_path) as fh:
        for line in fh:
            rec = json.loads(line)
            if "split" not in rec:
                continue
            for loss, split in CURVES:
                if split == rec["split"] and loss in rec:
                    rows.append({"step": rec["step"], "curve": f"{loss}_{split}", "value": rec[loss]})
    return rows


def cmd_plot(args) -> int:
    run = Path(args.run)
    metrics = run / "metrics.jsonl" if run.is_dir() else run
    if not metrics.is_file():
        raise FileNotFoundError(f"metrics log not found: {metrics}")
    rows = curve_rows(metrics)
    out = Path(args.out) if args.out else metrics.parent
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "curve", "value"])
        w.writeheader()
        w.writerows(rows)
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.info("matplotlib unavailable; wrote CSV only")
        print(f"wrote {out / 'curves.csv'}")
        return EXIT_OK
    fig, ax = plt.subplots(figsize=(6, 4))
    styles = {"train": "-", "valid": ":"}
    colors = {"loss_u": "black", "loss_s": "green"}
    for loss, split in CURVES:
        pts = [(r["step"], r["value"]) for r in rows if r["curve"] == f"{loss}_{split}"]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, styles[split], color=colors[loss], label=f"{loss} {split}")
    ax.set_xlabel("update")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "curves.png", dpi=100)
    plt.close(fig)
    print(f"wrote {out / 'curves.csv'} and {out / 'curves.png'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointasr", description="Joint contrastive + CTC speech recognition toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpora=False):
        sp.add_argument("--config", help="INI run config (defaults apply when omitted)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--preset", choices=["toy", "paper"])
        sp.add_argument("--out", help="output directory")
        if corpora:
            sp.add_argument("--labeled", help="labeled corpus directory")
            sp.add_argument("--unlabeled", help="unlabeled corpus directory")
            sp.add_argument("--valid", help="validation corpus directory")

    sp = sub.add_parser("synth-data", help="generate synthetic labeled/unlabeled/valid corpora and an n-gram LM")
    common(sp)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("train", help="alternating joint training (supervised-only when no unlabeled data)")
    common(sp, corpora=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="decode a corpus with a checkpoint and report WER/CER")
    common(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("--corpus", help="labeled corpus directory to evaluate")
    sp.add_argument("--beam", type=int)
    sp.add_argument("--lm", help="n-gram LM file")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--tune", action="store_true", help="grid-search alpha/beta on this corpus")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="update-ratio, learning-rate and optimizer ablation at toy scale")
    common(sp, corpora=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    sp.add_argument("--suite", choices=["ops", "model", "all"], default="all")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("plot", help="loss curves (CSV, plus PNG when matplotlib is installed)")
    sp.add_argument("run", help="run directory or metrics.jsonl")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads()
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_PATH
    except C.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except (InfeasibleCorpusError, EmptyCorpusError, CorpusFormatError) as exc:
        print(f"error: infeasible corpus: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE_CORPUS
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
