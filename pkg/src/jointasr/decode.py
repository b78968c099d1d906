"""CTC decoding (greedy, prefix beam search with word n-gram fusion) and error rates."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import TOKENIZER, Tokenizer

BOS = "<s>"
UNK = "<unk>"


class UndefinedRateError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class ErrorRate:
    errors: int
    ref_len: int

    @property
    def rate(self) -> float:
        return self.errors / self.ref_len

    def __add__(self, other: ErrorRate) -> ErrorRate:
        return ErrorRate(self.errors + other.errors, self.ref_len + other.ref_len)


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref: Sequence[str] | str, hyp: Sequence[str] | str) -> ErrorRate:
    ref_w = ref.split() if isinstance(ref, str) else list(ref)
    hyp_w = hyp.split() if isinstance(hyp, str) else list(hyp)
    if not ref_w:
        raise UndefinedRateError("word error rate is undefined for an empty reference")
    return ErrorRate(edit_distance(ref_w, hyp_w), len(ref_w))


def cer(ref: str, hyp: str) -> ErrorRate:
    if not ref:
        raise UndefinedRateError("character error rate is undefined for an empty reference")
    return ErrorRate(edit_distance(ref, hyp), len(ref))


# ---------------------------------------------------------------------------
# greedy


def _lp_array(logprobs) -> np.ndarray:
    return np.asarray(getattr(logprobs, "data", logprobs), dtype=np.float64)


def greedy_ids(logprobs, blank: int) -> list[int]:
    best = _lp_array(logprobs).argmax(axis=1)
    out = []
    prev = None
    for k in best:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def greedy_decode(logprobs, blank: int, tokenizer: Tokenizer = TOKENIZER) -> str:
    """Best path: per-frame argmax, merge repeats, drop blanks."""
    return tokenizer.decode(greedy_ids(logprobs, blank))


# ---------------------------------------------------------------------------
# n-gram LM


class NgramLm:
    """Word n-gram model with add-k backoff (default) or interpolated Kneser-Ney.

    Add-k: p(w|h) = (c(h,w)+k) / (c(h)+k|V|) for seen histories, otherwise the
    estimate for the history shortened by one word. |V| counts ``<unk>``.
    """

    def __init__(self, order: int, counts: list[dict[tuple, dict[str, int]]], vocab: Sequence[str],
                 smoothing: str = "addk", k: float = 0.1, discount: float = 0.75):
        if order < 1:
            raise ValueError(f"n-gram order must be >= 1, got {order}")
        if smoothing not in ("addk", "kn"):
            raise ValueError(f"unknown smoothing {smoothing!r}")
        self.order = order
        self.counts = counts
        self.vocab = sorted(set(vocab) | {UNK})
        self._vocab_set = set(self.vocab)
        self.smoothing = smoothing
        self.k = k
        self.discount = discount
        self._totals = [{h: sum(ws.values()) for h, ws in level.items()} for level in counts]
        self._cache: dict[tuple, float] = {}
        if smoothing == "kn":
            self._build_continuation()

    def _build_continuation(self) -> None:
        # continuation counts for every order below the highest
        self.cont: list[dict[tuple, dict[str, int]]] = []
        for j in range(self.order - 1):
            level: dict[tuple, dict[str, int]] = defaultdict(dict)
            for h, ws in self.counts[j + 1].items():
                for w in ws:
                    short = h[1:]
                    level[short][w] = level[short].get(w, 0) + 1
            self.cont.append(dict(level))
        self.cont.append(self.counts[self.order - 1])
        self._cont_totals = [{h: sum(ws.values()) for h, ws in level.items()} for level in self.cont]

    def _norm_word(self, w: str) -> str:
        return w if w in self._vocab_set else UNK

    def _history(self, context: Sequence[str]) -> tuple:
        hist = [BOS] * (self.order - 1) + [self._norm_word(w) for w in context]
        return tuple(hist[len(hist) - (self.order - 1):]) if self.order > 1 else ()

    def prob(self, word: str, context: Sequence[str] = ()) -> float:
        w = self._norm_word(word)
        h = self._history(context)
        key = (h, w)
        p = self._cache.get(key)
        if p is None:
            p = self._addk(w, h) if self.smoothing == "addk" else self._kn(w, h, top=True)
            self._cache[key] = p
        return p

    def logprob(self, word: str, context: Sequence[str] = ()) -> float:
        p = self.prob(word, context)
        return math.log(p) if p > 0 else -math.inf

    def _addk(self, w: str, h: tuple) -> float:
        j = len(h)
        total = self._totals[j].get(h, 0)
        if total == 0:
            return self._addk(w, h[1:])
        c = self.counts[j][h].get(w, 0)
        return (c + self.k) / (total + self.k * len(self.vocab))

    def _kn(self, w: str, h: tuple, top: bool) -> float:
        j = len(h)
        table = self.counts[j] if top else self.cont[j]
        totals = self._totals[j] if top else self._cont_totals[j]
        total = totals.get(h, 0)
        if j == 0:
            lower = 1.0 / len(self.vocab)
        else:
            lower = self._kn(w, h[1:], top=False)
        if total == 0:
            return lower
        ws = table[h]
        d = self.discount
        return max(ws.get(w, 0) - d, 0.0) / total + d * len(ws) / total * lower

    def sentence_logprob(self, words: Sequence[str]) -> float:
        return sum(self.logprob(w, words[:i]) for i, w in enumerate(words))

    def perplexity(self, sentences: Iterable[Sequence[str]]) -> float:
        total, n = 0.0, 0
        for s in sentences:
            s = s.split() if isinstance(s, str) else list(s)
            total += self.sentence_logprob(s)
            n += len(s)
        return math.exp(-total / n)

    def save(self, path: str | Path) -> None:
        """Plain-text ARPA-style listing of raw counts per order (probabilities are recomputed on load)."""
        lines = ["\\jointasr-ngram\\", f"order={self.order}", f"smoothing={self.smoothing}",
                 f"k={self.k!r}", f"discount={self.discount!r}", "", "\\data\\"]
        for j in range(self.order):
            lines.append(f"ngram {j + 1}={sum(len(ws) for ws in self.counts[j].values())}")
        lines.append("")
        lines.append("\\vocab:")
        lines.extend(self.vocab)
        for j in range(self.order):
            lines.append("")
            lines.append(f"\\{j + 1}-grams:")
            for h in sorted(self.counts[j]):
                for w in sorted(self.counts[j][h]):
                    lines.append(f"{self.counts[j][h][w]}\t{' '.join(h + (w,))}")
        lines.append("")
        lines.append("\\end\\")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> NgramLm:
        lines = Path(path).read_text().split("\n")
        if lines[0] != "\\jointasr-ngram\\":
            raise ValueError(f"{path}: not an n-gram listing")
        meta = {}
        i = 1
        while lines[i]:
            key, val = lines[i].split("=", 1)
            meta[key] = val
            i += 1
        order = int(meta["order"])
        counts: list[dict] = [defaultdict(dict) for _ in range(order)]
        vocab: list[str] = []
        section = None
        for line in lines[i:]:
            if not line or line.startswith("ngram "):
                continue
            if line.startswith("\\"):
                section = line
                continue
            if section == "\\vocab:":
                vocab.append(line)
            elif section and section.endswith("-grams:"):
                j = int(section[1:section.index("-")]) - 1
                c, gram = line.split("\t")
                toks = tuple(gram.split(" "))
                counts[j][toks[:-1]][toks[-1]] = int(c)
        return cls(order, [dict(c) for c in counts], vocab, meta["smoothing"], float(meta["k"]),
                   float(meta["discount"]))


def train_ngram(transcripts: Iterable[str | Sequence[str]], n: int = 4, smoothing: str = "addk",
                k: float = 0.1, discount: float = 0.75) -> NgramLm:
    if n < 1:
        raise ValueError(f"n-gram order must be >= 1, got {n}")
    counts: list[dict] = [defaultdict(lambda: defaultdict(int)) for _ in range(n)]
    vocab = set()
    nonempty = False
    for s in transcripts:
        words = s.split() if isinstance(s, str) else list(s)
        if not words:
            continue
        nonempty = True
        vocab.update(words)
        padded = [BOS] * (n - 1) + words
        for i, w in enumerate(words):
            pos = i + n - 1
            for j in range(n):
                h = tuple(padded[pos - j:pos])
                counts[j][h][w] += 1
    if not nonempty:
        raise ValueError("cannot train an n-gram model without transcripts")
    frozen = [{h: dict(ws) for h, ws in level.items()} for level in counts]
    return NgramLm(n, frozen, sorted(vocab), smoothing, k, discount)


# ---------------------------------------------------------------------------
# beam search


@dataclass
class Hypothesis:
    prefix: tuple[int, ...]
    last: int
    score: float
    acoustic: float
    words: tuple[str, ...]
    partial: str


def _logaddexp(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    m = max(a, b)
    return m + math.log1p(math.exp(-abs(a - b)))


def beam_search_hypotheses(logprobs, blank: int, beam_size: int, lm: NgramLm | None = None,
                           lm_weight: float = 0.0, word_bonus: float = 0.0,
                           tokenizer: Tokenizer = TOKENIZER) -> list[Hypothesis]:
    """Frame-synchronous CTC prefix search; returns merged prefixes, best first.

    Beam entries are keyed by (prefix, last frame label) and merged by
    logsumexp; a completed word adds ``lm_weight * log p_LM + word_bonus``.
    The trailing partial word is scored at the end.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    lp = _lp_array(logprobs)
    f, v = lp.shape
    boundary = tokenizer.boundary
    use_lm = lm is not None and (lm_weight != 0.0 or word_bonus != 0.0)

    def word_score(words, word):
        if not word:
            return 0.0
        s = word_bonus
        if lm is not None and lm_weight != 0.0:
            s += lm_weight * lm.logprob(word, words)
        return s

    beam = {((), blank): Hypothesis((), blank, 0.0, 0.0, (), "")}
    for t in range(f):
        row = lp[t]
        cand: dict[tuple, Hypothesis] = {}
        for hyp in beam.values():
            for c in range(v):
                lc = float(row[c])
                if lc == -math.inf:
                    continue
                if c == blank or c == hyp.last:
                    key = (hyp.prefix, c)
                    new = Hypothesis(hyp.prefix, c, hyp.score + lc, hyp.acoustic + lc, hyp.words, hyp.partial)
                else:
                    words, partial, bonus = hyp.words, hyp.partial, 0.0
                    if c == boundary:
                        if use_lm:
                            bonus = word_score(words, partial)
                        if partial:
                            words = words + (partial,)
                        partial = ""
                    else:
                        partial = partial + tokenizer.symbols[c]
                    key = (hyp.prefix + (c,), c)
                    new = Hypothesis(key[0], c, hyp.score + lc + bonus, hyp.acoustic + lc, words, partial)
                old = cand.get(key)
                if old is None:
                    cand[key] = new
                else:
                    old.score = _logaddexp(old.score, new.score)
                    old.acoustic = _logaddexp(old.acoustic, new.acoustic)
        ranked = sorted(cand.items(), key=lambda kv: -kv[1].score)[:beam_size]
        beam = dict(ranked)

    merged: dict[tuple, Hypothesis] = {}
    for hyp in beam.values():
        final = hyp.score + (word_score(hyp.words, hyp.partial) if use_lm else 0.0)
        old = merged.get(hyp.prefix)
        if old is None:
            merged[hyp.prefix] = Hypothesis(hyp.prefix, hyp.last, final, hyp.acoustic, hyp.words, hyp.partial)
        else:
            old.score = _logaddexp(old.score, final)
            old.acoustic = _logaddexp(old.acoustic, hyp.acoustic)
    return sorted(merged.values(), key=lambda h: -h.score)


def beam_search(logprobs, blank: int, beam_size: int, lm: NgramLm | None = None, lm_weight: float = 0.0,
                word_bonus: float = 0.0, tokenizer: Tokenizer = TOKENIZER) -> str:
    best = beam_search_hypotheses(logprobs, blank, beam_size, lm, lm_weight, word_bonus, tokenizer)[0]
    return tokenizer.decode(best.prefix)


def exhaustive_best_prefix(logprobs, blank: int) -> tuple[tuple[int, ...], float]:
    """Sum all V^F frame paths by collapsed prefix and return the most probable one."""
    lp = _lp_array(logprobs)
    f, v = lp.shape
    if v ** f > 10 ** 6:
        raise ValueError("instance too large for exhaustive prefix search")
    totals: dict[tuple, float] = {}
    paths = np.indices((v,) * f).reshape(f, -1).T
    scores = lp[np.arange(f), paths].sum(axis=1)
    for path, s in zip(paths, scores):
        out, prev = [], None
        for k in path:
            k = int(k)
            if k != prev and k != blank:
                out.append(k)
            prev = k
        key = tuple(out)
        totals[key] = _logaddexp(totals.get(key, -math.inf), float(s))
    best = max(totals.items(), key=lambda kv: kv[1])
    return best


# ---------------------------------------------------------------------------
# corpus evaluation


@dataclass
class DecodeOptions:
    beam: int = 1
    lm: NgramLm | None = None
    alpha: float = 0.0
    beta: float = 0.0


def decode_logprobs(lp, opts: DecodeOptions, blank: int) -> str:
    if opts.beam <= 1 and opts.lm is None:
        return greedy_decode(lp, blank)
    return beam_search(lp, blank, opts.beam, opts.lm, opts.alpha, opts.beta)


def score_corpus(refs: Sequence[str], hyps: Sequence[str], ids: Sequence[str] | None = None):
    """Per-utterance records and corpus-level (pooled) WER/CER."""
    records = []
    w_tot = ErrorRate(0, 0)
    c_tot = ErrorRate(0, 0)
    for i, (r, h) in enumerate(zip(refs, hyps)):
        w = wer(r, h)
        c = cer(r, h)
        w_tot += w
        c_tot += c
        records.append({"utt_id": ids[i] if ids else str(i), "ref": r, "hyp": h,
                        "wer": w.rate, "cer": c.rate})
    summary = {"num_utts": len(records), "wer": w_tot.rate if w_tot.ref_len else float("nan"),
               "cer": c_tot.rate if c_tot.ref_len else float("nan"),
               "word_errors": w_tot.errors, "ref_words": w_tot.ref_len,
               "char_errors": c_tot.errors, "ref_chars": c_tot.ref_len}
    return records, summary


def tune_fusion(logprob_list, refs: Sequence[str], lm: NgramLm, beam: int, blank: int,
                alphas: Sequence[float] = (0.0, 0.25, 0.5, 1.0, 2.0),
                betas: Sequence[float] = (0.0, 0.5, 1.0, 2.0)) -> tuple[float, float, float]:
    """Grid search (alpha, beta) for the lowest corpus WER; ties keep the earlier grid point."""
    best = None
    for a in alphas:
        for b in betas:
            hyps = [beam_search(lp, blank, beam, lm, a, b) for lp in logprob_list]
            _, summary = score_corpus(refs, hyps)
            key = (summary["wer"], summary["cer"])
            if best is None or key < best[0]:
                best = (key, a, b)
    return best[1], best[2], best[0][0]
