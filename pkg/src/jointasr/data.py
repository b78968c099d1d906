"""Synthetic frequency-coded corpora, tokenization, normalization, filtering and batching."""

from __future__ import annotations

import logging
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

CORPUS_VERSION = 1
MANIFEST = "manifest.tsv"


class EmptyCorpusError(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


@dataclass
class Utterance:
    id: str
    samples: np.ndarray
    sample_rate: int
    transcript: str | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError(f"utterance {self.id}: samples must be a nonempty 1-D sequence")
        if self.transcript is not None and not self.transcript:
            raise ValueError(f"utterance {self.id}: transcript must be nonempty when present")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


class Tokenizer:
    """26 letters, apostrophe and a word-boundary token (written as a space); blank is last."""

    def __init__(self):
        self.symbols = list(string.ascii_lowercase) + ["'", " "]
        self._ids = {c: i for i, c in enumerate(self.symbols)}
        self.boundary = self._ids[" "]
        self.blank = len(self.symbols)

    @property
    def vocab_size(self) -> int:
        return len(self.symbols) + 1

    def encode(self, text: str) -> list[int]:
        try:
            return [self._ids[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} outside the tokenizer alphabet") from None

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if i == self.blank or not 0 <= i < len(self.symbols):
                raise ValueError(f"id {i} is not a printable token")
            out.append(self.symbols[i])
        return "".join(out)


TOKENIZER = Tokenizer()


# ---------------------------------------------------------------------------
# synthesis


@dataclass(frozen=True)
class CorpusSpec:
    num_utts: int
    chars: str = "abcdefgh"
    words_per_utt: tuple[int, int] = (2, 4)
    word_len: tuple[int, int] = (2, 4)
    lexicon_size: int = 24
    successors: int = 3
    noise_sigma: float = 0.5
    token_ms: int = 40
    sample_rate: int = 1000
    base_freq: float = 50.0
    freq_step: float = 50.0
    seed: int = 0
    language_seed: int = 1234
    labeled: bool = True


@dataclass
class Language:
    """Lexicon plus a sparse word-bigram grammar shared by every split of one task."""

    words: list[str]
    start_words: np.ndarray
    successors: np.ndarray
    token_freqs: dict[str, float] = field(default_factory=dict)


def build_language(spec: CorpusSpec) -> Language:
    rng = np.random.default_rng(spec.language_seed)
    chars = spec.chars
    if not chars or len(set(chars)) != len(chars) or " " in chars:
        raise ValueError("chars must be distinct non-space characters")
    TOKENIZER.encode(chars)
    symbols = list(chars) + [" "]
    freqs = {c: spec.base_freq + j * spec.freq_step for j, c in enumerate(symbols)}
    if max(freqs.values()) >= spec.sample_rate / 2:
        raise ValueError("token frequencies exceed the Nyquist limit; reduce chars or freq_step")
    words: list[str] = []
    seen = set()
    attempts = 0
    while len(words) < spec.lexicon_size:
        n = int(rng.integers(spec.word_len[0], spec.word_len[1] + 1))
        w = "".join(rng.choice(list(chars), size=n))
        attempts += 1
        if w not in seen:
            seen.add(w)
            words.append(w)
        elif attempts > 100 * spec.lexicon_size:
            raise ValueError("cannot draw enough distinct words; enlarge chars or word_len")
    k = min(spec.successors, len(words))
    succ = np.stack([rng.choice(len(words), size=k, replace=False) for _ in words])
    starts = rng.choice(len(words), size=k, replace=False)
    return Language(words, starts, succ, freqs)


def synthesize(text: str, spec: CorpusSpec, lang: Language, rng: np.random.Generator) -> np.ndarray:
    """Concatenate one fixed-length sinusoid per token (random phase) and add Gaussian noise."""
    n = int(round(spec.token_ms * spec.sample_rate / 1000))
    t = np.arange(n) / spec.sample_rate
    segs = []
    for c in text:
        phase = rng.uniform(0, 2 * np.pi)
        segs.append(np.sin(2 * np.pi * lang.token_freqs[c] * t + phase))
    audio = np.concatenate(segs)
    gain = rng.uniform(0.5, 1.5)
    noise = rng.normal(0.0, spec.noise_sigma, size=audio.size) if spec.noise_sigma > 0 else 0.0
    return gain * (audio + noise)


def sample_sentence(lang: Language, spec: CorpusSpec, rng: np.random.Generator) -> str:
    n = int(rng.integers(spec.words_per_utt[0], spec.words_per_utt[1] + 1))
    w = int(rng.choice(lang.start_words))
    out = [lang.words[w]]
    for _ in range(n - 1):
        w = int(rng.choice(lang.successors[w]))
        out.append(lang.words[w])
    return " ".join(out)


def generate_corpus(spec: CorpusSpec, prefix: str = "utt") -> list[Utterance]:
    """Deterministic synthetic corpus; ``spec.labeled`` controls whether transcripts are kept."""
    if spec.num_utts <= 0:
        raise EmptyCorpusError("num_utts must be positive")
    lang = build_language(spec)
    rng = np.random.default_rng(spec.seed)
    corpus = []
    for i in range(spec.num_utts):
        text = sample_sentence(lang, spec, rng)
        audio = synthesize(text, spec, lang, rng)
        corpus.append(Utterance(f"{prefix}{i:06d}", audio, spec.sample_rate, text if spec.labeled else None))
    return corpus


# ---------------------------------------------------------------------------
# preprocessing


def normalize(u: Utterance, eps: float = 1e-8) -> Utterance:
    x = u.samples
    centered = x - x.mean()
    std = centered.std()
    if std < eps:
        log.warning("utterance %s is constant; normalized to zeros", u.id)
        out = np.zeros_like(x)
    else:
        out = centered / std
    return Utterance(u.id, out, u.sample_rate, u.transcript)


def filter_by_duration(corpus: Sequence[Utterance], min_s: float, max_s: float) -> list[Utterance]:
    if min_s > max_s:
        raise ValueError(f"min duration {min_s} exceeds max duration {max_s}")
    kept = [u for u in corpus if min_s <= u.duration <= max_s]
    if not kept:
        raise EmptyCorpusError(f"no utterance within [{min_s}, {max_s}] s")
    return kept


@dataclass
class BatchPlan:
    batches: list[list[str]]
    durations: list[float]


def plan_batches(corpus: Sequence[Utterance], budget_seconds: float, rng: np.random.Generator) -> BatchPlan:
    """Shuffle, then greedily pack consecutive utterances while the summed duration fits the budget."""
    if not corpus:
        raise EmptyCorpusError("cannot batch an empty corpus")
    for u in corpus:
        if u.duration > budget_seconds:
            raise ValueError(f"utterance {u.id} ({u.duration:.3f} s) exceeds batch budget {budget_seconds} s")
    order = rng.permutation(len(corpus))
    batches: list[list[str]] = []
    durations: list[float] = []
    cur: list[str] = []
    total = 0.0
    for i in order:
        u = corpus[int(i)]
        if cur and total + u.duration > budget_seconds:
            batches.append(cur)
            durations.append(total)
            cur, total = [], 0.0
        cur.append(u.id)
        total += u.duration
    batches.append(cur)
    durations.append(total)
    return BatchPlan(batches, durations)


class BatchStream:
    """Endless, reshuffled-per-cycle stream of duration-budgeted batches."""

    def __init__(self, corpus: Sequence[Utterance], budget_seconds: float, rng: np.random.Generator):
        if not corpus:
            raise EmptyCorpusError("cannot stream an empty corpus")
        self.corpus = list(corpus)
        self.by_id = {u.id: u for u in self.corpus}
        self.budget = budget_seconds
        self.rng = rng
        self.plan: BatchPlan | None = None
        self.pos = 0
        self.cycles = 0

    def next_batch(self) -> list[Utterance]:
        if self.plan is None or self.pos >= len(self.plan.batches):
            self.plan = plan_batches(self.corpus, self.budget, self.rng)
            self.pos = 0
            self.cycles += 1
        batch = [self.by_id[i] for i in self.plan.batches[self.pos]]
        self.pos += 1
        return batch

    def state_dict(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "plan": None if self.plan is None else self.plan.batches,
            "durations": None if self.plan is None else self.plan.durations,
            "pos": self.pos,
            "cycles": self.cycles,
        }

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.plan = None if state["plan"] is None else BatchPlan(state["plan"], state["durations"])
        self.pos = state["pos"]
        self.cycles = state["cycles"]


def specaugment_mask(z, model, rng: np.random.Generator, train: bool = True,
                     start_p: float | None = None, span: int | None = None):
    """Mask encoder-feature spans with the learned embedding, drawn exactly like the contrastive mask.

    Returns ``(masked, plan)``; in eval mode returns ``(z, None)`` without touching ``rng``.
    """
    from .model import sample_mask_plan

    if not train:
        return z, None
    plan = sample_mask_plan(z.shape[0], model.cfg, rng, start_p=start_p, span=span)
    return model.apply_mask(z, plan), plan


# ---------------------------------------------------------------------------
# disk format


def save_corpus(corpus: Sequence[Utterance], directory: str | Path) -> Path:
    """Manifest plus one raw little-endian float64 file per utterance."""
    d = Path(directory)
    (d / "audio").mkdir(parents=True, exist_ok=True)
    rates = {u.sample_rate for u in corpus}
    if len(rates) != 1:
        raise ValueError("all utterances in a corpus must share one sample rate")
    lines = [f"# jointasr-corpus version={CORPUS_VERSION} sample_rate={rates.pop()} dtype=float64-le",
             "id\tnum_samples\tduration\ttranscript\tpath"]
    for u in corpus:
        rel = f"audio/{u.id}.f64"
        u.samples.astype("<f8").tofile(d / rel)
        text = "" if u.transcript is None else u.transcript
        if "\t" in text or "\n" in text:
            raise ValueError(f"utterance {u.id}: transcript contains tab/newline")
        lines.append(f"{u.id}\t{u.samples.size}\t{u.duration!r}\t{text}\t{rel}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")
    return d


def load_corpus(directory: str | Path) -> list[Utterance]:
    d = Path(directory)
    path = d / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no corpus manifest at {path}")
    lines = path.read_text().split("\n")
    header = lines[0]
    if not header.startswith("# jointasr-corpus"):
        raise CorpusFormatError(f"{path}: missing corpus header")
    meta = dict(kv.split("=", 1) for kv in header.split()[2:])
    if int(meta["version"]) != CORPUS_VERSION:
        raise CorpusFormatError(f"{path}: unsupported corpus version {meta['version']}")
    rate = int(meta["sample_rate"])
    corpus = []
    for line in lines[2:]:
        if not line:
            continue
        uid, n, _dur, text, rel = line.split("\t")
        samples = np.fromfile(d / rel, dtype="<f8")
        if samples.size != int(n):
            raise CorpusFormatError(f"{uid}: expected {n} samples, found {samples.size}")
        corpus.append(Utterance(uid, samples, rate, text or None))
    if not corpus:
        raise EmptyCorpusError(f"corpus at {d} is empty")
    return corpus
