import numpy as np
import pytest

from jointasr.data import CorpusSpec, generate_corpus, normalize
from jointasr.model import AcousticModel, tiny_preset
from jointasr.trainer import TrainerConfig

SMALL = dict(chars="abcd", token_ms=12, words_per_utt=(1, 2), word_len=(1, 2), lexicon_size=8, noise_sigma=0.1)


def small_corpus(n, seed, labeled=True, prefix="u"):
    return [normalize(u) for u in generate_corpus(CorpusSpec(n, seed=seed, labeled=labeled, **SMALL), prefix)]


@pytest.fixture(scope="session")
def corpora():
    return small_corpus(12, 1, True, "L"), small_corpus(20, 2, False, "U"), small_corpus(6, 3, True, "V")


def tiny_model(seed=0):
    return AcousticModel.create(tiny_preset(), seed)


def fast_cfg(**kw):
    base = dict(total_updates=40, warmup_updates=5, lr_u=1e-3, lr_s=1e-3, eval_every=0, num_negatives=4,
                sup_batch_seconds=0.2, unsup_batch_seconds=0.2, train_eval_utts=0, eval_max_utts=6)
    base.update(kw)
    return TrainerConfig(**base)


def params_equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
