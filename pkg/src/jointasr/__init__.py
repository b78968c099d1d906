"""Single-stage joint contrastive + CTC speech recognition on a numpy autodiff engine."""

from .data import TOKENIZER, CorpusSpec, Utterance, generate_corpus
from .losses import ContrastiveConfig, contrastive_loss, ctc_loss
from .model import AcousticModel, ModelConfig, paper_preset, toy_preset
from .trainer import Trainer, TrainerConfig, train

__all__ = ["TOKENIZER", "CorpusSpec", "Utterance", "generate_corpus", "ContrastiveConfig", "contrastive_loss",
           "ctc_loss", "AcousticModel", "ModelConfig", "paper_preset", "toy_preset", "Trainer", "TrainerConfig",
           "train"]
__version__ = "0.1.0"
