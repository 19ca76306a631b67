from typing import List, Optional, Sequence

import numpy as np
import torch

from app.core.config import RunConfig, build_config
from app.models.corpus import Batch, CorpusBundle, CorpusConfig, ExtendedVocab, UtteranceTriple
from app.models.training import ModelConfig
from app.services.synthdata import build_corpus, make_batch, make_templates, synthesize_speech, translate_reference

TINY = {
    "n_source": 6,
    "n_target": 6,
    "n_asr": 40,
    "n_mt": 60,
    "n_st_train": 16,
    "n_st_dev": 8,
    "n_st_test": 8,
    "min_len": 2,
    "max_len": 4,
    "d_feat": 8,
    "d_model": 16,
    "speech_layers": 1,
    "encoder_layers": 1,
    "decoder_layers": 1,
    "heads": 2,
    "ffn_dim": 32,
    "batch_size": 8,
    "warmup": 10,
    "patience": 2,
    "average_best": 2,
    "asr_max_epochs": 2,
    "mt_max_epochs": 2,
    "st_max_epochs": 2,
    "beam": 2,
    "max_decode_len": 8,
}


def create_test_config(**overrides) -> RunConfig:
    """A configuration small enough to train every stage in seconds."""
    return build_config({**TINY, **overrides})


def create_test_corpus(seed: int = 1, **overrides) -> CorpusBundle:
    return build_corpus(CorpusConfig.from_run(create_test_config(**overrides)), seed)


def create_model_config(vocab: ExtendedVocab, **overrides) -> ModelConfig:
    return ModelConfig.from_run(create_test_config(**overrides), vocab)


def create_test_batch(
    corpus: CorpusBundle, transcripts: Sequence[List[int]], noise_sigma: float = 0.3, seed: int = 0
) -> Batch:
    """Batch of hand-picked transcripts rendered with the corpus templates."""
    items = []
    for i, x in enumerate(transcripts):
        speech = synthesize_speech(x, corpus.templates, noise_sigma, seed + i)
        items.append(UtteranceTriple(uid=f"test-{i}", x=list(x), y=translate_reference(x, corpus.vocab), speech=speech))
    return make_batch(items, corpus.vocab)


def random_log_probs(rows: int, vocab: int, seed: int = 0, dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    logits = torch.from_numpy(rng.normal(size=(rows, vocab))).to(dtype or torch.get_default_dtype())
    return torch.log_softmax(logits, dim=-1)


def fresh_templates(n_source: int = 4, d_feat: int = 3, seed: int = 0) -> np.ndarray:
    return make_templates(n_source, d_feat, seed)
