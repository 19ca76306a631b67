from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import torch
from pydantic import BaseModel, root_validator, validator

from app.core.config import RunConfig


class ExtendedVocab(BaseModel):
    """Source and target vocabularies; the source side is extended with a CTC blank.

    Source token ids are ``0 .. n_source-1`` and the blank is ``n_source``.
    Target ids reserve ``pad``, ``bos`` and ``eos`` before the target tokens.
    """

    source_tokens: List[str]
    target_tokens: List[str]
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    blank_id: int
    cipher: Optional[List[int]] = None  # source id -> target id
    seed: int = 0

    @root_validator(skip_on_failure=True)
    def _check_ids(cls, values):
        n_source = len(values["source_tokens"])
        if values["blank_id"] != n_source:
            raise ValueError(f"blank id must be appended after {n_source} source tokens")
        specials = {values["pad_id"], values["bos_id"], values["eos_id"]}
        if specials != {0, 1, 2}:
            raise ValueError(f"target specials must occupy ids 0..2, got {sorted(specials)}")
        if len(set(values["source_tokens"])) != n_source:
            raise ValueError("source tokens are not unique")
        if len(set(values["target_tokens"])) != len(values["target_tokens"]):
            raise ValueError("target tokens are not unique")
        return values

    @property
    def n_source(self) -> int:
        return len(self.source_tokens)

    @property
    def n_target(self) -> int:
        return len(self.target_tokens)

    @property
    def extended_size(self) -> int:
        return self.n_source + 1

    @property
    def target_size(self) -> int:
        return self.n_target + 3

    @property
    def target_offset(self) -> int:
        return 3

    def is_source_token(self, token_id: int) -> bool:
        return 0 <= token_id < self.n_source

    def is_target_token(self, token_id: int) -> bool:
        return self.target_offset <= token_id < self.target_size


class CorpusConfig(BaseModel):
    n_source: int = 40
    n_target: int = 40
    n_asr: int = 5000
    n_mt: int = 20000
    n_st_train: int = 1000
    n_st_dev: int = 200
    n_st_test: int = 200
    min_len: int = 3
    max_len: int = 12
    d_feat: int = 16
    noise_sigma: float = 0.3
    silence_prob: float = 0.3
    repeat_min: int = 2
    repeat_max: int = 4
    frames_per_unit: int = 4
    downsample: int = 4

    @validator("max_len")
    def _check_lengths(cls, value, values):
        if "min_len" in values and not 1 <= values["min_len"] <= value:
            raise ValueError(f"length range [{values['min_len']}, {value}] is empty")
        return value

    @classmethod
    def from_run(cls, config: RunConfig) -> "CorpusConfig":
        return cls(**{name: getattr(config, name) for name in cls.__fields__})


class UtteranceTriple(BaseModel):
    """Speech features, transcript and translation; ASR items carry no translation
    and MT items carry no speech."""

    uid: str
    x: List[int]
    y: Optional[List[int]] = None
    speech: Optional[np.ndarray] = None

    class Config:
        arbitrary_types_allowed = True

    @validator("x")
    def _non_empty_transcript(cls, value):
        if not value:
            raise ValueError("transcript must be non-empty")
        return value

    @validator("y")
    def _non_empty_translation(cls, value):
        if value is not None and not value:
            raise ValueError("translation must be non-empty")
        return value

    @property
    def frames(self) -> int:
        return 0 if self.speech is None else int(self.speech.shape[0])


class CorpusBundle(BaseModel):
    vocab: ExtendedVocab
    config: CorpusConfig
    templates: np.ndarray
    asr: List[UtteranceTriple]
    mt: List[UtteranceTriple]
    st_train: List[UtteranceTriple]
    st_dev: List[UtteranceTriple]
    st_test: List[UtteranceTriple]
    seed: int

    class Config:
        arbitrary_types_allowed = True

    def split(self, name: str) -> List[UtteranceTriple]:
        if name not in self.split_names():
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    @staticmethod
    def split_names() -> List[str]:
        return ["asr", "mt", "st_train", "st_dev", "st_test"]

    def sizes(self) -> Dict[str, int]:
        return {name: len(self.split(name)) for name in self.split_names()}


@dataclass
class Batch:
    """Padded tensors for a group of utterances with their true lengths."""

    uids: List[str]
    transcripts: List[List[int]]
    references: List[List[int]]
    src: torch.Tensor
    src_lens: torch.Tensor
    speech: Optional[torch.Tensor] = None
    speech_lens: Optional[torch.Tensor] = None
    tgt_in: Optional[torch.Tensor] = None
    tgt_out: Optional[torch.Tensor] = None
    tgt_mask: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return len(self.uids)

    @property
    def src_mask(self) -> torch.Tensor:
        positions = torch.arange(self.src.shape[1]).unsqueeze(0)
        return positions < self.src_lens.unsqueeze(1)

    @property
    def speech_mask(self) -> torch.Tensor:
        if self.speech is None or self.speech_lens is None:
            raise ValueError("batch carries no speech")
        positions = torch.arange(self.speech.shape[1]).unsqueeze(0)
        return positions < self.speech_lens.unsqueeze(1)

    def subset(self, keep: List[int]) -> "Batch":
        index = torch.tensor(keep, dtype=torch.long)

        def pick(tensor):
            return None if tensor is None else tensor.index_select(0, index)

        return Batch(
            uids=[self.uids[i] for i in keep],
            transcripts=[self.transcripts[i] for i in keep],
            references=[self.references[i] for i in keep],
            src=pick(self.src),
            src_lens=pick(self.src_lens),
            speech=pick(self.speech),
            speech_lens=pick(self.speech_lens),
            tgt_in=pick(self.tgt_in),
            tgt_out=pick(self.tgt_out),
            tgt_mask=pick(self.tgt_mask),
        )
