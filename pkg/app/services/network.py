"""Speech encoder, CTC head and the shared text transformer.

Every forward takes an explicit ``rng``: dropout masks are drawn from it, and
passing ``None`` switches dropout off (evaluation).
"""

import logging
import math
from typing import Optional, Tuple

import torch
from torch import nn

from app.core.errors import ShapeError
from app.models.corpus import Batch
from app.models.training import ModelConfig, Stage
from app.utils import diffcore
from app.utils.ctc import ctc_loss_batch, ctc_project

logger = logging.getLogger(__name__)

Rng = Optional[torch.Generator]


def positional_encoding(length: int, d_model: int, dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    scale = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    table = torch.zeros(length, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * scale)
    table[:, 1::2] = torch.cos(position * scale)[:, : d_model // 2]
    return table.to(dtype or torch.get_default_dtype())


def _norm(module: nn.LayerNorm, x: torch.Tensor) -> torch.Tensor:
    return diffcore.layer_norm(x, module.weight, module.bias, module.eps)


def _lin(module: nn.Linear, x: torch.Tensor) -> torch.Tensor:
    return diffcore.linear(x, module.weight, module.bias)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d_model // heads
        self.query = nn.Linear(d_model, d_model)
        self.key = nn.Linear(d_model, d_model)
        self.value = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        key_mask: Optional[torch.Tensor],
        causal: bool,
        p: float,
        rng: Rng,
    ) -> torch.Tensor:
        q = self._split(_lin(self.query, x))
        k = self._split(_lin(self.key, memory))
        v = self._split(_lin(self.value, memory))
        context = diffcore.masked_attention(q, k, v, key_mask=key_mask, causal=causal, p=p, rng=rng)
        batch, _, length, _ = context.shape
        return _lin(self.out, context.transpose(1, 2).reshape(batch, length, -1))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int):
        super().__init__()
        self.inner = nn.Linear(d_model, ffn_dim)
        self.outer = nn.Linear(ffn_dim, d_model)

    def forward(self, x: torch.Tensor, p: float, rng: Rng) -> torch.Tensor:
        return _lin(self.outer, diffcore.dropout(torch.relu(_lin(self.inner, x)), p, rng))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, d_model: int, heads: int, ffn_dim: int):
        super().__init__()
        self.attn_norm = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads)
        self.ffn_norm = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_dim)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor], p: float, rng: Rng) -> torch.Tensor:
        normed = _norm(self.attn_norm, x)
        x = diffcore.add(x, diffcore.dropout(self.attn(normed, normed, mask, False, p, rng), p, rng))
        return diffcore.add(x, diffcore.dropout(self.ffn(_norm(self.ffn_norm, x), p, rng), p, rng))


class DecoderLayer(nn.Module):
    """Pre-norm causal self-attention, cross-attention and feed-forward block."""

    def __init__(self, d_model: int, heads: int, ffn_dim: int):
        super().__init__()
        self.self_norm = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, heads)
        self.cross_norm = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, heads)
        self.ffn_norm = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_dim)

    def forward(
        self,
        y: torch.Tensor,
        memory: torch.Tensor,
        memory_mask: Optional[torch.Tensor],
        p: float,
        rng: Rng,
    ) -> torch.Tensor:
        normed = _norm(self.self_norm, y)
        y = diffcore.add(y, diffcore.dropout(self.self_attn(normed, normed, None, True, p, rng), p, rng))
        normed = _norm(self.cross_norm, y)
        y = diffcore.add(y, diffcore.dropout(self.cross_attn(normed, memory, memory_mask, False, p, rng), p, rng))
        return diffcore.add(y, diffcore.dropout(self.ffn(_norm(self.ffn_norm, y), p, rng), p, rng))


class SpeechEncoder(nn.Module):
    """Two stride-2 convolutions (``T' = ceil(T/4)``) followed by self-attention layers."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.conv1 = nn.Conv1d(config.d_feat, config.d_model, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv1d(config.d_model, config.d_model, kernel_size=3, stride=2, padding=1)
        self.layers = nn.ModuleList(
            EncoderLayer(config.d_model, config.heads, config.ffn_dim) for _ in range(config.speech_layers)
        )
        self.norm = nn.LayerNorm(config.d_model)

    @staticmethod
    def output_lengths(lengths: torch.Tensor) -> torch.Tensor:
        return (lengths + 3) // 4

    @staticmethod
    def _zero_padding(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        valid = torch.arange(x.shape[2]).unsqueeze(0) < lengths.unsqueeze(1)
        return x * valid.unsqueeze(1).to(x.dtype)

    def forward(self, speech: torch.Tensor, lengths: torch.Tensor, p: float, rng: Rng) -> Tuple[torch.Tensor, torch.Tensor]:
        if speech.dim() != 3:
            raise ShapeError("encode_speech", [tuple(speech.shape)], "expected batch x frames x d_feat")
        if speech.shape[0] and int(lengths.min()) < 4:
            raise ShapeError("encode_speech", [tuple(speech.shape)], "every utterance needs at least 4 frames")
        x = self._zero_padding(speech.transpose(1, 2), lengths)
        half = (lengths + 1) // 2
        x = self._zero_padding(torch.relu(self.conv1(x)), half)
        out_lengths = self.output_lengths(lengths)
        x = self._zero_padding(torch.relu(self.conv2(x)), out_lengths).transpose(1, 2)
        x = diffcore.add(x, positional_encoding(x.shape[1], x.shape[2], x.dtype))
        x = diffcore.dropout(x, p, rng)
        mask = torch.arange(x.shape[1]).unsqueeze(0) < out_lengths.unsqueeze(1)
        for layer in self.layers:
            x = layer(x, mask, p, rng)
        return _norm(self.norm, x), out_lengths


class CtcHead(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.proj = nn.Linear(config.d_model, config.n_extended)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return ctc_project(h, self.proj.weight, self.proj.bias)


class SharedTransformer(nn.Module):
    """Text encoder and decoder shared by MT pre-training and both ST branches.

    ``source_embedding`` has one row per source token and is also the table
    copy-and-replace draws auxiliary rows from.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.d_model = config.d_model
        self.source_embedding = nn.Parameter(torch.randn(config.n_source, config.d_model) * config.d_model ** -0.5)
        self.target_embedding = nn.Parameter(
            torch.randn(config.n_target_vocab, config.d_model) * config.d_model ** -0.5
        )
        self.encoder = nn.ModuleList(
            EncoderLayer(config.d_model, config.heads, config.ffn_dim) for _ in range(config.encoder_layers)
        )
        self.encoder_norm = nn.LayerNorm(config.d_model)
        self.decoder = nn.ModuleList(
            DecoderLayer(config.d_model, config.heads, config.ffn_dim) for _ in range(config.decoder_layers)
        )
        self.decoder_norm = nn.LayerNorm(config.d_model)
        self.output = nn.Linear(config.d_model, config.n_target_vocab)

    def scaled_source_table(self) -> torch.Tensor:
        return self.source_embedding * math.sqrt(self.d_model)

    def embed_source(self, src: torch.Tensor) -> torch.Tensor:
        return diffcore.embedding(src, self.scaled_source_table())

    def encode(self, seq: torch.Tensor, mask: Optional[torch.Tensor], p: float, rng: Rng) -> torch.Tensor:
        """Encode embedded inputs (text embeddings, ``o`` or ``a``) into a memory."""
        x = diffcore.add(seq, positional_encoding(seq.shape[1], seq.shape[2], seq.dtype))
        x = diffcore.dropout(x, p, rng)
        for layer in self.encoder:
            x = layer(x, mask, p, rng)
        return _norm(self.encoder_norm, x)

    def decode(
        self,
        prefix: torch.Tensor,
        memory: torch.Tensor,
        memory_mask: Optional[torch.Tensor],
        p: float,
        rng: Rng,
    ) -> torch.Tensor:
        """Teacher-forced next-token log-distributions, one row per prefix position."""
        if prefix.dim() != 2 or prefix.shape[1] == 0:
            raise ValueError("decoding needs a non-empty target prefix")
        y = diffcore.embedding(prefix, self.target_embedding) * math.sqrt(self.d_model)
        y = diffcore.add(y, positional_encoding(y.shape[1], y.shape[2], y.dtype))
        y = diffcore.dropout(y, p, rng)
        for layer in self.decoder:
            y = layer(y, memory, memory_mask, p, rng)
        return diffcore.log_softmax(_lin(self.output, _norm(self.decoder_norm, y)))


class _StagedModel(nn.Module):
    def __init__(self, config: ModelConfig, stage: Stage):
        super().__init__()
        self.config = config
        self.stage = stage
        self.dropout = config.dropout_for(stage)


class AsrModel(_StagedModel):
    """Speech encoder plus CTC head, pre-trained on transcripts."""

    def __init__(self, config: ModelConfig):
        super().__init__(config, Stage.ASR)
        self.speech_encoder = SpeechEncoder(config)
        self.ctc = CtcHead(config)

    def forward(self, batch: Batch, rng: Rng = None) -> Tuple[torch.Tensor, torch.Tensor]:
        h, lengths = self.speech_encoder(batch.speech, batch.speech_lens, self.dropout, rng)
        return self.ctc(h), lengths

    def loss(self, batch: Batch, rng: Rng = None) -> torch.Tensor:
        log_probs, lengths = self(batch, rng)
        return ctc_loss_batch(log_probs, lengths, batch.transcripts, self.config.n_source)


class MtModel(_StagedModel):
    """Shared transformer fed with embedded source transcripts."""

    def __init__(self, config: ModelConfig):
        super().__init__(config, Stage.MT)
        self.shared = SharedTransformer(config)

    def encode(self, batch: Batch, rng: Rng = None) -> Tuple[torch.Tensor, torch.Tensor]:
        mask = batch.src_mask
        return self.shared.encode(self.shared.embed_source(batch.src), mask, self.dropout, rng), mask

    def forward(self, batch: Batch, rng: Rng = None) -> torch.Tensor:
        memory, mask = self.encode(batch, rng)
        return self.shared.decode(batch.tgt_in, memory, mask, self.dropout, rng)


class StModel(_StagedModel):
    """Speech encoder, CTC head and shared transformer under the pre-trained names."""

    def __init__(self, config: ModelConfig):
        super().__init__(config, Stage.ST)
        self.speech_encoder = SpeechEncoder(config)
        self.ctc = CtcHead(config)
        self.shared = SharedTransformer(config)

    @property
    def blank_id(self) -> int:
        return self.config.n_source

    def encode_speech(self, batch: Batch, rng: Rng = None) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.speech_encoder(batch.speech, batch.speech_lens, self.dropout, rng)

    def encode_text(self, batch: Batch, rng: Rng = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Gold-transcript memory, used to measure the speech/text modality gap."""
        mask = batch.src_mask
        return self.shared.encode(self.shared.embed_source(batch.src), mask, self.dropout, rng), mask


MODEL_CLASSES = {Stage.ASR: AsrModel, Stage.MT: MtModel, Stage.ST: StModel}


def build_model(stage: Stage, config: ModelConfig, seed: int) -> nn.Module:
    """Construct a freshly initialized model; the initialization depends on ``seed`` only."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = MODEL_CLASSES[Stage(stage)](config)
    params = diffcore.ParamSet.from_module(model)
    logger.info(f"Built {Stage(stage).value} model with {len(params)} tensors, "
                f"{sum(p.numel() for _, p in params)} weights")
    return model
