from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, validator

from app.core.config import RunConfig
from app.models.branch import ReplacePolicy
from app.models.corpus import ExtendedVocab
from app.models.losses import DivergenceKind

METRIC_COLUMNS = [
    "step",
    "epoch",
    "stage",
    "loss_ce_o",
    "loss_ce_a",
    "loss_ctc",
    "loss_cons",
    "loss_total",
    "ratio_aux_orig",
    "upsilon",
    "p_star",
    "lr",
    "acc_o",
    "acc_a",
]


class Stage(str, Enum):
    ASR = "asr"
    MT = "mt"
    ST = "st"


class ModelConfig(BaseModel):
    d_feat: int = 16
    n_source: int = 40
    n_target_vocab: int = 43
    d_model: int = 64
    speech_layers: int = 2
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    dropout_pretrain: float = 0.1
    dropout_finetune: float = 0.15
    downsample: int = 4
    max_positions: int = 1024

    @validator("heads")
    def _heads_divide_model(cls, value, values):
        if values.get("d_model", 0) % value != 0:
            raise ValueError(f"d_model {values.get('d_model')} is not divisible by {value} heads")
        return value

    @validator("dropout_pretrain", "dropout_finetune")
    def _dropout_range(cls, value):
        if not 0.0 <= value < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {value}")
        return value

    @validator("downsample")
    def _downsample_is_two_strides(cls, value):
        if value != 4:
            raise ValueError("the speech encoder downsamples with two stride-2 convolutions (factor 4)")
        return value

    @property
    def n_extended(self) -> int:
        return self.n_source + 1

    def dropout_for(self, stage: Stage) -> float:
        return self.dropout_finetune if stage == Stage.ST else self.dropout_pretrain

    @classmethod
    def from_run(cls, config: RunConfig, vocab: ExtendedVocab) -> "ModelConfig":
        return cls(
            d_feat=config.d_feat,
            n_source=vocab.n_source,
            n_target_vocab=vocab.target_size,
            d_model=config.d_model,
            speech_layers=config.speech_layers,
            encoder_layers=config.encoder_layers,
            decoder_layers=config.decoder_layers,
            heads=config.heads,
            ffn_dim=config.ffn_dim,
            dropout_pretrain=config.dropout_pretrain,
            dropout_finetune=config.dropout_finetune,
            downsample=config.downsample,
        )


class TrainConfig(BaseModel):
    """Resolved settings of one training stage."""

    stage: Stage
    seed: int = 1
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    peak_lr: float = 1e-3
    warmup: int = 400
    schedule: str = "inverse_sqrt"
    max_epochs: int = 40
    patience: int = 10
    average_best: int = 3
    ctc_weight: float = 0.3
    alpha: float = 1.0
    divergence: DivergenceKind = DivergenceKind.BI_KL
    policy: ReplacePolicy = ReplacePolicy(mode="dynamic", gamma=0.5)
    label_smoothing: float = 0.1
    upsilon_smoothing: float = 0.0
    entropy_mode: str = "distribution"
    kl_flip: bool = False
    cons_stop_gradient: str = "none"
    single_branch: bool = False
    beam: int = 5
    max_decode_len: int = 20

    @validator("warmup", "patience", "batch_size", "average_best", "max_epochs")
    def _at_least_one(cls, value, field):
        if value < 1:
            raise ValueError(f"{field.name} must be >= 1, got {value}")
        return value

    @validator("alpha", "ctc_weight")
    def _non_negative(cls, value, field):
        if value < 0:
            raise ValueError(f"{field.name} must be non-negative, got {value}")
        return value

    @property
    def effective_alpha(self) -> float:
        if self.single_branch or self.divergence == DivergenceKind.NONE:
            return 0.0
        return self.alpha

    @property
    def is_baseline(self) -> bool:
        return (
            self.single_branch
            and self.effective_alpha == 0.0
            and self.policy.mode == "fixed"
            and self.policy.value == 0.0
        )

    @classmethod
    def from_run(cls, config: RunConfig, stage: Stage) -> "TrainConfig":
        max_epochs = {
            Stage.ASR: config.asr_max_epochs,
            Stage.MT: config.mt_max_epochs,
            Stage.ST: config.st_max_epochs,
        }[stage]
        return cls(
            stage=stage,
            seed=config.seed,
            batch_size=config.batch_size,
            adam_beta1=config.adam_beta1,
            adam_beta2=config.adam_betas[stage.value],
            adam_eps=config.adam_eps,
            peak_lr=config.peak_lr,
            warmup=config.warmup,
            schedule=config.schedule,
            max_epochs=max_epochs,
            patience=config.patience,
            average_best=config.average_best,
            ctc_weight=config.ctc_weight,
            alpha=config.alpha,
            divergence=DivergenceKind(config.divergence),
            policy=ReplacePolicy.from_setting(config.p_star, config.gamma),
            label_smoothing=config.label_smoothing,
            upsilon_smoothing=config.upsilon_smoothing,
            entropy_mode=config.entropy_mode,
            kl_flip=config.kl_flip,
            cons_stop_gradient=config.cons_stop_gradient,
            single_branch=config.single_branch,
            beam=config.beam,
            max_decode_len=config.max_decode_len,
        )


class MetricRow(BaseModel):
    step: int
    epoch: int
    stage: Stage
    loss_ce_o: Optional[float] = None
    loss_ce_a: Optional[float] = None
    loss_ctc: Optional[float] = None
    loss_cons: Optional[float] = None
    loss_total: float
    ratio_aux_orig: Optional[float] = None
    upsilon: Optional[float] = None
    p_star: Optional[float] = None
    lr: float
    acc_o: Optional[float] = None
    acc_a: Optional[float] = None

    class Config:
        use_enum_values = True


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    dev_score: float
    improved: bool
    dev_acc_speech: Optional[float] = None
    dev_acc_text: Optional[float] = None


class RunRecord(BaseModel):
    stage: Stage
    config: Dict[str, Any] = {}
    rows: List[MetricRow] = []
    epochs: List[EpochRecord] = []
    best_epoch: int = 0
    best_score: Optional[float] = None
    stop_epoch: int = 0
    early_stopped: bool = False
    best_checkpoints: List[str] = []
    skipped_utterances: int = 0

    @validator("rows")
    def _steps_increase(cls, rows):
        for previous, current in zip(rows, rows[1:]):
            if current.step <= previous.step:
                raise ValueError(f"metric step {current.step} follows {previous.step}")
        return rows

    @property
    def convergence_epoch(self) -> int:
        return self.best_epoch

    def window_ratio(self, which: str = "first") -> Optional[float]:
        """Mean aux/orig loss ratio over the first or the final epoch."""
        rows = [r for r in self.rows if r.ratio_aux_orig is not None]
        if not rows:
            return None
        epoch = rows[0].epoch if which == "first" else rows[-1].epoch
        window = [r.ratio_aux_orig for r in rows if r.epoch == epoch]
        return sum(window) / len(window)


class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    rows: int
    cols: int
    dtype: str
    offset: int


class CheckpointManifest(BaseModel):
    model_config: ModelConfig
    seed: int
    stage: Stage
    tensors: List[TensorEntry]

    def layout(self) -> List[tuple]:
        return [(t.name, tuple(t.shape), t.dtype) for t in self.tensors]


class TransferReport(BaseModel):
    """Which pre-trained tensors were copied into the fine-tuning model."""

    from_asr: List[str] = []
    from_mt: List[str] = []

    @property
    def count(self) -> int:
        return len(self.from_asr) + len(self.from_mt)
