from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import BaseModel, BaseSettings, Extra, ValidationError, root_validator, validator

try:
    from typing import Literal
except ImportError:  # pragma: no cover
    from typing_extensions import Literal  # type: ignore

from app.core.errors import ConfigError


class Settings(BaseSettings):  # type: ignore
    PROJECT_NAME: str = "TAB Speech Translation Toolkit"
    VERSION: str = "0.1.0"
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"
    OUTPUT_DIR: str = "runs"

    # Intra-op threads per process; sweeps parallelise across processes instead
    TORCH_THREADS: int = 1
    SWEEP_WORKERS: int = 0  # 0 derives the count from the machine

    # Enumeration budget for the brute-force CTC oracle
    MAX_ORACLE_PATHS: int = 400_000

    # Denominator floor of the relative error used by grad_check
    GRAD_CHECK_REL_FLOOR: float = 1e-2

    class Config:
        env_file = ".env"
        case_sensitive = True


settings = Settings()


PRESETS: Dict[str, Dict[str, Any]] = {
    "toy": {"peak_lr": 1e-3, "warmup": 400, "patience": 10, "average_best": 3},
    "paper": {"peak_lr": 7e-4, "warmup": 4000, "patience": 20, "average_best": 10},
}

DivergenceName = Literal["none", "jsd", "kl_orig_to_aux", "kl_aux_to_orig", "bi_kl"]


class RunConfig(BaseModel):
    """Flat experiment configuration. Every key has a default; unknown keys are rejected."""

    preset: Literal["toy", "paper"] = "toy"
    seed: int = 1
    precision: Literal["float32", "float64"] = "float32"
    data_dir: str = ""  # empty: corpus generated from the seed

    # corpus
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

    # model
    d_model: int = 64
    speech_layers: int = 2
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    dropout_pretrain: float = 0.1
    dropout_finetune: float = 0.15
    downsample: int = 4

    # optimisation
    batch_size: int = 32
    peak_lr: Optional[float] = None
    warmup: Optional[int] = None
    schedule: Literal["inverse_sqrt", "constant"] = "inverse_sqrt"
    adam_beta1: float = 0.9
    adam_beta2_asr: float = 0.98
    adam_beta2_mt: float = 0.997
    adam_beta2_st: float = 0.98
    adam_eps: float = 1e-8
    patience: Optional[int] = None
    average_best: Optional[int] = None
    asr_max_epochs: int = 40
    mt_max_epochs: int = 30
    st_max_epochs: int = 80

    # fine-tuning objective
    ctc_weight: float = 0.3
    alpha: float = 1.0
    divergence: DivergenceName = "bi_kl"
    p_star: str = "dynamic"
    gamma: float = 0.5
    upsilon_smoothing: float = 0.0
    entropy_mode: Literal["distribution", "gold_token"] = "distribution"
    kl_flip: bool = False
    cons_stop_gradient: Literal["none", "orig", "aux"] = "none"
    single_branch: bool = False
    label_smoothing: float = 0.1

    # evaluation
    beam: int = 5
    max_decode_len: int = 20

    class Config:
        extra = Extra.forbid
        validate_assignment = True

    @root_validator(skip_on_failure=True)
    def _apply_preset(cls, values):
        for key, value in PRESETS[values["preset"]].items():
            if values.get(key) is None:
                values[key] = value
        return values

    @validator("p_star")
    def _check_p_star(cls, value):
        if value == "dynamic":
            return value
        try:
            number = float(value)
        except ValueError:
            raise ValueError(f"p_star must be 'dynamic' or a number, got {value!r}")
        if not 0.0 <= number <= 1.0:
            raise ValueError(f"p_star must lie in [0, 1], got {number}")
        return repr(number)

    @validator(
        "dropout_pretrain", "dropout_finetune", "silence_prob", "upsilon_smoothing"
    )
    def _check_unit_interval(cls, value, field):
        if not 0.0 <= value < 1.0:
            raise ValueError(f"{field.name} must lie in [0, 1), got {value}")
        return value

    @validator("label_smoothing")
    def _check_smoothing(cls, value):
        if not 0.0 <= value < 1.0:
            raise ValueError(f"label_smoothing must lie in [0, 1), got {value}")
        return value

    @validator("alpha", "ctc_weight", "gamma", "noise_sigma")
    def _check_non_negative(cls, value, field):
        if value < 0:
            raise ValueError(f"{field.name} must be non-negative, got {value}")
        return value

    @validator(
        "warmup", "patience", "average_best", "batch_size", "beam", "downsample",
        "frames_per_unit",
    )
    def _check_positive(cls, value, field):
        if value is not None and value < 1:
            raise ValueError(f"{field.name} must be >= 1, got {value}")
        return value

    @validator("heads")
    def _check_heads(cls, value, values):
        if "d_model" in values and values["d_model"] % value != 0:
            raise ValueError(f"d_model {values['d_model']} is not divisible by heads {value}")
        return value

    @property
    def adam_betas(self) -> Dict[str, float]:
        return {"asr": self.adam_beta2_asr, "mt": self.adam_beta2_mt, "st": self.adam_beta2_st}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse flat ``key = value`` lines. ``#`` starts a comment."""
    entries: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{number}: empty key")
        if key not in RunConfig.__fields__:
            raise ConfigError(f"{source}:{number}: unknown config key {key!r}")
        if key in entries:
            raise ConfigError(f"{source}:{number}: duplicate config key {key!r}")
        entries[key] = value
    return entries


def build_config(entries: Dict[str, Any]) -> RunConfig:
    unknown = sorted(set(entries) - set(RunConfig.__fields__))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return RunConfig(**entries)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_config(
    path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """Read a config file (optional) and apply overrides such as the CLI seed."""
    entries: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        entries.update(parse_config_text(path.read_text(), source=str(path)))
    entries.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(entries)


def config_to_text(config: RunConfig, extra: Optional[Dict[str, Any]] = None) -> str:
    """Render the resolved config as a sorted key-value manifest."""
    items = dict(config.dict())
    items.update(extra or {})
    return "".join(f"{key} = {items[key]}\n" for key in sorted(items))
