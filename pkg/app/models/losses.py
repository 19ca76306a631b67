from enum import Enum

from pydantic import BaseModel, root_validator


class DivergenceKind(str, Enum):
    NONE = "none"
    JSD = "jsd"
    KL_ORIG_TO_AUX = "kl_orig_to_aux"
    KL_AUX_TO_ORIG = "kl_aux_to_orig"
    BI_KL = "bi_kl"


class LossBreakdown(BaseModel):
    """Components of the fine-tuning loss for one batch."""

    ce_o: float
    ce_a: float = 0.0
    ctc: float = 0.0
    cons: float = 0.0
    ctc_weight: float
    alpha: float
    total: float

    @root_validator(skip_on_failure=True)
    def _check_identity(cls, values):
        for key in ("ce_o", "ce_a", "ctc", "cons"):
            if values[key] < 0:
                raise ValueError(f"loss component {key} is negative: {values[key]}")
        expected = (
            values["ce_o"]
            + values["ce_a"]
            + values["ctc_weight"] * values["ctc"]
            + values["alpha"] * values["cons"]
        )
        if abs(expected - values["total"]) > 1e-9:
            raise ValueError(f"total {values['total']} != sum of weighted parts {expected}")
        return values

    @property
    def ratio_aux_orig(self) -> float:
        return self.ce_a / self.ce_o if self.ce_o > 0 else float("nan")
