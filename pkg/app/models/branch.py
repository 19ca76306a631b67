from typing import List, Optional

import torch
from pydantic import BaseModel, validator

try:
    from typing import Literal
except ImportError:  # pragma: no cover
    from typing_extensions import Literal  # type: ignore


class ReplacePolicy(BaseModel):
    """How the replacement probability p* is chosen at each step."""

    mode: Literal["fixed", "dynamic"] = "fixed"
    value: float = 0.0
    gamma: float = 0.5

    @validator("value")
    def _check_value(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"fixed replacement probability must lie in [0, 1], got {value}")
        return value

    @classmethod
    def from_setting(cls, p_star: str, gamma: float = 0.5) -> "ReplacePolicy":
        if p_star == "dynamic":
            return cls(mode="dynamic", gamma=gamma)
        return cls(mode="fixed", value=float(p_star), gamma=gamma)

    @property
    def label(self) -> str:
        return "dynamic" if self.mode == "dynamic" else f"{self.value:g}"


class BranchPair(BaseModel):
    """Shrunk original branch ``o`` and auxiliary branch ``a`` of one utterance."""

    o: torch.Tensor
    a: torch.Tensor
    labels: List[int]
    replace_mask: List[bool]
    p_star_used: float
    blank_id: Optional[int] = None

    class Config:
        arbitrary_types_allowed = True

    @property
    def replaced(self) -> int:
        return sum(self.replace_mask)

    @property
    def replaceable(self) -> int:
        return sum(1 for label in self.labels if label != self.blank_id)
