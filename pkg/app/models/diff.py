from typing import Dict, List

from pydantic import BaseModel


class ParamCheck(BaseModel):
    """Finite-difference comparison for one named parameter."""

    name: str
    shape: List[int]
    entries_checked: int
    max_rel_error: float
    max_abs_error: float


class GradCheckReport(BaseModel):
    eps: float
    tol: float
    loss: float
    params: List[ParamCheck] = []
    passed: bool = False

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def by_name(self) -> Dict[str, ParamCheck]:
        return {p.name: p for p in self.params}
