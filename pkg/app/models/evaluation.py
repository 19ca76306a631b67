from typing import Dict, List, Optional

import pandas as pd
from pydantic import BaseModel, validator

from app.core.config import RunConfig
from app.models.losses import DivergenceKind

RESULT_COLUMNS = [
    "cell_id",
    "divergence",
    "alpha",
    "p_star",
    "seed",
    "dev_bleu",
    "test_bleu",
    "epochs",
    "avg_bleu",
    "ratio_first",
    "ratio_last",
    "label",
    "note",
]


class SweepCell(BaseModel):
    cell_id: str
    divergence: DivergenceKind
    alpha: float
    p_star: str
    seed: int
    single_branch: bool = False

    class Config:
        use_enum_values = True

    def run_config(self, base: RunConfig) -> RunConfig:
        return RunConfig(
            **{
                **base.dict(),
                "divergence": self.divergence,
                "alpha": self.alpha,
                "p_star": self.p_star,
                "seed": self.seed,
                "single_branch": self.single_branch,
            }
        )


class SweepSpec(BaseModel):
    """Grid over loss term, consistency weight, replacement probability and seed."""

    divergences: List[DivergenceKind] = list(DivergenceKind)
    alphas: List[float] = [0.0, 1.0, 5.0]
    p_stars: List[str] = ["0", "0.2", "0.6", "1.0", "dynamic"]
    seeds: List[int] = [1, 2, 3]
    include_baseline: bool = False

    @validator("p_stars", each_item=True)
    def _check_p_star(cls, value):
        if value != "dynamic" and not 0.0 <= float(value) <= 1.0:
            raise ValueError(f"p* {value} outside [0, 1]")
        return value

    @validator("alphas", each_item=True)
    def _check_alpha(cls, value):
        if value < 0:
            raise ValueError(f"alpha {value} is negative")
        return value

    def cells(self) -> List[SweepCell]:
        cells: Dict[str, SweepCell] = {}
        for kind in self.divergences:
            kind = DivergenceKind(kind)
            for alpha in self.alphas:
                # a cell without a loss term ignores alpha
                alpha = 0.0 if kind == DivergenceKind.NONE else alpha
                for p_star in self.p_stars:
                    for seed in self.seeds:
                        cell_id = f"{kind.value}_a{alpha:g}_p{p_star}"
                        cells[f"{cell_id}/{seed}"] = SweepCell(
                            cell_id=cell_id, divergence=kind, alpha=alpha, p_star=p_star, seed=seed
                        )
        if self.include_baseline:
            for seed in self.seeds:
                cells[f"baseline/{seed}"] = SweepCell(
                    cell_id="baseline",
                    divergence=DivergenceKind.NONE,
                    alpha=0.0,
                    p_star="0",
                    seed=seed,
                    single_branch=True,
                )
        return [cells[key] for key in sorted(cells)]


SWEEP_PRESETS: Dict[str, SweepSpec] = {
    "table2": SweepSpec(alphas=[1.0], p_stars=["0.2"]),
    "fig3": SweepSpec(divergences=[DivergenceKind.BI_KL], alphas=[1.0], p_stars=["0", "0.2", "0.6", "1.0"]),
    "fig4": SweepSpec(divergences=[DivergenceKind.BI_KL], alphas=[1.0, 5.0], p_stars=["0", "0.2", "dynamic"]),
    "table4": SweepSpec(
        divergences=[DivergenceKind.BI_KL], alphas=[1.0], p_stars=["dynamic"], include_baseline=True
    ),
    "acceptance": SweepSpec(
        divergences=[DivergenceKind.NONE, DivergenceKind.BI_KL], alphas=[1.0], p_stars=["dynamic"]
    ),
    "full": SweepSpec(include_baseline=True),
}


class ResultRow(BaseModel):
    cell_id: str
    divergence: str
    alpha: float
    p_star: str
    seed: int
    dev_bleu: Optional[float] = None
    test_bleu: Optional[float] = None
    epochs: Optional[int] = None
    ratio_first: Optional[float] = None
    ratio_last: Optional[float] = None
    label: str = ""
    note: str = ""

    @property
    def avg_bleu(self) -> Optional[float]:
        if self.dev_bleu is None or self.test_bleu is None:
            return None
        return (self.dev_bleu + self.test_bleu) / 2.0

    @property
    def completed(self) -> bool:
        return self.test_bleu is not None


class ResultTable(BaseModel):
    rows: List[ResultRow] = []

    def frame(self) -> pd.DataFrame:
        records = [dict(row.dict(), avg_bleu=row.avg_bleu) for row in self.rows]
        frame = pd.DataFrame(records, columns=RESULT_COLUMNS)
        return frame.sort_values(["cell_id", "seed"], kind="mergesort").reset_index(drop=True)

    def summary(self) -> pd.DataFrame:
        """Mean, min and max over seeds for every cell; failed seeds are excluded."""
        frame = self.frame()
        done = frame[frame["test_bleu"].notna()]
        grouped = done.groupby(["cell_id", "divergence", "alpha", "p_star"], sort=True)
        stats = grouped.agg(
            seeds=("seed", "count"),
            dev_bleu_mean=("dev_bleu", "mean"),
            test_bleu_mean=("test_bleu", "mean"),
            test_bleu_min=("test_bleu", "min"),
            test_bleu_max=("test_bleu", "max"),
            avg_bleu_mean=("avg_bleu", "mean"),
            epochs_mean=("epochs", "mean"),
        ).reset_index()
        failed = sorted(set(frame["cell_id"]) - set(stats["cell_id"]))
        if failed:
            notes = frame[frame["cell_id"].isin(failed)].drop_duplicates("cell_id")
            stats = pd.concat(
                [stats, notes[["cell_id", "divergence", "alpha", "p_star"]].assign(seeds=0)],
                ignore_index=True,
            )
        return stats.sort_values("cell_id", kind="mergesort").reset_index(drop=True)
