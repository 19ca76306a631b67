from typing import List

from pydantic import BaseModel, validator


class Run(BaseModel):
    """A maximal stretch of frames sharing one CTC label; ``end`` is inclusive."""

    label: int
    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start + 1


class AlignmentPath(BaseModel):
    """Per-frame CTC label ids with their run-length structure."""

    labels: List[int]
    runs: List[Run]

    @validator("runs")
    def _runs_partition_frames(cls, runs, values):
        labels = values.get("labels", [])
        cursor = 0
        for i, run in enumerate(runs):
            if run.start != cursor or run.end < run.start:
                raise ValueError(f"run {i} does not continue the partition at frame {cursor}")
            if i > 0 and runs[i - 1].label == run.label:
                raise ValueError(f"runs {i - 1} and {i} share label {run.label}")
            cursor = run.end + 1
        if cursor != len(labels):
            raise ValueError(f"runs cover {cursor} frames, path has {len(labels)}")
        return runs

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def run_labels(self) -> List[int]:
        return [run.label for run in self.runs]
