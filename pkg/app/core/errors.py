from typing import Optional, Sequence, Tuple


class TabError(Exception):
    """Base class for every error raised by the toolkit."""


class ShapeError(TabError):
    def __init__(self, op: str, shapes: Sequence[Tuple[int, ...]], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        message = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class GraphError(TabError):
    """Raised when backward is requested on something that is not a scalar graph root."""


class NondeterministicBuilderError(TabError):
    def __init__(self, first: float, second: float):
        self.first = first
        self.second = second
        super().__init__(
            f"loss builder is not deterministic: two forwards gave {first!r} and {second!r}"
        )


class InfeasibleAlignmentError(TabError):
    def __init__(self, label_len: int, frames: int, index: Optional[int] = None):
        self.label_len = label_len
        self.frames = frames
        self.index = index
        where = f" (utterance {index})" if index is not None else ""
        super().__init__(
            f"no CTC alignment of {label_len} labels into {frames} frames{where}"
        )


class OracleTooLargeError(TabError):
    pass


class VocabError(TabError):
    pass


class ConfigError(TabError):
    pass


class DistributionError(TabError):
    """Raised when rows that should be probability distributions are not normalized."""


class NonFiniteGradientError(TabError):
    def __init__(self, step: int, names: Sequence[str]):
        self.step = step
        self.names = list(names)
        super().__init__(f"non-finite gradient at step {step} in {', '.join(self.names)}")


class TrainingDivergedError(TabError):
    def __init__(self, stage: str, step: int):
        self.stage = stage
        self.step = step
        super().__init__(f"{stage} training diverged (non-finite loss) at step {step}")


class CheckpointError(TabError):
    def __init__(self, message: str, tensor: Optional[str] = None):
        self.tensor = tensor
        super().__init__(message)
