"""Exception hierarchy. Every error raised on purpose derives from ``HybridSeqError``."""


class HybridSeqError(ValueError):
    pass


class ShapeError(HybridSeqError):
    pass


class NonFiniteError(HybridSeqError):
    pass


class DegenerateRowError(HybridSeqError):
    def __init__(self, row: int, detail: str = "every entry is masked"):
        self.row = row
        super().__init__(f"degenerate softmax row {row}: {detail}")


class SegmentError(HybridSeqError):
    pass


class ConfigError(HybridSeqError):
    pass


class ScheduleError(HybridSeqError):
    """Schedule strings and schedule/model mismatches."""


class ScheduleSyntaxError(ScheduleError):
    pass


class UnknownModeError(ScheduleSyntaxError):
    pass


class RateRangeError(ScheduleSyntaxError):
    pass


class LayerOrderError(ScheduleSyntaxError):
    pass


class LayerRangeError(ScheduleError):
    pass


class MissingScoresError(HybridSeqError):
    pass


class BlockingError(HybridSeqError):
    pass


class CaptureError(HybridSeqError):
    pass


class LayerKindError(HybridSeqError):
    pass


class MergeError(HybridSeqError):
    pass
