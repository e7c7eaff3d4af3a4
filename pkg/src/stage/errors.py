"""Exception hierarchy.

Each error class carries the CLI exit code it maps to.
"""


class StageError(Exception):
    exit_code = 1


class ValidationError(StageError, ValueError):
    """Input violates a documented precondition."""


class ParseError(ValidationError):
    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class ShapeError(ValidationError):
    pass


class GraphError(ValidationError):
    pass


class DegenerateClassError(ValidationError):
    def __init__(self, stage, message=None):
        super().__init__(message or f"stage {stage} has training data from a single class")
        self.stage = stage


class NumericError(StageError, ArithmeticError):
    exit_code = 2


class DivergenceError(NumericError):
    def __init__(self, message, epoch=None, stage=None, layer=None):
        parts = [message]
        if epoch is not None:
            parts.append(f"epoch={epoch}")
        if stage is not None:
            parts.append(f"stage={stage}")
        if layer is not None:
            parts.append(f"layer={layer}")
        super().__init__(" ".join(parts))
        self.epoch = epoch
        self.stage = stage
        self.layer = layer


class CompletionError(NumericError):
    def __init__(self, row, message="non-finite decoder output"):
        super().__init__(f"{message} for row {row}")
        self.row = row


class ClassImbalanceWarning(UserWarning):
    pass
