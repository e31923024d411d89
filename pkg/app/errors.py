"""
Exception types shared by the services, routers and CLI.
"""
from typing import Optional


class AtomError(Exception):
    """Base class for every error raised on purpose by this package."""


class GraphFormatError(AtomError, ValueError):
    def __init__(self, message: str, path: Optional[str] = None, line_number: Optional[int] = None):
        self.path = path
        self.line_number = line_number
        where = ""
        if path is not None:
            where = f"{path}"
            if line_number is not None:
                where += f":{line_number}"
            where += ": "
        super().__init__(f"{where}{message}")


class InvalidNodeError(AtomError, ValueError):
    def __init__(self, node, node_count: int):
        self.node = node
        self.node_count = node_count
        super().__init__(f"Invalid node id {node!r} (graph has {node_count} nodes)")


class PreconditionError(AtomError, ValueError):
    pass


class ConfigError(AtomError, ValueError):
    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class UndefinedBoundError(AtomError, ValueError):
    pass


class CheckpointFormatError(AtomError, ValueError):
    pass


class NonFiniteError(AtomError, ArithmeticError):
    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        suffix = f" (step {step})" if step is not None else ""
        super().__init__(f"{message}{suffix}")


class TrainingDivergenceError(AtomError, ArithmeticError):
    pass


class ExperimentStageError(AtomError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
