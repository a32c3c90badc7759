"""Exception hierarchy shared by every module of the package."""


class VitPruneError(Exception):
    """Base class for all errors raised by vitprune."""


class DimensionError(VitPruneError, ValueError):
    """Array shapes do not agree with each other or with a model config."""


class NonFiniteError(VitPruneError, FloatingPointError):
    """A kernel produced or received NaN/Inf values."""


class ContractError(VitPruneError, ValueError):
    """A caller violated an operation's precondition."""


class BudgetError(VitPruneError, ValueError):
    """A sparsity budget is out of range or inconsistent with a mask."""


class DegenerateHeadError(VitPruneError, ValueError):
    """Head outputs carry no usable direction (all heads have zero norm)."""


class ConvergenceError(VitPruneError, RuntimeError):
    """Power iteration did not reach the requested tolerance."""

    def __init__(self, message, delta=None, n_iter=None):
        super().__init__(message)
        self.delta = delta
        self.n_iter = n_iter


class DivergenceError(VitPruneError, FloatingPointError):
    """Training produced non-finite values; carries the epoch and step."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class CheckpointError(VitPruneError):
    """Base class for checkpoint read failures."""


class CheckpointFormatError(CheckpointError, ValueError):
    """Bad magic bytes or malformed header."""


class CheckpointTruncatedError(CheckpointError, EOFError):
    """The payload ended before a declared record was complete."""


class CheckpointDimensionError(CheckpointError, DimensionError):
    """Header or tensor dimensions disagree with the expected config."""


class ConfigError(VitPruneError, ValueError):
    """Invalid experiment or model configuration."""


class DataFormatError(VitPruneError, ValueError):
    """Dataset files are malformed (wrong size, bad labels)."""
