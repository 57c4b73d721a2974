"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Array shapes do not line up."""


class FormatError(ValueError):
    """A binary file could not be decoded.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    """Bad user configuration (unknown names, missing files, mismatched dims)."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}: {loss!r}")
        self.step = step
        self.loss = loss
