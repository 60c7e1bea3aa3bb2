"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class ContractError(ValueError):
    """A call violates an operation's contract (bad argument, bad state)."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class TapeError(RuntimeError):
    """Tape integrity violation (unknown node, wrong tape, unsupported grad)."""


class ConfigError(ValueError):
    """Invalid run configuration (unknown keys, bad values, missing files)."""


class CheckpointError(ValueError):
    """Malformed checkpoint file or missing/incompatible entries."""
