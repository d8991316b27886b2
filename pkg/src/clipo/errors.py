"""Exception hierarchy shared by every module."""


class ClipoError(Exception):
    """Base class for all library errors."""


class DimensionError(ClipoError, ValueError):
    pass


class NumericDomainError(ClipoError, ValueError):
    pass


class EmptyReductionError(ClipoError, ValueError):
    pass


class DegenerateEmbeddingError(ClipoError, ValueError):
    """Raised when a vector is too close to zero to be normalized."""


class ContractError(ClipoError, ValueError):
    """A caller violated an operation's precondition."""


class OptimizerError(ClipoError, RuntimeError):
    pass


class LengthError(ClipoError, ValueError):
    """Sequence longer than the model's positional table."""


class InvalidAnchorError(ClipoError, ValueError):
    pass


class GenerationError(ClipoError, RuntimeError):
    pass


class CheckpointError(ClipoError, IOError):
    pass


class ConfigError(ClipoError, ValueError):
    """Carries every offending key so the CLI can report them at once."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class NumericFailure(ClipoError, FloatingPointError):
    """Training produced a non-finite value."""
