"""Shared exception hierarchy.

The CLI maps ``N2NError`` (and subclasses) to exit code 2; anything else
is a bug and propagates.
"""


class N2NError(Exception):
    """Base class for data/contract errors raised by this package."""


class ContractError(N2NError):
    """An operation precondition was violated by the caller."""


class ConfigError(N2NError):
    """Invalid or inconsistent run configuration."""


class FormatError(N2NError):
    """A file does not conform to its expected on-disk format."""


class TrainingDiverged(N2NError):
    """A loss became non-finite during optimization."""

    def __init__(self, step, losses):
        self.step = step
        self.losses = losses
        super().__init__(
            f"non-finite loss at step {step}: "
            + ", ".join(f"{k}={v}" for k, v in losses.items())
        )
