"""Exception taxonomy shared across the package.

CLI exit codes map onto these classes: I/O errors -> 2, divergence -> 3,
contract violations -> 4, empty/invalid input -> 5.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """A value is outside the mathematical domain of the operation."""


class CapacityError(ValueError):
    """A requested subsample exceeds what the source can supply."""


class ContractError(ValueError):
    """An explicit interface contract was violated (weights, norms, config)."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values where finiteness is required."""


class InvalidInputError(ValueError):
    """Malformed, empty, or unparseable input artifact (file, schema)."""


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, batch: int):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}")


class AdaptationDiverged(RuntimeError):
    """Stability objective became non-finite during weight adaptation."""

    def __init__(self, epoch: int, batch: int):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"adaptation diverged at epoch {epoch}, batch {batch}")
