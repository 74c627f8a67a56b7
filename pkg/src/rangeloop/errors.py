"""Exception types shared across the package.

The CLI maps these onto exit codes: contract/shape/config errors exit 2,
degenerate-input reports exit 3.
"""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ShapeError(ContractError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ContractError):
    """A configuration object is internally inconsistent."""


class DegenerateInputError(RuntimeError):
    """Input is structurally valid but carries no usable information
    (e.g. an evaluation set with no positives)."""
