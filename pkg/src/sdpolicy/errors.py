"""Exception types shared across the package."""


class SdpolicyError(Exception):
    """Base class for all package-specific errors."""


class ParseError(SdpolicyError):
    """A dataset file line could not be parsed; carries the 1-based line number."""

    def __init__(self, line_no, message):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class SchemaError(SdpolicyError):
    """A record or header violates the declared dataset schema."""


class ShapeError(SdpolicyError):
    """Array or vector dimensions do not match."""


class CapacityError(SdpolicyError):
    """A tabular computation would exceed the enforced size limits."""


class DomainError(SdpolicyError):
    """An argument is outside the mathematical domain of the operation."""


class NumericFault(SdpolicyError):
    """A non-finite value was produced; carries the name of the offending op."""

    def __init__(self, op_name, message=""):
        self.op_name = op_name
        super().__init__(f"non-finite value in op '{op_name}'" + (f": {message}" if message else ""))


class ConstructionError(SdpolicyError):
    """A synthetic environment spec is infeasible."""


class DegenerateLabelsError(SdpolicyError):
    """A metric that needs both classes was given single-class labels."""


class UsageError(SdpolicyError):
    """Bad command-line flags or config."""
