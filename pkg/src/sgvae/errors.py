"""Exception taxonomy shared across the package."""


class SgvaeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SgvaeError):
    """Operand shapes are incompatible."""


class DomainError(SgvaeError):
    """A value is outside the mathematical domain of an operation."""


class ContractError(SgvaeError):
    """An API precondition was violated."""


class CycleError(SgvaeError):
    """A dependency graph that must be acyclic contains a cycle."""


class ParentReferenceError(SgvaeError):
    """A variable names a parent that was never declared."""


class CapacityError(SgvaeError):
    """A size limit was exceeded (enumeration domain, split size, ...)."""


class FormatError(SgvaeError):
    """A file does not match its declared binary format."""


class LengthError(SgvaeError):
    """A file or buffer is shorter than its header promises."""


class TrainingDiverged(SgvaeError):
    """The training objective became non-finite."""
