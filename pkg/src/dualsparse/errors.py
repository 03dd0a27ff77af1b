"""Exception types raised across the package."""


class DualSparseError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DualSparseError, ValueError):
    pass


class DomainError(DualSparseError, ValueError):
    pass


class EmptyError(DualSparseError, ValueError):
    pass


class LogicError(DualSparseError, RuntimeError):
    """An internal hardware-model precondition was violated."""


class UnsupportedError(DualSparseError, NotImplementedError):
    pass


class BudgetError(DualSparseError, ValueError):
    pass


class CompileError(DualSparseError, ValueError):
    pass


class ModelFormatError(DualSparseError, ValueError):
    pass


class ContractViolation(DualSparseError, RuntimeError):
    """A producer/consumer contract (capacity, handshake) was broken."""


class TrainingError(DualSparseError, RuntimeError):
    pass
