"""Exception hierarchy shared by every glico module."""


class GlicoError(Exception):
    pass


class InvalidArgumentError(GlicoError, ValueError):
    pass


class DegenerateInputError(GlicoError, ValueError):
    """A vector with no defined direction (zero norm) was supplied."""


class DegeneratePairError(GlicoError, ValueError):
    """Two codes do not define a unique interpolation path (antipodes)."""


class CapacityError(GlicoError, ValueError):
    pass


class ShapeError(GlicoError, ValueError):
    pass


class ModeError(GlicoError, RuntimeError):
    pass


class MissingCodeError(GlicoError, KeyError):
    pass


class IntegrityError(GlicoError, IOError):
    pass


class ValidationError(GlicoError, ValueError):
    pass


class BindingError(GlicoError, ValueError):
    pass


class ConfigurationError(GlicoError, ValueError):
    pass


class InsufficientDataError(GlicoError, ValueError):
    pass


class NumericalError(GlicoError, ArithmeticError):
    pass
