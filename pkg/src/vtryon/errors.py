"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class InvalidLabelError(InvalidArgumentError):
    pass


class ShapeError(ValueError):
    pass


class ParseError(ValueError):
    pass


class PreconditionError(RuntimeError):
    pass
