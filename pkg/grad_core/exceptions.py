class GradCoreError(Exception):
    """Base class for errors raised by the autodiff engine."""


class ShapeError(GradCoreError, ValueError):
    pass


class NonFiniteError(GradCoreError, FloatingPointError):
    """A primitive produced NaN or Inf; never continue silently."""


class NonScalarLossError(GradCoreError, ValueError):
    pass


class LabelOutOfRange(GradCoreError, IndexError):
    pass
