"""Exception types raised across the package."""


class JointFlowError(Exception):
    """Base class for all package errors."""


class CutLocusError(JointFlowError, ValueError):
    """Two rotations are (numerically) antipodal, so the log map has no unique value."""


class TimeOutOfRange(JointFlowError, ValueError):
    pass


class DegenerateGeometry(JointFlowError, ValueError):
    pass


class EmptyInput(JointFlowError, ValueError):
    pass


class ShapeMismatch(JointFlowError, ValueError):
    pass


class WidthMismatch(JointFlowError, ValueError):
    pass


class EmptySurface(JointFlowError, ValueError):
    """The field has no sign change on the extraction grid."""


class BadImageShape(JointFlowError, ValueError):
    pass


class FractureFailed(JointFlowError, RuntimeError):
    pass


class TooFewParts(JointFlowError, ValueError):
    pass


class CorruptArchive(JointFlowError, IOError):
    pass


class DivergenceDetected(JointFlowError, RuntimeError):
    pass


class NonFiniteState(JointFlowError, FloatingPointError):
    pass
