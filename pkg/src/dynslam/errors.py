"""Exception hierarchy shared by every module.

Each error carries the name of the module that raised it so the CLI can
prefix diagnostics consistently.
"""


class SlamError(Exception):
    module = "dynslam"


# geometry
class GeometryError(SlamError):
    module = "geometry"


class AngleNearPi(GeometryError):
    pass


class BehindCamera(GeometryError):
    pass


class NonPositiveDepth(GeometryError):
    pass


class InvalidPose(GeometryError):
    pass


# dataio
class DataError(SlamError):
    module = "dataio"


class MissingKey(DataError):
    pass


class NonPositiveValue(DataError):
    pass


class NonzeroDistortion(DataError):
    pass


class BadMagic(DataError):
    pass


class SizeMismatch(DataError):
    pass


class NegativeLabel(DataError):
    pass


class NonRigidRotation(DataError):
    pass


class BadFieldCount(DataError):
    pass


class EmptySequence(DataError):
    pass


class InconsistentResolution(DataError):
    pass


class MissingFlow(DataError):
    pass


# solver
class SolverError(SlamError):
    module = "solver"


class NumericalFailure(SolverError):
    pass


class NoConsensus(SolverError):
    pass


# frontend
class TrackingError(SlamError):
    module = "frontend"


class InsufficientCorrespondences(TrackingError):
    pass


class DegenerateGeometry(TrackingError):
    pass


class ConvergenceFailure(TrackingError):
    pass


# backend
class BackendError(SlamError):
    module = "backend"


class DisconnectedGraph(BackendError):
    pass


# metrics / evaluation
class MetricsError(SlamError):
    module = "metrics"


class EmptyInput(MetricsError):
    pass


class FrameMismatch(MetricsError):
    pass


# synth
class SynthError(SlamError):
    module = "synth"


class DegenerateSpec(SynthError):
    pass


class IoFailure(SlamError):
    module = "io"
