"""Exception taxonomy.

Two broad families matter to callers: malformed inputs or files
(DataError) and mathematically undefined results (DegeneracyError).
The CLI maps them to distinct exit codes.
"""


class VoxcamError(Exception):
    """Base class for every error raised by this package."""


class DataError(VoxcamError):
    """Malformed input: bad shapes, bad files, bad arguments."""


class DegeneracyError(VoxcamError):
    """The requested quantity is undefined for this input."""


# -- shapes and arguments ----------------------------------------------------

class ShapeMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyInput(DataError):
    pass


class InvalidSpec(DataError):
    pass


class UnknownLayer(DataError):
    pass


class BadClass(DataError):
    pass


class BadLabel(DataError):
    pass


class EmptyRegion(DataError):
    pass


class TooFewSubjects(DataError):
    pass


class TooFewFolds(DataError):
    pass


# -- numerical degeneracies --------------------------------------------------

class DegenerateBatch(DegeneracyError):
    pass


class DegenerateVolume(DegeneracyError):
    pass


class DegenerateBackground(DegeneracyError):
    pass


class DegenerateDifferences(DegeneracyError):
    pass


class OneClassOnly(DegeneracyError):
    pass


# -- file formats ------------------------------------------------------------

class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class UnsupportedDatatype(DataError):
    pass


class UnsupportedDimensionality(DataError):
    pass


class VersionUnsupported(DataError):
    pass


class MissingTensor(DataError):
    pass


class DuplicateSubject(DataError):
    pass


class MissingColumn(DataError):
    pass
