"""Typed errors shared across the engine.

Parsers must be total: any malformed input maps to one of these instead of
an uncaught exception.
"""


class DissectError(Exception):
    """Base class for all engine errors."""


# --- binary format parsing -------------------------------------------------

class FormatError(DissectError):
    """Base class for file-format parse/serialize failures."""


class MalformedHeader(FormatError):
    pass


class UnsupportedElementType(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class BadMagic(FormatError):
    pass


class UnsupportedDatatype(FormatError):
    pass


class NonInvertibleOrientation(FormatError):
    pass


# --- manifest --------------------------------------------------------------

class SchemaViolation(DissectError):
    def __init__(self, line_no: int, field: str, message: str = ""):
        self.line_no = line_no
        self.field = field
        detail = f": {message}" if message else ""
        super().__init__(f"line {line_no}, field '{field}'{detail}")


class DuplicateSampleId(DissectError):
    pass


# --- preprocessing ---------------------------------------------------------

class DegenerateCentroids(DissectError):
    pass


class LabelNotFound(DissectError):
    pass


class TangentDegenerate(DissectError):
    pass


# --- dissection core -------------------------------------------------------

class EmptyDataset(DissectError):
    pass


class ShapeMismatch(DissectError):
    pass


class DimensionMismatch(DissectError):
    pass


class NoPositiveSamples(DissectError):
    pass


class MissingPredictions(DissectError):
    pass


class SingleClassDataset(DissectError):
    pass


# --- reporting -------------------------------------------------------------

class SampleMismatch(DissectError):
    pass


class MixedDimensions(DissectError):
    pass


class UnknownSample(DissectError):
    pass


class IoFailure(DissectError):
    pass


# --- serving ---------------------------------------------------------------

class MissingArtifact(DissectError):
    pass


class BadQueryParameter(DissectError):
    pass


# --- synthetic benchmark ---------------------------------------------------

class InvalidSpec(DissectError):
    pass


class TooLarge(DissectError):
    pass
