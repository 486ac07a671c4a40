"""Exception hierarchy shared by every pipeline stage."""


class KickDirError(Exception):
    """Base class for all errors raised by kickdir."""


class InputError(KickDirError):
    """Bad or missing input data; the CLI maps these to exit code 1."""


class PipelineError(KickDirError):
    """Failure while running a stage; the CLI maps these to exit code 2."""


# dataset
class MissingFile(InputError):
    pass


class MalformedRow(InputError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicateClipId(InputError):
    pass


class UnknownEnumValue(InputError):
    def __init__(self, line: int, field: str, value: str):
        super().__init__(f"line {line}: unknown {field} value {value!r}")
        self.line = line
        self.field = field
        self.value = value


class EmptyResult(InputError):
    pass


# preprocess
class EmptyInput(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class MissingBox(InputError):
    def __init__(self, frame_index: int):
        super().__init__(f"no bounding box for frame {frame_index}")
        self.frame_index = frame_index


class BoxOutOfBounds(InputError):
    pass


class InsufficientTail(InputError):
    pass


class InvalidKickIndex(InputError):
    pass


# embedding
class BackendUnavailable(PipelineError):
    pass


class MissingPrecomputedEntry(InputError):
    def __init__(self, clip_id: str, stage: str, chunk_index: int):
        super().__init__(f"no precomputed embedding for ({clip_id!r}, {stage}, {chunk_index})")
        self.clip_id = clip_id
        self.stage = stage
        self.chunk_index = chunk_index


class EmptySet(InputError):
    pass


class BadMagic(InputError):
    pass


class TruncatedFile(InputError):
    def __init__(self, offset: int, message: str = ""):
        super().__init__(f"file truncated at byte offset {offset}" + (f": {message}" if message else ""))
        self.offset = offset


class ChecksumMismatch(InputError):
    pass


# classifier
class InvalidDimensions(InputError):
    pass


class NonFiniteActivation(PipelineError):
    pass


class EmptyBatch(InputError):
    pass


class ZeroProbability(PipelineError):
    pass


class MissingClass(InputError):
    pass


class NonFiniteGradient(PipelineError):
    pass


class Divergence(PipelineError):
    pass


class EmptySplit(InputError):
    pass


# evaluation
class TooFewSamples(InputError):
    pass


class LengthMismatch(InputError):
    pass


class NoAnnotations(InputError):
    pass


class IncomparableResults(InputError):
    pass


class EmptyFamily(InputError):
    pass
