"""Exception types shared across the package.

Every error raised by avmatch derives from AvmatchError so callers can
catch the whole family with one clause. Names mirror the failure they
signal; messages carry the offending value.
"""


class AvmatchError(Exception):
    """Base class for all avmatch errors."""


# --- vectors and stores -----------------------------------------------------

class ZeroVector(AvmatchError):
    """Normalization requested on a vector with (near-)zero L2 norm."""


class DimMismatch(AvmatchError):
    """Operands or stores disagree on embedding dimensionality."""


class DuplicateId(AvmatchError):
    """The same item id occurs more than once."""


class BadMagic(AvmatchError):
    """Store file does not start with the expected magic bytes."""


class VersionUnsupported(AvmatchError):
    """Store file declares a format version this build cannot read."""


class TruncatedFile(AvmatchError):
    """File ends before the declared record count, or carries trailing bytes."""


class IoFailure(AvmatchError):
    """Underlying filesystem operation failed."""


class BadConfig(AvmatchError):
    """Configuration values violate their documented constraints."""


# --- search -----------------------------------------------------------------

class EmptyCandidateSet(AvmatchError):
    """No store item passed the query filter."""


class UnknownId(AvmatchError):
    """Referenced item id does not exist in the store."""


class FilteredOut(AvmatchError):
    """Rank requested for a target the active filter excludes."""


# --- curation ---------------------------------------------------------------

class EmptyExemplars(AvmatchError):
    """Prompt construction needs at least one exemplar."""


class NoTags(AvmatchError):
    """Sentence templating needs at least one tag."""


class BackendUnavailable(AvmatchError):
    """Text-generation backend unreachable after retries."""


class EmptyCompletion(AvmatchError):
    """Text-generation backend returned no usable text."""


class NoFramesAvailable(AvmatchError):
    """Frame pool exhausted before every audio item received a frame."""


class InsufficientItems(AvmatchError):
    """Not enough items to carve out the requested splits."""


# --- training ---------------------------------------------------------------

class BatchMismatch(AvmatchError):
    """Contrastive loss got unequal audio/image batch sizes."""


class BadTemperature(AvmatchError):
    """Contrastive temperature must be strictly positive."""


class EmptyTrainingSet(AvmatchError):
    """fit() called with zero training pairs."""


class BadCheckpoint(AvmatchError):
    """Checkpoint file header is malformed."""


# --- evaluation -------------------------------------------------------------

class EmptyInput(AvmatchError):
    """Metric computed over an empty collection."""


class EmptyTestSet(AvmatchError):
    """Evaluation requested with no test pairs."""


# --- study ------------------------------------------------------------------

class InsufficientFrames(AvmatchError):
    """Candidate frame list smaller than the requested pool size."""


class PoolTooSmall(AvmatchError):
    """Study pool holds fewer frames than one session needs."""


class UnknownComparison(AvmatchError):
    """Vote references a comparison no open session contains."""


class DuplicateVote(AvmatchError):
    """A second vote arrived for an already-voted comparison."""


class BadArgs(AvmatchError):
    """Statistical test arguments outside their valid range."""
