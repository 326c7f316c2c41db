"""Exception taxonomy shared across the toolkit.

Every failure mode that callers are expected to branch on gets its own
class; plain ValueError is reserved for programming mistakes that no
caller should catch.
"""


class StageAttackError(Exception):
    """Base class for all toolkit errors."""


# --- attention extraction ---

class AllZeroGrid(StageAttackError):
    """A spatial grid with no positive mass cannot be normalized."""


class LayerOutOfRange(StageAttackError):
    """Requested decoder layer does not exist in the trace."""


class TokenNotValid(StageAttackError):
    """Requested generation step is outside the trace's valid token set."""


class EmptyTokenSet(StageAttackError):
    """No maps to aggregate: the valid token (or input) set is empty."""


class GridMismatch(StageAttackError):
    """Grids with different dimensions cannot be combined."""


# --- region scheduling ---

class StageOutOfRange(StageAttackError):
    """Stage index outside [1, num_stages]."""


class AreaTooSmall(StageAttackError):
    """Area ratio rounds to a window with no cells."""


class BudgetTooSmall(StageAttackError):
    """Total iteration budget leaves zero iterations per scheduled region."""


class DegenerateRegion(StageAttackError):
    """A region with no extent cannot be cropped."""


# --- surrogate gateway ---

class EncoderUnavailable(StageAttackError):
    """A requested encoder backend is not attached or not reachable."""


class ShapeMismatch(StageAttackError):
    """Array argument has the wrong shape for the operation."""


class NonDifferentiableMember(StageAttackError):
    """Ensemble member cannot produce gradients."""


class UnknownKind(StageAttackError):
    """Unrecognized stub encoder kind."""


# --- attack engine ---

class BadPixelRange(StageAttackError):
    """Image values fall outside [0, 1]."""


class AttackAborted(StageAttackError):
    """An attack run failed partway; carries whatever trace was recorded."""

    def __init__(self, message, records=None, image=None):
        super().__init__(message)
        self.records = tuple(records or ())
        self.image = image


# --- analysis ---

class DegenerateVariance(StageAttackError):
    """Correlation is undefined when either sample has zero variance."""


# --- evaluation ---

class UnparseableReply(StageAttackError):
    """Judge reply contained no parseable score after retries."""


class OutOfRangeScore(StageAttackError):
    """Judge reply parsed to a number outside [0, 1]."""


class EmptyScores(StageAttackError):
    """Aggregate over an empty score collection."""


class MalformedRecord(StageAttackError):
    """A manifest or record line failed validation."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class MissingImage(StageAttackError):
    """Manifest references an image file that does not exist."""


# --- pipeline ---

class MissingArtifacts(StageAttackError):
    """A pipeline step requires artifacts that have not been produced yet."""


class MalformedRecords(StageAttackError):
    """A record file is empty, untagged, or fails schema validation."""
