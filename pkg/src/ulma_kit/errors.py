"""Exception types raised across the toolkit.

Every toolkit-specific failure derives from :class:`UlmaKitError` so batch
front ends can catch one base class and keep going.
"""


class UlmaKitError(Exception):
    """Base class for all ulma-kit errors."""


# --- audio ingestion / feature extraction ---

class UnsupportedFormatError(UlmaKitError):
    """WAV file is not mono 16-bit PCM in the supported rate range."""


class CorruptHeaderError(UlmaKitError):
    """File is not a readable RIFF/WAVE container."""


class EmptyAudioError(UlmaKitError):
    """WAV file contains zero samples."""


class ClipTooShortError(UlmaKitError):
    """Clip is shorter than one analysis frame / receptive field."""


# --- segmentation ---

class InvalidLevelsError(UlmaKitError):
    """Comparator levels violate v_min < v_max."""


class NoIsmFoundError(UlmaKitError):
    """No burst detected; the clip carries no primary component."""


class InvalidThresholdsError(UlmaKitError):
    """Reaction thresholds violate 0 <= lo < hi <= 1."""


class MissingClassError(UlmaKitError):
    """Correlation input lacks one of the two context classes."""


# --- harf synthesis ---

class DegenerateSpanError(UlmaKitError):
    """Anchor abscissas do not satisfy t1 < t2."""


class InfeasibleLengthError(UlmaKitError):
    """Target cable length is shorter than the anchor chord."""


class NoConvergenceError(UlmaKitError):
    """Iteration budget exhausted before reaching tolerance."""


class BadSampleCountError(UlmaKitError):
    """Curve rendering needs at least two sample points."""


# --- unit discovery ---

class TooFewPointsError(UlmaKitError):
    """Fewer data points than requested clusters."""


class DimMismatchError(UlmaKitError):
    """Feature dimension does not match the codebook dimension."""


class LayerOutOfRangeError(UlmaKitError):
    """Requested hidden layer index exceeds the encoder depth."""


# --- encoder / training ---

class OddDimError(UlmaKitError):
    """Positional encoding requires an even model dimension."""


class ShapeMismatchError(UlmaKitError):
    """Attention operands are not conformable."""


class RateMismatchError(UlmaKitError):
    """Clip sample rate differs from the encoder configuration."""


class EmptyMaskError(UlmaKitError):
    """Mask sampling selected no positions; caller should retry."""


class LabelOutOfRangeError(UlmaKitError):
    """A target label index exceeds the class/unit count."""


class EmptySequenceError(UlmaKitError):
    """Pooling over zero frames is undefined."""


class TargetLengthMismatchError(UlmaKitError):
    """Detection target vector length differs from the class count."""


class NonFiniteLossError(UlmaKitError):
    """Loss evaluated to NaN or infinity during gradient checking."""


# --- reward model ---

class EmptyDatasetError(UlmaKitError):
    """Training requires at least one preference pair."""


# --- CLI / persistence ---

class MalformedLineError(UlmaKitError):
    """A manifest line is not a valid JSON object."""

    def __init__(self, line_no: int, reason: str = ""):
        self.line_no = line_no
        msg = f"malformed manifest line {line_no}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class MissingPathError(UlmaKitError):
    """A manifest entry lacks the mandatory 'path' field."""

    def __init__(self, line_no: int):
        self.line_no = line_no
        super().__init__(f"manifest line {line_no} has no 'path' field")


class VersionMismatchError(UlmaKitError):
    """Artifact file version does not match this toolkit version."""
