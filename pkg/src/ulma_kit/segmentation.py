"""Vocal-pattern structure: comparator thresholding, burst detection,
ism/fil/harf decomposition, reaction classification, ULM scoring, and
height-reaction correlation.

A vocal pattern is read as: the ism is the dominant burst (the primary
message), the fil is the next burst after it (secondary context), the
harf is the faint residual level spanning the rest of the timeline, and
the chirps distance is the silent gap between ism offset and fil onset.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    InvalidLevelsError,
    InvalidThresholdsError,
    MissingClassError,
    NoIsmFoundError,
)
from .signal import AudioClip, Envelope, envelope

DEFAULT_BURST_ALPHA = 0.25
DEFAULT_MERGE_GAP_S = 0.03
DEFAULT_MIN_DUR_S = 0.05
DEFAULT_REACTION_HI = 0.6
DEFAULT_REACTION_LO = 0.2
# Envelope peak must exceed this multiple of the noise floor for a clip
# to carry any burst at all; rejects structureless noise-only input.
MIN_PEAK_FACTOR = 1.5


@dataclass
class ComparatorConfig:
    """Threshold and output levels for square-wave extraction."""

    v_th: float
    v_max: float
    v_min: float

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise InvalidLevelsError(
                f"v_min {self.v_min} must be below v_max {self.v_max}"
            )

    @property
    def mid(self) -> float:
        return (self.v_max + self.v_min) / 2.0


@dataclass(eq=False)
class BinaryWave:
    """Three-level square wave over {v_min, mid, v_max}."""

    values: np.ndarray
    rate: float


@dataclass
class Burst:
    """A contiguous high-energy region of the envelope."""

    onset_s: float
    offset_s: float
    peak: float
    density: float  # mean envelope over the burst divided by its peak

    def __post_init__(self):
        if not self.onset_s < self.offset_s:
            raise ValueError("burst onset must precede offset")
        if self.peak <= 0:
            raise ValueError("burst peak must be positive")
        if not 0 < self.density <= 1:
            raise ValueError("burst density must lie in (0, 1]")

    @property
    def duration_s(self) -> float:
        return self.offset_s - self.onset_s


@dataclass
class VocalPattern:
    """Decomposition result: ism burst, optional fil burst, harf level,
    chirps gap, and fil/ism height ratio."""

    ism: Burst
    harf_level: float
    fil: Optional[Burst] = None
    chirps_s: Optional[float] = None
    height_ratio: Optional[float] = None


class Reaction(enum.Enum):
    STRONG_ENGAGEMENT = "StrongEngagement"
    MODERATE = "Moderate"
    LOW_INTEREST = "LowInterest"
    NO_CONTEXTUAL_RESPONSE = "NoContextualResponse"


@dataclass
class UlmConfig:
    """Squash function and chirps normalization for the ULM score."""

    squash: str = "logistic"  # logistic | identity | tanh
    chirps_norm: bool = True

    def __post_init__(self):
        if self.squash not in _SQUASH_FUNCTIONS:
            raise ValueError(f"unknown squash {self.squash!r}")


_SQUASH_FUNCTIONS = {
    "logistic": lambda x: 1.0 / (1.0 + np.exp(-x)),
    "identity": lambda x: x,
    "tanh": np.tanh,
}


@dataclass
class CorrelationReport:
    """Corpus-level summary of height ratios vs context labels."""

    mean_positive: float
    mean_negative: float
    threshold: float
    auc: float
    n_positive: int
    n_negative: int


def comparator(signal: Sequence[float], cfg: ComparatorConfig,
               rate_hz: float = 1.0) -> BinaryWave:
    """Extract a three-level square wave by thresholding each sample.

    out(t) = (v_max - v_min)/2 * sign(in(t) - v_th) + (v_max + v_min)/2,
    with sign(0) = 0, so samples exactly at threshold map to the mid
    level.  Evaluated by level selection so the output alphabet is
    exactly {v_min, mid, v_max} with no rounding residue.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise ValueError("signal is empty")
    out = np.where(x > cfg.v_th, cfg.v_max,
                   np.where(x < cfg.v_th, cfg.v_min, cfg.mid))
    return BinaryWave(values=out, rate=rate_hz)


def detect_bursts(env: Envelope, alpha: float = DEFAULT_BURST_ALPHA,
                  merge_gap_s: float = DEFAULT_MERGE_GAP_S,
                  min_dur_s: float = DEFAULT_MIN_DUR_S) -> list[Burst]:
    """Find maximal envelope runs above an adaptive threshold.

    The threshold sits ``alpha`` of the way from the noise floor to the
    maximum.  Runs separated by less than ``merge_gap_s`` are merged;
    runs shorter than ``min_dur_s`` are dropped.  Result is sorted by
    onset and may be empty.
    """
    vals = env.values
    if vals.size == 0:
        raise ValueError("envelope is empty")
    threshold = env.noise_floor + alpha * (vals.max() - env.noise_floor)
    above = vals > threshold
    if not above.any():
        return []

    transitions = np.diff(above.astype(np.int8))
    starts = list(np.flatnonzero(transitions == 1) + 1)
    ends = list(np.flatnonzero(transitions == -1) + 1)
    if above[0]:
        starts.insert(0, 0)
    if above[-1]:
        ends.append(vals.size)
    runs = list(zip(starts, ends))

    merged: list[list[int]] = []
    for s, e in runs:
        if merged and (s - merged[-1][1]) * env.hop_s < merge_gap_s:
            merged[-1][1] = e
        else:
            merged.append([s, e])

    bursts = []
    for s, e in merged:
        if (e - s) * env.hop_s < min_dur_s:
            continue
        segment = vals[s:e]
        peak = float(segment.max())
        bursts.append(
            Burst(
                onset_s=s * env.hop_s,
                offset_s=e * env.hop_s,
                peak=peak,
                density=float(segment.mean() / peak),
            )
        )
    return bursts


def decompose(clip: AudioClip, *, alpha: float = DEFAULT_BURST_ALPHA,
              merge_gap_s: float = DEFAULT_MERGE_GAP_S,
              min_dur_s: float = DEFAULT_MIN_DUR_S,
              window_s: float = 0.02, hop_s: float = 0.01,
              min_peak_factor: float = MIN_PEAK_FACTOR) -> VocalPattern:
    """Decompose a clip into its ism/fil/harf structure.

    The ism is the burst with maximum peak; the fil is the first burst
    after the ism offset, if any; the harf level is the median envelope
    over non-burst frames (0 when every frame is inside a burst).
    Raises NoIsmFoundError when no burst is detected, including the
    structureless case where the envelope never rises above
    ``min_peak_factor`` times its noise floor (pure noise clips).
    """
    env = envelope(clip, window_s=window_s, hop_s=hop_s)
    if env.values.max() < min_peak_factor * env.noise_floor:
        raise NoIsmFoundError(
            f"envelope of {clip.source_id or 'clip'} never rises above "
            f"the noise floor"
        )
    bursts = detect_bursts(env, alpha=alpha, merge_gap_s=merge_gap_s,
                           min_dur_s=min_dur_s)
    if not bursts:
        raise NoIsmFoundError(f"no burst detected in {clip.source_id or 'clip'}")

    peaks = [b.peak for b in bursts]
    ism = bursts[int(np.argmax(peaks))]
    fil = next((b for b in bursts if b.onset_s >= ism.offset_s), None)

    in_burst = np.zeros(env.values.size, dtype=bool)
    for b in bursts:
        lo = int(round(b.onset_s / env.hop_s))
        hi = int(round(b.offset_s / env.hop_s))
        in_burst[lo:hi] = True
    residual = env.values[~in_burst]
    harf_level = float(np.median(residual)) if residual.size else 0.0

    if fil is None:
        return VocalPattern(ism=ism, harf_level=harf_level)
    return VocalPattern(
        ism=ism,
        harf_level=harf_level,
        fil=fil,
        chirps_s=fil.onset_s - ism.offset_s,
        height_ratio=fil.peak / ism.peak,
    )


def height_ratio(pattern: VocalPattern) -> Optional[float]:
    """Fil peak over ism peak, or None when the fil is absent."""
    if pattern.fil is None:
        return None
    return pattern.fil.peak / pattern.ism.peak


def classify_reaction(ratio: Optional[float],
                      hi: float = DEFAULT_REACTION_HI,
                      lo: float = DEFAULT_REACTION_LO) -> Reaction:
    """Map a height ratio onto a contextual-reaction class."""
    if not (0 <= lo < hi <= 1):
        raise InvalidThresholdsError(f"require 0 <= lo < hi <= 1, got {lo}, {hi}")
    if ratio is None:
        return Reaction.NO_CONTEXTUAL_RESPONSE
    if ratio >= hi:
        return Reaction.STRONG_ENGAGEMENT
    if ratio >= lo:
        return Reaction.MODERATE
    return Reaction.LOW_INTEREST


def ulm_score(pattern: VocalPattern, cfg: UlmConfig,
              clip_dur_s: float) -> float:
    """Scalar pattern summary: harf_level * f(ism + chirps + fil).

    The chirps term is the gap in seconds, normalized by the clip
    duration when ``cfg.chirps_norm`` is on; fil and chirps contribute 0
    when the fil is absent.
    """
    if clip_dur_s <= 0:
        raise ValueError("clip duration must be positive")
    ism_term = pattern.ism.peak
    fil_term = pattern.fil.peak if pattern.fil is not None else 0.0
    if pattern.chirps_s is None:
        chirps_term = 0.0
    elif cfg.chirps_norm:
        chirps_term = pattern.chirps_s / clip_dur_s
    else:
        chirps_term = pattern.chirps_s
    squash = _SQUASH_FUNCTIONS[cfg.squash]
    return float(pattern.harf_level * squash(ism_term + chirps_term + fil_term))


def correlate_height_reactions(
    pairs: Sequence[tuple[float, str]],
) -> CorrelationReport:
    """Summarize how height ratios separate positive from negative
    context labels.

    AUC is the probability that a positive ratio exceeds a negative one
    (ties count one half).  The reported threshold maximizes balanced
    accuracy of the rule "positive iff ratio >= threshold"; ties go to
    the lower threshold.
    """
    positives = np.array([r for r, label in pairs if label == "positive"])
    negatives = np.array([r for r, label in pairs if label == "negative"])
    unknown = {label for _, label in pairs} - {"positive", "negative"}
    if unknown:
        raise ValueError(f"unknown labels: {sorted(unknown)}")
    if positives.size == 0 or negatives.size == 0:
        raise MissingClassError("need at least one pair of each label")

    diffs = positives[:, None] - negatives[None, :]
    auc = float(((diffs > 0).sum() + 0.5 * (diffs == 0).sum())
                / (positives.size * negatives.size))

    best_threshold = None
    best_balanced = -1.0
    for t in np.unique(np.concatenate([positives, negatives])):
        tpr = np.mean(positives >= t)
        tnr = np.mean(negatives < t)
        balanced = (tpr + tnr) / 2.0
        if balanced > best_balanced:
            best_balanced = balanced
            best_threshold = float(t)

    return CorrelationReport(
        mean_positive=float(positives.mean()),
        mean_negative=float(negatives.mean()),
        threshold=best_threshold,
        auc=auc,
        n_positive=int(positives.size),
        n_negative=int(negatives.size),
    )
