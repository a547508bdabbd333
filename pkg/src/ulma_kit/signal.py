"""Audio ingestion, framing, spectral features and amplitude envelopes.

All waveforms are mono float64 with amplitudes in [-1, 1].  Feature
defaults follow a fixed recipe (25 ms Hamming frames, 10 ms hop, 26
triangular mel filters on the HTK scale, 13 cepstra with c0 replaced by
log frame energy, +/-2-frame delta regression) so downstream tests are
bit-stable.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .errors import (
    ClipTooShortError,
    CorruptHeaderError,
    EmptyAudioError,
    UnsupportedFormatError,
)

MIN_SAMPLE_RATE = 8000
MAX_SAMPLE_RATE = 48000
PCM16_SCALE = 32768.0

DEFAULT_FRAME_S = 0.025
DEFAULT_HOP_S = 0.010
MFCC_DIM = 39
DELTA_WINDOW = 2


@dataclass(eq=False)
class AudioClip:
    """Mono waveform plus its sample rate and an opaque source id."""

    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("samples must be a 1-D sequence")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0:
            raise ValueError("sample amplitudes must lie in [-1, 1]")
        if not MIN_SAMPLE_RATE <= int(self.sample_rate) <= MAX_SAMPLE_RATE:
            raise ValueError(
                f"sample_rate {self.sample_rate} outside "
                f"[{MIN_SAMPLE_RATE}, {MAX_SAMPLE_RATE}]"
            )
        self.sample_rate = int(self.sample_rate)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureConfig:
    """Framing and filterbank parameters for spectral features.

    ``window`` may be set to ``"rectangular"`` for diagnostic spectra;
    the default analysis window is Hamming.
    """

    frame_len: int
    hop: int
    n_fft: int
    n_mels: int = 26
    n_ceps: int = 13
    pre_emphasis: float = 0.97
    energy_floor: float = 1e-10
    window: str = "hamming"

    def __post_init__(self):
        if not (0 < self.hop <= self.frame_len <= self.n_fft):
            raise ValueError("require 0 < hop <= frame_len <= n_fft")
        if self.n_fft & (self.n_fft - 1):
            raise ValueError("n_fft must be a power of two")
        if self.n_ceps > self.n_mels:
            raise ValueError("n_ceps must not exceed n_mels")
        if self.energy_floor <= 0:
            raise ValueError("energy_floor must be positive")
        if self.window not in ("hamming", "rectangular"):
            raise ValueError(f"unknown window {self.window!r}")

    @classmethod
    def for_rate(cls, sample_rate: int, frame_s: float = DEFAULT_FRAME_S,
                 hop_s: float = DEFAULT_HOP_S, **kwargs) -> "FeatureConfig":
        """Build a config with frame/hop given in seconds at ``sample_rate``."""
        frame_len = int(round(frame_s * sample_rate))
        hop = int(round(hop_s * sample_rate))
        n_fft = 1
        while n_fft < frame_len:
            n_fft *= 2
        return cls(frame_len=frame_len, hop=hop, n_fft=n_fft, **kwargs)


@dataclass(eq=False)
class FeatureMatrix:
    """Frames x 39 features: 13 statics (col 0 = log-energy), 13 deltas,
    13 delta-deltas."""

    values: np.ndarray
    hop_s: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != MFCC_DIM:
            raise ValueError(f"feature matrix must have {MFCC_DIM} columns")

    @property
    def rows(self) -> int:
        return self.values.shape[0]


@dataclass(eq=False)
class Envelope:
    """Windowed-RMS amplitude track at hop rate."""

    values: np.ndarray
    hop_s: float
    noise_floor: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("envelope values must be 1-D")
        if self.values.size and self.values.min() < 0:
            raise ValueError("envelope values must be nonnegative")


def load_wav(path) -> AudioClip:
    """Load a mono 16-bit PCM RIFF/WAVE file.

    Samples are scaled by 1/32768 so the full int16 range maps into
    (-1, 1).  Anything other than mono 16-bit PCM at 8-48 kHz is
    rejected.
    """
    try:
        with wave.open(str(path), "rb") as wav:
            n_channels = wav.getnchannels()
            samp_width = wav.getsampwidth()
            comp_type = wav.getcomptype()
            rate = wav.getframerate()
            n_frames = wav.getnframes()
            raw = wav.readframes(n_frames)
    except wave.Error as exc:
        if "unknown format" in str(exc):
            raise UnsupportedFormatError(f"{path}: non-PCM encoding") from exc
        raise CorruptHeaderError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise CorruptHeaderError(f"{path}: truncated header") from exc

    if comp_type != "NONE":
        raise UnsupportedFormatError(f"{path}: compressed WAV not supported")
    if n_channels != 1:
        raise UnsupportedFormatError(f"{path}: {n_channels} channels, need mono")
    if samp_width != 2:
        raise UnsupportedFormatError(f"{path}: {8 * samp_width}-bit, need 16-bit")
    if not MIN_SAMPLE_RATE <= rate <= MAX_SAMPLE_RATE:
        raise UnsupportedFormatError(f"{path}: sample rate {rate} out of range")
    if n_frames == 0:
        raise EmptyAudioError(f"{path}: no samples")

    ints = np.frombuffer(raw, dtype="<i2")
    return AudioClip(ints.astype(np.float64) / PCM16_SCALE, rate, str(path))


def normalize_clip(clip: AudioClip, target_peak: float = 0.9) -> AudioClip:
    """Rescale so the absolute peak equals ``target_peak``.

    All-zero input is returned unchanged (no peak to normalize).
    """
    if clip.samples.size == 0:
        raise ValueError("clip is empty")
    peak = np.max(np.abs(clip.samples))
    if peak == 0.0:
        return AudioClip(clip.samples.copy(), clip.sample_rate, clip.source_id)
    scaled = clip.samples * (target_peak / peak)
    return AudioClip(scaled, clip.sample_rate, clip.source_id)


def _frame_signal(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """Slice ``x`` into overlapping frames; the final partial frame is
    dropped so frame counts are deterministic."""
    if x.size < frame_len:
        raise ClipTooShortError(
            f"need at least {frame_len} samples, got {x.size}"
        )
    n_frames = 1 + (x.size - frame_len) // hop
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def _window(cfg: FeatureConfig) -> np.ndarray:
    if cfg.window == "rectangular":
        return np.ones(cfg.frame_len)
    return np.hamming(cfg.frame_len)


def _power_frames(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    frames = _frame_signal(x, cfg.frame_len, cfg.hop) * _window(cfg)
    spectrum = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    return np.abs(spectrum) ** 2


def power_spectrogram(clip: AudioClip, cfg: FeatureConfig) -> np.ndarray:
    """Squared-magnitude DFT per windowed frame.

    Returns a frames x (n_fft/2 + 1) matrix; frame t covers samples
    [t*hop, t*hop + frame_len), zero-padded to n_fft.
    """
    return _power_frames(clip.samples, cfg)


def _pre_emphasize(x: np.ndarray, coeff: float) -> np.ndarray:
    if coeff <= 0.0:
        return x.copy()
    return np.concatenate(([x[0]], x[1:] - coeff * x[:-1]))


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular filters (n_mels x n_fft/2+1) equally spaced on the HTK
    mel scale between 0 Hz and Nyquist."""
    mel_points = np.linspace(
        _hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_mels + 2
    )
    bins = np.floor((n_fft + 1) * _mel_to_hz(mel_points) / sample_rate).astype(int)
    fbank = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(1, n_mels + 1):
        left, center, right = bins[m - 1], bins[m], bins[m + 1]
        for k in range(left, center):
            if center > left:
                fbank[m - 1, k] = (k - left) / (center - left)
        for k in range(center, right):
            if right > center:
                fbank[m - 1, k] = (right - k) / (right - center)
    return fbank


def _delta(feat: np.ndarray, n: int = DELTA_WINDOW) -> np.ndarray:
    """Regression-slope deltas over a +/-n frame window, edges replicated."""
    padded = np.concatenate(
        [np.repeat(feat[:1], n, axis=0), feat, np.repeat(feat[-1:], n, axis=0)]
    )
    denom = 2.0 * sum(j * j for j in range(1, n + 1))
    num = sum(
        j * (padded[n + j: padded.shape[0] - n + j] - padded[n - j: -n - j])
        for j in range(1, n + 1)
    )
    return num / denom


def mfcc39(clip: AudioClip, cfg: FeatureConfig) -> FeatureMatrix:
    """39-dimensional MFCC features: 13 statics + deltas + delta-deltas.

    Pipeline: pre-emphasis, Hamming framing, power spectrum, mel
    filterbank, log with floor clamp, orthonormal DCT-II; c0 is replaced
    by the log of the raw frame energy.
    """
    emphasized = _pre_emphasize(clip.samples, cfg.pre_emphasis)
    frames = _frame_signal(emphasized, cfg.frame_len, cfg.hop)
    energy = np.maximum(np.sum(frames**2, axis=1), cfg.energy_floor)

    power = np.abs(np.fft.rfft(frames * _window(cfg), n=cfg.n_fft, axis=1)) ** 2
    fbank = mel_filterbank(clip.sample_rate, cfg.n_fft, cfg.n_mels)
    mel_energy = np.maximum(power @ fbank.T, cfg.energy_floor)
    ceps = dct(np.log(mel_energy), type=2, norm="ortho", axis=1)[:, : cfg.n_ceps]
    ceps[:, 0] = np.log(energy)

    d1 = _delta(ceps)
    d2 = _delta(d1)
    return FeatureMatrix(
        np.hstack([ceps, d1, d2]), hop_s=cfg.hop / clip.sample_rate
    )


def envelope(clip: AudioClip, window_s: float = 0.02,
             hop_s: float = 0.01) -> Envelope:
    """Windowed-RMS envelope; noise floor = 10th percentile of values."""
    win = int(round(window_s * clip.sample_rate))
    hop = int(round(hop_s * clip.sample_rate))
    if win < 1:
        raise ValueError("window shorter than one sample")
    hop = max(hop, 1)
    frames = _frame_signal(clip.samples, win, hop)
    values = np.sqrt(np.mean(frames**2, axis=1))
    return Envelope(
        values=values,
        hop_s=hop / clip.sample_rate,
        noise_floor=float(np.percentile(values, 10)),
    )
