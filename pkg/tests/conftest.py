"""Shared synthetic-audio helpers for the test suite."""

import wave

import numpy as np
import pytest

from ulma_kit.signal import AudioClip


def make_tone(freq_hz, duration_s, rate=16000, amplitude=0.5, phase=0.0):
    """Pure sine tone as a float64 sample array."""
    t = np.arange(int(round(duration_s * rate))) / rate
    return amplitude * np.sin(2 * np.pi * freq_hz * t + phase)


def make_two_burst_clip(rate=16000, ism_amp=0.8, fil_amp=0.4, harf_amp=0.02,
                        ism_span=(0.2, 0.4), fil_span=(0.7, 0.8),
                        duration_s=1.0, source_id="two-burst"):
    """Clip with a loud burst, a later softer burst, and a faint
    background tone spanning the whole timeline."""
    n = int(round(duration_s * rate))
    t = np.arange(n) / rate
    x = harf_amp * np.sin(2 * np.pi * 220.0 * t)
    for (a, b), amp, freq in (
        (ism_span, ism_amp, 800.0),
        (fil_span, fil_amp, 1200.0),
    ):
        lo, hi = int(round(a * rate)), int(round(b * rate))
        x[lo:hi] = amp * np.sin(2 * np.pi * freq * t[lo:hi])
    return AudioClip(x, rate, source_id)


def write_pcm16_wav(path, samples, rate):
    """Write float samples in [-1, 1] as a mono 16-bit PCM WAV."""
    ints = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(int(rate))
        wav.writeframes(ints.astype("<i2").tobytes())


@pytest.fixture
def two_burst_clip():
    return make_two_burst_clip()
