"""Audio clips, 16-bit PCM WAV I/O, band-limited resampling and mixing."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import (
    AudioFormatError,
    BoundsError,
    RateMismatchError,
    UnsupportedFormatError,
)

PCM_SCALE = 32768.0

# Resampler anti-imaging/anti-aliasing filter.
RESAMPLE_STOPBAND_DB = 90.0
RESAMPLE_TRANSITION = 0.1  # fraction of the lower Nyquist given to the transition band


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Mono float64 samples in [-1, 1] at an integer sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioClip holds mono samples only")
        samples = samples.copy()
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"invalid sample rate {self.sample_rate!r}")
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_seconds(self) -> float:
        return len(self) / self.sample_rate

    @classmethod
    def silence(cls, n_samples: int, sample_rate: int) -> AudioClip:
        return cls(np.zeros(n_samples), sample_rate)

    def with_samples(self, samples: np.ndarray) -> AudioClip:
        return AudioClip(samples, self.sample_rate)


def read_wav(path: str | Path) -> AudioClip:
    """Read a mono 16-bit PCM WAV file.

    Integer samples are divided by 32768, so -32768 maps to exactly -1.0.
    """
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    if n_channels != 1:
        raise UnsupportedFormatError(f"{path}: {n_channels} channels, only mono is supported")
    if width != 2:
        raise UnsupportedFormatError(f"{path}: {8 * width}-bit samples, only 16-bit PCM is supported")
    if rate <= 0:
        raise AudioFormatError(f"{path}: invalid sample rate {rate}")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / PCM_SCALE, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    scaled = np.round(np.clip(samples, -1.0, 1.0) * PCM_SCALE)
    return np.clip(scaled, -32768, 32767).astype("<i2")


def write_wav(clip: AudioClip, path: str | Path) -> None:
    with open(path, "wb") as fh, wave.open(fh, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(to_pcm16(clip.samples).tobytes())


@lru_cache(maxsize=16)
def _resample_taps(up: int, down: int) -> np.ndarray:
    """Kaiser windowed-sinc prototype at the intermediate rate (up x source).

    The stopband starts exactly at the lower of the two Nyquist frequencies;
    the passband ends RESAMPLE_TRANSITION earlier.
    """
    max_rate = max(up, down)
    width = RESAMPLE_TRANSITION / max_rate  # normalised to the intermediate Nyquist
    numtaps, beta = signal.kaiserord(RESAMPLE_STOPBAND_DB, width)
    numtaps |= 1  # odd length keeps an integer group delay
    cutoff = (1.0 - RESAMPLE_TRANSITION / 2) / max_rate
    taps = signal.firwin(numtaps, cutoff, window=("kaiser", beta))
    taps.setflags(write=False)
    return taps


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase windowed-sinc resampling to ``target_rate``.

    Output length is ``round(len * target_rate / source_rate)``.
    """
    if int(target_rate) != target_rate or target_rate <= 0:
        raise ValueError(f"invalid target rate {target_rate!r}")
    target_rate = int(target_rate)
    if target_rate == clip.sample_rate:
        return clip
    g = gcd(target_rate, clip.sample_rate)
    up, down = target_rate // g, clip.sample_rate // g
    out = signal.resample_poly(clip.samples, up, down, window=np.array(_resample_taps(up, down)))
    n_out = int(round(len(clip) * target_rate / clip.sample_rate))
    if out.shape[0] >= n_out:
        out = out[:n_out]
    else:
        out = np.pad(out, (0, n_out - out.shape[0]))
    return AudioClip(np.clip(out, -1.0, 1.0), target_rate)


def mix(base: AudioClip, overlay: AudioClip, offset: int = 0) -> AudioClip:
    """Add ``overlay`` into ``base`` starting at ``offset``, hard-clamped to [-1, 1]."""
    if base.sample_rate != overlay.sample_rate:
        raise RateMismatchError(
            f"cannot mix {overlay.sample_rate} Hz into {base.sample_rate} Hz"
        )
    if offset < 0 or offset + len(overlay) > len(base):
        raise BoundsError(
            f"overlay of {len(overlay)} samples at offset {offset} overruns base of {len(base)}"
        )
    out = base.samples.copy()
    seg = slice(offset, offset + len(overlay))
    out[seg] = np.clip(out[seg] + overlay.samples, -1.0, 1.0)
    return AudioClip(out, base.sample_rate)


def normalize_peak(clip: AudioClip, peak: float = 0.9) -> AudioClip:
    """Scale so the largest absolute sample equals ``peak``; silence is returned as is."""
    current = float(np.max(np.abs(clip.samples))) if len(clip) else 0.0
    if current == 0.0:
        return clip
    return clip.with_samples(clip.samples * (peak / current))


def db_to_amplitude(db: float) -> float:
    return float(10.0 ** (db / 20.0))


def amplitude_to_db(amplitude: float) -> float:
    if amplitude <= 0:
        return float("-inf")
    return float(20.0 * np.log10(amplitude))
