"""MFCC extraction with 25 ms / 10 ms framing at 44.1 kHz and a binary feature cache."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .audio import AudioClip
from .errors import TooShortError


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MfccConfig:
    n_mels: int = 40
    win_length: int = 1103
    hop_length: int = 441
    n_fft: int = 2048
    n_coeffs: int = 40
    fmin: float = 0.0
    fmax: float | None = None  # None -> Nyquist of the clip
    log_floor: float = 1e-10

    def __post_init__(self):
        if not 0 < self.n_coeffs <= self.n_mels:
            raise ValueError("need 0 < n_coeffs <= n_mels")
        if not 0 < self.hop_length <= self.win_length <= self.n_fft:
            raise ValueError("need hop_length <= win_length <= n_fft")
        if self.n_fft & (self.n_fft - 1):
            raise ValueError("n_fft must be a power of two")
        if self.fmax is not None and self.fmin >= self.fmax:
            raise ValueError("fmin must be below fmax")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def resolved_fmax(self, sample_rate: int) -> float:
        fmax = sample_rate / 2.0 if self.fmax is None else float(self.fmax)
        if fmax > sample_rate / 2.0 or self.fmin >= fmax:
            raise ValueError(f"band [{self.fmin}, {fmax}] invalid for {sample_rate} Hz")
        return fmax

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            return 0
        return 1 + (n_samples - self.win_length) // self.hop_length

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    frames: np.ndarray  # (n_frames, n_coeffs)
    source_rate: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape


def mel_filterbank(cfg: MfccConfig, sample_rate: int) -> np.ndarray:
    """Triangular filters evenly spaced on the HTK mel scale, shape (n_mels, n_fft//2 + 1)."""
    fmax = cfg.resolved_fmax(sample_rate)
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))
    bin_hz = np.arange(cfg.n_fft // 2 + 1) * sample_rate / cfg.n_fft
    lower, center, upper = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (bin_hz - lower) / (center - lower)
    falling = (upper - bin_hz) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_signal(samples: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    """Frames of ``win_length`` samples every ``hop_length``; the ragged tail is dropped."""
    n_frames = cfg.n_frames(samples.shape[0])
    if n_frames == 0:
        raise TooShortError(
            f"clip of {samples.shape[0]} samples is shorter than one {cfg.win_length}-sample window"
        )
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop_length * np.arange(n_frames)[:, None]
    return samples[idx]


def analysis_window(cfg: MfccConfig) -> np.ndarray:
    # periodic Hann
    return np.hanning(cfg.win_length + 1)[:-1]


def power_spectrum(frames: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    spec = np.fft.rfft(frames * analysis_window(cfg), n=cfg.n_fft, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def log_mel_energies(clip: AudioClip, cfg: MfccConfig) -> np.ndarray:
    power = power_spectrum(frame_signal(clip.samples, cfg), cfg)
    return np.log(power @ mel_filterbank(cfg, clip.sample_rate).T + cfg.log_floor)


def mfcc(clip: AudioClip, cfg: MfccConfig | None = None) -> FeatureMatrix:
    """Hann window, power spectrum, mel filterbank, floored natural log, orthonormal DCT-II."""
    cfg = cfg or MfccConfig()
    ceps = dct(log_mel_energies(clip, cfg), type=2, norm="ortho", axis=-1)
    return FeatureMatrix(np.ascontiguousarray(ceps[:, :cfg.n_coeffs]), clip.sample_rate)


def mfcc_stack(clips, cfg: MfccConfig | None = None) -> np.ndarray:
    """MFCCs of equal-length clips as a float32 array (n_clips, n_frames, n_coeffs)."""
    cfg = cfg or MfccConfig()
    return np.stack([mfcc(c, cfg).frames for c in clips]).astype(np.float32)


# Binary layout: <u32 n_frames><u32 n_coeffs> then row-major little-endian float32.
_HEADER = struct.Struct("<II")


def features_to_bytes(fm: FeatureMatrix) -> bytes:
    frames = np.ascontiguousarray(fm.frames, dtype="<f4")
    return _HEADER.pack(*frames.shape) + frames.tobytes()


def features_from_bytes(data: bytes, source_rate: int = 0) -> FeatureMatrix:
    if len(data) < _HEADER.size:
        raise ValueError("truncated feature header")
    n_frames, n_coeffs = _HEADER.unpack_from(data)
    expected = _HEADER.size + 4 * n_frames * n_coeffs
    if len(data) != expected:
        raise ValueError(f"feature payload is {len(data)} bytes, expected {expected}")
    frames = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(n_frames, n_coeffs)
    return FeatureMatrix(frames.astype(np.float32), source_rate)


def save_features(fm: FeatureMatrix, path: str | Path) -> None:
    Path(path).write_bytes(features_to_bytes(fm))


def load_features(path: str | Path, source_rate: int = 0) -> FeatureMatrix:
    return features_from_bytes(Path(path).read_bytes(), source_rate)


class FeatureCache:
    """On-disk MFCC cache keyed by (file content, sample rate, MfccConfig)."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(path: str | Path, sample_rate: int, cfg: MfccConfig) -> str:
        h = hashlib.sha256(Path(path).read_bytes())
        h.update(f"|{sample_rate}|{cfg.digest()}".encode())
        return h.hexdigest()

    def get(self, path, sample_rate: int, cfg: MfccConfig) -> FeatureMatrix | None:
        entry = self.directory / f"{self.key(path, sample_rate, cfg)}.mfcc"
        if not entry.exists():
            return None
        return load_features(entry, sample_rate)

    def put(self, path, sample_rate: int, cfg: MfccConfig, fm: FeatureMatrix) -> None:
        entry = self.directory / f"{self.key(path, sample_rate, cfg)}.mfcc"
        tmp = entry.with_suffix(".tmp")
        save_features(fm, tmp)
        tmp.replace(entry)
