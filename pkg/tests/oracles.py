"""Slow reference implementations used as test oracles.

Written from the textbook definitions with explicit loops and no FFT, so they
share no code path with the package.
"""

import math

import numpy as np


def htk_mel(f):
    return 2595.0 * math.log10(1.0 + f / 700.0)


def htk_hz(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def periodic_hann(n):
    return np.array([0.5 - 0.5 * math.cos(2.0 * math.pi * i / n) for i in range(n)])


def naive_power_spectrum(frame, n_fft):
    """|X[k]|^2 for k = 0..n_fft/2 by the O(N^2) DFT sum of the zero-padded frame."""
    n = np.arange(len(frame))
    out = np.empty(n_fft // 2 + 1)
    for k in range(n_fft // 2 + 1):
        ang = -2.0 * np.pi * k * n / n_fft
        re = float(np.dot(frame, np.cos(ang)))
        im = float(np.dot(frame, np.sin(ang)))
        out[k] = re * re + im * im
    return out


def naive_filterbank(n_mels, n_fft, sample_rate, fmin, fmax):
    lo, hi = htk_mel(fmin), htk_mel(fmax)
    edges = [htk_hz(lo + (hi - lo) * j / (n_mels + 1)) for j in range(n_mels + 2)]
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        left, centre, right = edges[m], edges[m + 1], edges[m + 2]
        for k in range(n_fft // 2 + 1):
            f = k * sample_rate / n_fft
            if left < f <= centre:
                fb[m, k] = (f - left) / (centre - left)
            elif centre < f < right:
                fb[m, k] = (right - f) / (right - centre)
    return fb


def naive_dct_ortho(x):
    n = len(x)
    out = np.empty(n)
    for k in range(n):
        s = sum(x[i] * math.cos(math.pi * k * (2 * i + 1) / (2 * n)) for i in range(n))
        out[k] = s * (math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n))
    return out


def naive_frame_mfcc(frame, sample_rate, n_mels=40, n_fft=2048, n_coeffs=40, fmin=0.0, fmax=None, floor=1e-10):
    """Returns (log-mel energies, cepstra) for one analysis frame."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    power = naive_power_spectrum(frame * periodic_hann(len(frame)), n_fft)
    mel = naive_filterbank(n_mels, n_fft, sample_rate, fmin, fmax) @ power
    logmel = np.log(mel + floor)
    return logmel, naive_dct_ortho(logmel)[:n_coeffs]
