"""Synthetic stand-in for a ten-word speech-command corpus.

Each class is a voiced "word": a harmonic source shaped by three class-specific
formant resonances, with a class-specific pitch contour and syllable rhythm.
Per-clip jitter in pitch, formants, timing, loudness and background noise keeps
the task non-trivial.  Clips are written as 16 kHz mono 16-bit WAV, the rate of
the original corpus, so the loader's up-sampling step is exercised.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio import AudioClip, write_wav

SPEECH_COMMANDS_10 = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
MINI_RATE = 16_000


def _class_profile(k: int, n_classes: int) -> dict:
    rng = np.random.Generator(np.random.PCG64(10_007 + k))
    # spread first formants over the class set so neighbours stay distinguishable
    f1 = 300.0 + 500.0 * k / max(n_classes - 1, 1) + rng.uniform(-30, 30)
    f2 = 900.0 + 1600.0 * ((k * 7) % n_classes) / max(n_classes - 1, 1) + rng.uniform(-60, 60)
    f3 = 2500.0 + 1200.0 * ((k * 3) % n_classes) / max(n_classes - 1, 1) + rng.uniform(-80, 80)
    return {
        "formants": (f1, f2, f3),
        "pitch": 100.0 + 12.0 * (k % 5) + rng.uniform(-4, 4),
        "glide": (-0.25 + 0.5 * ((k * 3) % 4) / 3.0),
        "syllables": 1 + (k % 3),
    }


def synth_word(k: int, n_classes: int, rng: np.random.Generator, n_samples: int = MINI_RATE) -> np.ndarray:
    prof = _class_profile(k, n_classes)
    fs = MINI_RATE
    t = np.arange(n_samples) / fs

    word_len = rng.uniform(0.45, 0.7)
    onset = rng.uniform(0.05, 0.95 - word_len)
    pitch0 = prof["pitch"] * rng.uniform(0.92, 1.08)
    rel = np.clip((t - onset) / word_len, 0.0, 1.0)
    f0 = pitch0 * (1.0 + prof["glide"] * rel)
    phase = 2.0 * np.pi * np.cumsum(f0) / fs

    formants = [f * rng.uniform(0.96, 1.04) for f in prof["formants"]]
    voiced = np.zeros(n_samples)
    for h in range(1, int(3800 // pitch0)):
        fh = h * pitch0
        gain = sum(np.exp(-0.5 * ((fh - fc) / (0.08 * fc + 60.0)) ** 2) for fc in formants)
        voiced += gain * np.sin(h * phase) / np.sqrt(h)

    # syllable envelope: raised-cosine bumps inside the word
    env = np.zeros(n_samples)
    n_syl = prof["syllables"]
    for s in range(n_syl):
        a = onset + word_len * s / n_syl
        b = onset + word_len * (s + 1) / n_syl
        inside = (t >= a) & (t < b)
        env[inside] = np.sin(np.pi * (t[inside] - a) / (b - a)) ** 2

    x = voiced * env
    x /= np.max(np.abs(x)) + 1e-12
    x *= rng.uniform(0.3, 0.7)
    x += rng.normal(0.0, 10 ** (rng.uniform(-50, -38) / 20), n_samples)
    return np.clip(x, -0.95, 0.95)


def generate_mini_dataset(
    root: str | Path,
    n_per_class: int = 100,
    classes: tuple[str, ...] = SPEECH_COMMANDS_10,
    seed: int = 0,
    n_short_per_class: int = 0,
    short_seconds: float = 0.8,
) -> Path:
    """Write ``root/<class>/<class>_NNNN.wav`` clips of one second at 16 kHz.

    ``n_short_per_class`` extra clips of ``short_seconds`` are added to
    exercise the loader's minimum-duration filter.
    """
    root = Path(root)
    rng = np.random.Generator(np.random.PCG64(seed))
    for k, name in enumerate(classes):
        cdir = root / name
        cdir.mkdir(parents=True, exist_ok=True)
        for j in range(n_per_class):
            write_wav(AudioClip(synth_word(k, len(classes), rng), MINI_RATE), cdir / f"{name}_{j:04d}.wav")
        for j in range(n_short_per_class):
            n = int(round(short_seconds * MINI_RATE))
            clip = AudioClip(synth_word(k, len(classes), rng)[:n], MINI_RATE)
            write_wav(clip, cdir / f"{name}_short_{j:04d}.wav")
    return root
