"""Over-the-air playback simulation and the low-pass defense.

The microphone is modelled as flat up to Nyquist; there is no room response.
The measured trigger level at the phone is treated as dBFS at the recorder.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal

from .audio import AudioClip, amplitude_to_db, db_to_amplitude
from .classifier import TrainedModel, predict_classes
from .dataset import TEST, LabeledDataset
from .errors import RateMismatchError
from .features import MfccConfig, mfcc
from .trigger import TriggerSpec, stamp

LOWPASS_STOPBAND_DB = 180.0
LOWPASS_TRANSITION = 0.1  # passband ends at (1 - transition) * cutoff

SIMULATION_COLUMNS = ("distance_m", "condition", "trials", "asrt", "trigger_level_db")


class Rolloff(str, enum.Enum):
    FREE_FIELD = "free_field"  # -20 log10(r / r0)
    LINEAR_DB = "linear_db"  # -k dB per metre beyond r0


@dataclass(frozen=True)
class ChannelConfig:
    """Playback channel.

    ``ref_level_db`` is the trigger's peak level at distance 0 (None keeps the
    trigger's own amplitude).  ``speech_level_db`` peak-normalises the
    interfering speech (None leaves it untouched); ``noise_floor_db`` is the
    RMS level of additive white noise (None for a noiseless channel).
    """

    distances_m: tuple[float, ...] = (0.0, 0.5, 1.0, 1.5)
    ref_level_db: float | None = -43.0
    rolloff: Rolloff = Rolloff.FREE_FIELD
    db_per_m: float = 0.0
    ref_distance_m: float = 0.1
    speech_level_db: float | None = -20.0
    noise_floor_db: float | None = -90.0

    def __post_init__(self):
        object.__setattr__(self, "rolloff", Rolloff(self.rolloff))
        object.__setattr__(self, "distances_m", tuple(float(d) for d in self.distances_m))
        if any(d < 0 for d in self.distances_m):
            raise ValueError("distances must be nonnegative")
        for lvl in (self.ref_level_db, self.speech_level_db, self.noise_floor_db):
            if lvl is not None and lvl > 0:
                raise ValueError(f"level {lvl} dBFS above full scale")
        if self.ref_distance_m <= 0:
            raise ValueError("ref_distance_m must be positive")
        if self.db_per_m < 0:
            raise ValueError("db_per_m must be nonnegative")

    def attenuation_db(self, distance: float) -> float:
        r = max(float(distance), self.ref_distance_m)
        if self.rolloff is Rolloff.FREE_FIELD:
            return float(20.0 * np.log10(r / self.ref_distance_m))
        return float(self.db_per_m * (r - self.ref_distance_m))


def transmit(
    trigger: AudioClip,
    speech: AudioClip | None,
    cfg: ChannelConfig,
    distance: float,
    rng: np.random.Generator | None = None,
) -> AudioClip:
    """One simulated recording of ``trigger`` played ``distance`` metres away."""
    peak = float(np.max(np.abs(trigger.samples))) if len(trigger) else 0.0
    gain = db_to_amplitude(-cfg.attenuation_db(distance))
    if cfg.ref_level_db is not None and peak > 0:
        gain *= db_to_amplitude(cfg.ref_level_db) / peak
    out = trigger.samples * gain

    if speech is not None:
        if speech.sample_rate != trigger.sample_rate:
            raise RateMismatchError(f"speech at {speech.sample_rate} Hz, trigger at {trigger.sample_rate} Hz")
        s = speech.samples
        if cfg.speech_level_db is not None:
            sp = float(np.max(np.abs(s)))
            if sp > 0:
                s = s * (db_to_amplitude(cfg.speech_level_db) / sp)
        n = max(len(out), len(s))
        out = np.pad(out, (0, n - len(out))) + np.pad(s, (0, n - len(s)))

    if cfg.noise_floor_db is not None:
        rng = rng if rng is not None else np.random.default_rng(0)
        out = out + rng.normal(0.0, db_to_amplitude(cfg.noise_floor_db), len(out))
    return AudioClip(np.clip(out, -1.0, 1.0), trigger.sample_rate)


def trigger_level_db(trigger: AudioClip, cfg: ChannelConfig, distance: float) -> float:
    base = cfg.ref_level_db
    if base is None:
        base = amplitude_to_db(float(np.max(np.abs(trigger.samples))) if len(trigger) else 0.0)
    return float(base - cfg.attenuation_db(distance))


@lru_cache(maxsize=32)
def lowpass_taps(cutoff: float, sample_rate: int, stopband_db: float = LOWPASS_STOPBAND_DB,
                 transition: float = LOWPASS_TRANSITION) -> np.ndarray:
    """Kaiser windowed-sinc taps: flat below (1 - transition) * cutoff, >= stopband_db down from cutoff.

    At 44.1 kHz with a 20 kHz cutoff and the defaults this is a 267-tap filter.
    """
    nyq = sample_rate / 2.0
    if not 0 < cutoff < nyq:
        raise ValueError(f"cutoff {cutoff} Hz must lie strictly between 0 and Nyquist ({nyq} Hz)")
    width = transition * cutoff / nyq
    numtaps, beta = signal.kaiserord(stopband_db, width)
    numtaps |= 1
    taps = signal.firwin(numtaps, (1.0 - transition / 2) * cutoff / nyq, window=("kaiser", beta))
    taps.setflags(write=False)
    return taps


def low_pass(clip: AudioClip, cutoff: float = 20_000.0, stopband_db: float = LOWPASS_STOPBAND_DB) -> AudioClip:
    """Delay-compensated linear-phase FIR low-pass.

    The clip is filtered as one period of a periodic signal (circular
    extension), so no start-up transient is injected at the clip edges and
    the length is unchanged.
    """
    taps = lowpass_taps(float(cutoff), clip.sample_rate, stopband_db)
    half = len(taps) // 2
    padded = np.pad(clip.samples, half, mode="wrap")
    out = signal.fftconvolve(padded, taps, mode="valid")
    return AudioClip(np.clip(out, -1.0, 1.0), clip.sample_rate)


def simulate_attack(
    model: TrainedModel,
    cfg: ChannelConfig,
    trials: int,
    speech_bank: LabeledDataset,
    trigger: TriggerSpec,
    target_class: str,
    *,
    mfcc_cfg: MfccConfig | None = None,
    defense_cutoff: float | None = None,
    seed: int = 0,
) -> list[dict]:
    """Per-distance ASRT under silence and under concurrent speech.

    The trigger is rendered on a silent clip as long as the bank's clips.
    Speech comes from test-split clips whose true class is not the target.
    ``defense_cutoff`` low-passes every recording before feature extraction.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    mfcc_cfg = mfcc_cfg or MfccConfig()
    target = speech_bank.class_index(target_class)
    rendered = stamp(AudioClip.silence(speech_bank.clip_samples, speech_bank.sample_rate), trigger)
    pool = [i for i in speech_bank.indices(TEST) if speech_bank.items[i].label != target]

    rows = []
    ss = np.random.SeedSequence(seed)
    for d_idx, distance in enumerate(cfg.distances_m):
        for condition in ("silence", "speech"):
            rng = np.random.Generator(np.random.PCG64(ss.spawn(1)[0]))
            feats = []
            for _ in range(trials):
                speech = None
                if condition == "speech":
                    if not pool:
                        raise ValueError("speech bank has no non-target test clips")
                    speech = speech_bank.clean_clip(pool[int(rng.integers(len(pool)))])
                rec = transmit(rendered, speech, cfg, distance, rng)
                if defense_cutoff is not None:
                    rec = low_pass(rec, defense_cutoff)
                feats.append(mfcc(rec, mfcc_cfg).frames.astype(np.float32))
            hits = predict_classes(model, np.stack(feats)) == target
            rows.append({
                "distance_m": distance,
                "condition": condition,
                "trials": trials,
                "asrt": float(np.mean(hits)),
                "trigger_level_db": trigger_level_db(rendered, cfg, distance),
            })
    return rows


def write_simulation_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SIMULATION_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
