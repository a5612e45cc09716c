"""Ultrasonic sine-pulse triggers and the placements used to stamp them into clips."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .audio import AudioClip, mix
from .errors import BoundsError, NyquistError, RateMismatchError


class Placement(str, enum.Enum):
    BEGINNING = "beginning"
    MIDDLE = "middle"
    END = "end"


@dataclass(frozen=True)
class TriggerSpec:
    """Backdoor trigger description.

    ``continuous=False`` splits ``duration_ms`` into ``n_pulses`` equal pulses
    spread evenly over the carrier; ``placement`` is then ignored.
    """

    frequency: float = 21_000.0
    sample_rate: int = 44_100
    duration_ms: float = 20.0
    amplitude: float = 0.1
    placement: Placement = Placement.MIDDLE
    continuous: bool = True
    n_pulses: int = 5
    ramp_ms: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "placement", Placement(self.placement))
        if self.sample_rate <= 2 * self.frequency:
            raise NyquistError(
                f"Nyquist violation: sample rate {self.sample_rate} Hz cannot carry a {self.frequency:g} Hz tone; "
                f"it must exceed {2 * self.frequency:g} Hz"
            )
        if not 0.0 < self.amplitude <= 1.0:
            raise ValueError(f"amplitude must lie in (0, 1], got {self.amplitude}")
        if self.ramp_ms < 0:
            raise ValueError("ramp_ms must be >= 0")
        if not self.continuous and self.n_pulses < 1:
            raise ValueError("n_pulses must be >= 1")
        if self.pulse_samples < 1:
            raise ValueError(f"{self.duration_ms} ms is shorter than one sample per pulse")

    @property
    def total_samples(self) -> int:
        return int(round(self.duration_ms * self.sample_rate / 1000.0))

    @property
    def pulse_count(self) -> int:
        return 1 if self.continuous else self.n_pulses

    @property
    def pulse_ms(self) -> float:
        return self.duration_ms / self.pulse_count

    @property
    def pulse_samples(self) -> int:
        return int(round(self.pulse_ms * self.sample_rate / 1000.0))

    @property
    def continuity_label(self) -> str:
        return "continuous" if self.continuous else f"noncontinuous{self.n_pulses}"

    @property
    def placement_label(self) -> str:
        return self.placement.value if self.continuous else "distributed"


def _raised_cosine_ramp(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    ramp = min(ramp, n // 2)
    if ramp > 0:
        rise = 0.5 - 0.5 * np.cos(np.pi * (np.arange(ramp) + 0.5) / ramp)
        env[:ramp] = rise
        env[n - ramp:] = rise[::-1]
    return env


def gen_sine_pulse(spec: TriggerSpec, n_samples: int | None = None) -> AudioClip:
    """One pulse ``amplitude * sin(2 pi f i / fs)`` with zero onset phase.

    ``n_samples`` defaults to the length of a single pulse of ``spec``.
    """
    n = spec.pulse_samples if n_samples is None else n_samples
    i = np.arange(n)
    samples = spec.amplitude * np.sin(2.0 * np.pi * spec.frequency * i / spec.sample_rate)
    if spec.ramp_ms > 0:
        samples *= _raised_cosine_ramp(n, int(round(spec.ramp_ms * spec.sample_rate / 1000.0)))
    return AudioClip(samples, spec.sample_rate)


def pulse_offsets(spec: TriggerSpec, carrier_len: int) -> list[int]:
    """Start index of every pulse for a carrier of ``carrier_len`` samples."""
    plen = spec.pulse_samples
    if spec.continuous:
        if spec.placement is Placement.BEGINNING:
            return [0]
        if spec.placement is Placement.MIDDLE:
            return [(carrier_len - plen) // 2]
        return [carrier_len - plen]
    n = spec.n_pulses
    offsets = []
    for k in range(n):
        center = (2 * k + 1) * carrier_len / (2 * n)
        start = int(round(center - plen / 2))
        offsets.append(min(max(start, 0), carrier_len - plen))
    return offsets


def stamp(carrier: AudioClip, spec: TriggerSpec) -> AudioClip:
    """Mix the trigger into ``carrier``; length and rate are preserved."""
    if carrier.sample_rate != spec.sample_rate:
        raise RateMismatchError(
            f"carrier is {carrier.sample_rate} Hz but trigger is {spec.sample_rate} Hz"
        )
    plen = spec.pulse_samples
    if plen * spec.pulse_count > len(carrier):
        raise BoundsError(
            f"trigger of {spec.duration_ms} ms is longer than the {carrier.duration_seconds:.3f} s carrier"
        )
    pulse = gen_sine_pulse(spec)
    out = carrier
    for offset in pulse_offsets(spec, len(carrier)):
        out = mix(out, pulse, offset)
    return out


def trigger_mask(spec: TriggerSpec, carrier_len: int) -> np.ndarray:
    """Boolean mask of samples covered by the trigger."""
    mask = np.zeros(carrier_len, dtype=bool)
    for offset in pulse_offsets(spec, carrier_len):
        mask[offset:offset + spec.pulse_samples] = True
    return mask


def audible_energy_fraction(
    carrier: AudioClip,
    stamped: AudioClip,
    spec: TriggerSpec | None = None,
    cutoff: float = 20_000.0,
    min_nfft: int = 8192,
) -> float:
    """Fraction of the stamp difference signal's DFT energy below ``cutoff``.

    With ``spec=None`` this is the raw DFT of the whole difference signal.
    Given ``spec``, each pulse segment is Hann-tapered before its DFT so the
    hard gate at the pulse edges (the onset/offset click of an unramped pulse)
    is excluded; energies are summed over pulses.
    """
    if carrier.sample_rate != stamped.sample_rate or len(carrier) != len(stamped):
        raise RateMismatchError("carrier and stamped clip differ in rate or length")
    diff = stamped.samples - carrier.samples
    sr = carrier.sample_rate
    if spec is None:
        segments = [diff]
    else:
        p = spec.pulse_samples
        taper = np.hanning(p + 2)[1:-1]
        segments = [diff[o:o + p] * taper for o in pulse_offsets(spec, len(diff))]
    low = total = 0.0
    for seg in segments:
        nfft = max(len(seg), min_nfft)
        power = np.abs(np.fft.rfft(seg, nfft)) ** 2
        freqs = np.fft.rfftfreq(nfft, 1.0 / sr)
        low += float(power[freqs < cutoff].sum())
        total += float(power.sum())
    return low / total if total > 0 else 0.0
