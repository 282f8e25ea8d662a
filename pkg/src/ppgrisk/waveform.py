"""Single-pulse PPG waveform processing.

Covers rescaling, engineered morphology features (reflection index, peak
timing, arterial stiffness surrogate), a tape-speed warping augmentation,
and a synthetic pulse generator whose shape is driven by a scalar
"vascular age" latent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .rng import keyed_rng

# Canonical pulse length used by the encoder; incoming waveforms are
# linearly resampled to this length at ingestion.
CANONICAL_LENGTH = 100
DEFAULT_SAMPLE_PERIOD = 0.01  # seconds per sample


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # shape (L,), rescaled to [0, 1] after preprocess
    sample_period: float  # seconds per sample


@dataclass(frozen=True)
class MorphologyFeatures:
    """Engineered single-pulse shape features.

    ``reflection_index`` is the diastolic/systolic amplitude ratio,
    ``peak_to_peak_time`` the systolic-to-diastolic delay in seconds and
    ``stiffness_index`` height/delay in m/s.  When no secondary peak exists
    the three are unset and ``notch_absent`` is True.
    """

    peak_position: int
    notch_absent: bool
    reflection_index: float | None = None
    peak_to_peak_time: float | None = None
    notch_position: int | None = None
    shoulder_position: int | None = None
    stiffness_index: float | None = None


@dataclass(frozen=True)
class AugmentConfig:
    magnitude: float = 2.0
    apply_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValidationError(f"augment magnitude must be >= 0, got {self.magnitude}")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValidationError("apply_probability must lie in [0, 1]")


def preprocess(raw, sample_period: float = DEFAULT_SAMPLE_PERIOD) -> Waveform:
    """Affinely rescale a raw pulse so its minimum is 0 and maximum 1.

    A flat input maps to all zeros.  Idempotent on already-rescaled input.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.size == 0:
        raise ValidationError("cannot preprocess an empty waveform")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        samples = np.zeros_like(raw)
    else:
        samples = (raw - lo) / (hi - lo)
    return Waveform(samples=samples, sample_period=float(sample_period))


def resample(raw, length: int = CANONICAL_LENGTH):
    """Linear resample to ``length`` samples (ingestion helper)."""
    raw = np.asarray(raw, dtype=float)
    if raw.size < 2:
        raise ValidationError("need at least 2 samples to resample")
    if raw.size == length:
        return raw.copy()
    old = np.linspace(0.0, 1.0, raw.size)
    new = np.linspace(0.0, 1.0, length)
    return np.interp(new, old, raw)


def _local_maxima(s: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Interior local maxima indices i in [start, stop): s[i-1] < s[i] >= s[i+1]."""
    i = np.arange(max(start, 1), min(stop, s.size - 1))
    if i.size == 0:
        return i
    keep = (s[i - 1] < s[i]) & (s[i] >= s[i + 1])
    return i[keep]


def _local_minima(s: np.ndarray, start: int, stop: int) -> np.ndarray:
    i = np.arange(max(start, 1), min(stop, s.size - 1))
    if i.size == 0:
        return i
    keep = (s[i - 1] > s[i]) & (s[i] <= s[i + 1])
    return i[keep]


def extract_morphology(
    w: Waveform,
    subject_height_cm: float,
    smooth_window: int = 0,
) -> MorphologyFeatures:
    """Locate systolic/diastolic peaks and the dicrotic notch of one pulse.

    The systolic peak is the global maximum; the diastolic peak is the
    largest local maximum after it; the notch is the deepest local minimum
    strictly between the two.  Without a secondary peak, a shoulder is
    reported instead: the first zero crossing of the second difference on
    the falling edge.  ``smooth_window`` > 1 applies a moving average
    before peak picking (off by default; the acquisition device already
    averages several beats).
    """
    if subject_height_cm <= 0:
        raise ValidationError("subject height must be positive")
    s = w.samples
    if smooth_window > 1:
        kernel = np.ones(smooth_window) / smooth_window
        s = np.convolve(s, kernel, mode="same")
    sys_idx = int(np.argmax(s))
    if sys_idx == s.size - 1:
        raise ValidationError("no falling edge: systolic peak at the last sample")

    dia_candidates = _local_maxima(s, sys_idx + 1, s.size)
    if dia_candidates.size == 0:
        shoulder = _shoulder_index(s, sys_idx)
        return MorphologyFeatures(
            peak_position=sys_idx, notch_absent=True, shoulder_position=shoulder
        )

    dia_idx = int(dia_candidates[np.argmax(s[dia_candidates])])
    notch_candidates = _local_minima(s, sys_idx + 1, dia_idx)
    if notch_candidates.size == 0:
        shoulder = _shoulder_index(s, sys_idx)
        return MorphologyFeatures(
            peak_position=sys_idx, notch_absent=True, shoulder_position=shoulder
        )
    notch_idx = int(notch_candidates[np.argmin(s[notch_candidates])])

    dt = (dia_idx - sys_idx) * w.sample_period
    ri = float(s[dia_idx] / s[sys_idx])
    si = (subject_height_cm / 100.0) / dt
    return MorphologyFeatures(
        peak_position=sys_idx,
        notch_absent=False,
        reflection_index=ri,
        peak_to_peak_time=dt,
        notch_position=notch_idx,
        stiffness_index=si,
    )


def _shoulder_index(s: np.ndarray, sys_idx: int) -> int | None:
    """First sign change of the second difference on the falling edge."""
    d2 = np.diff(s, n=2)  # d2[i] ~ curvature at i+1
    for i in range(sys_idx, d2.size - 1):
        if d2[i] <= 0.0 <= d2[i + 1] or d2[i] >= 0.0 >= d2[i + 1]:
            if d2[i] != d2[i + 1]:
                return i + 1
    return None


def warp_positions(increments: np.ndarray) -> np.ndarray:
    """Sampling positions for tape-speed warping from raw speed increments.

    speed = 1 + cumsum(increments); position = cumsum(speed), shifted to
    start at 0 so zero increments give the identity grid 0..L-1.
    """
    speed = 1.0 + np.cumsum(increments)
    displacement = np.cumsum(speed)
    return displacement - displacement[0]


def brownian_tape_warp(w: Waveform, cfg: AugmentConfig) -> Waveform:
    """Resample the pulse as if played back at a randomly drifting speed.

    Per-step speed increments are N(0, (magnitude / L)^2); their running
    sum (plus 1) is the playback speed, whose running sum gives the
    positions at which the input is linearly interpolated.  The
    transformation is gated on ``apply_probability`` and deterministic for
    a fixed seed.
    """
    if cfg.magnitude < 0:
        raise ValidationError("magnitude must be >= 0")
    rng = keyed_rng(cfg.seed, "tape-warp")
    if rng.uniform() >= cfg.apply_probability:
        return w
    n = w.samples.size
    z = rng.normal(0.0, cfg.magnitude / n, size=n)
    pos = np.clip(warp_positions(z), 0.0, n - 1.0)
    out = np.interp(pos, np.arange(n), w.samples)
    return Waveform(samples=out, sample_period=w.sample_period)


# --- synthetic pulse -------------------------------------------------------

# Shape constants for the two-bump synthetic pulse.  The diastolic bump's
# amplitude grows and its delay shrinks as the vascular latent increases
# (the stiff-artery signature), so reflection index and peak-to-peak time
# are monotone in the latent.
SYSTOLIC_POS_FRAC = 0.25
SYSTOLIC_WIDTH_FRAC = 0.05
DIASTOLIC_WIDTH_FRAC = 0.07
DIASTOLIC_AMP_MAX = 0.6
DIASTOLIC_DELAY_MAX_FRAC = 0.50
DIASTOLIC_DELAY_MIN_FRAC = 0.28


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + np.exp(-x))


def synth_pulse_truth(vascular_latent: float, length: int) -> tuple[int, int, float]:
    """Constructed (systolic index, diastolic index, diastolic amplitude)."""
    sys_idx = int(round(SYSTOLIC_POS_FRAC * length))
    span = DIASTOLIC_DELAY_MAX_FRAC - DIASTOLIC_DELAY_MIN_FRAC
    delay_frac = DIASTOLIC_DELAY_MAX_FRAC - span * _sigmoid(vascular_latent)
    dia_idx = sys_idx + int(round(delay_frac * length))
    amp = DIASTOLIC_AMP_MAX * _sigmoid(vascular_latent)
    return sys_idx, dia_idx, amp


def synth_pulse(
    vascular_latent: float,
    length: int = CANONICAL_LENGTH,
    seed: int = 0,
    noise: float = 0.02,
    sample_period: float = DEFAULT_SAMPLE_PERIOD,
) -> Waveform:
    """Two-Gaussian synthetic pulse parameterised by a vascular-age latent.

    Systolic bump of amplitude 1 at a fixed position; diastolic bump whose
    amplitude is sigmoid(latent) * 0.6 and whose delay shrinks with the
    latent.  Seeded Gaussian noise of the given amplitude is added before
    rescaling.
    """
    if length < 32:
        raise ValidationError("synthetic pulses need length >= 32")
    sys_idx, dia_idx, dia_amp = synth_pulse_truth(vascular_latent, length)
    t = np.arange(length, dtype=float)
    sys_w = SYSTOLIC_WIDTH_FRAC * length
    dia_w = DIASTOLIC_WIDTH_FRAC * length
    pulse = np.exp(-0.5 * ((t - sys_idx) / sys_w) ** 2)
    pulse += dia_amp * np.exp(-0.5 * ((t - dia_idx) / dia_w) ** 2)
    if noise > 0:
        rng = keyed_rng(seed, "pulse-noise")
        pulse = pulse + rng.normal(0.0, noise, size=length)
    return preprocess(pulse, sample_period)


# --- morphology CSV --------------------------------------------------------

MORPHOLOGY_CSV_HEADER = "subject_id,ri,dt_s,peak_idx,notch_idx,shoulder_idx,notch_absent,si_mps"


def morphology_csv_lines(features: dict[str, MorphologyFeatures]) -> list[str]:
    """Plot-ready CSV lines (header included) for per-subject morphology."""

    def fmt(x):
        return "NA" if x is None else repr(x) if isinstance(x, float) else str(x)

    lines = [MORPHOLOGY_CSV_HEADER]
    for sid in sorted(features):
        m = features[sid]
        lines.append(
            ",".join(
                [
                    sid,
                    fmt(m.reflection_index),
                    fmt(m.peak_to_peak_time),
                    fmt(m.peak_position),
                    fmt(m.notch_position),
                    fmt(m.shoulder_position),
                    str(int(m.notch_absent)),
                    fmt(m.stiffness_index),
                ]
            )
        )
    return lines
