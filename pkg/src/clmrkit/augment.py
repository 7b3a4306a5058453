"""Stochastic raw-waveform augmentations and the positive-pair generator.

Every random transform takes an explicit ``numpy.random.Generator`` so a
pair is reproducible from its seed alone.  Transforms never change the
buffer length or sample rate; only the crop defines the length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import signal

from .audio_io import AudioBuffer
from .errors import OutOfRange, SilentInput, TooShort

CROP_LENGTHS = {8000: 20736, 16000: 43740, 22050: 59049}

TRANSFORM_ORDER = ("polarity", "noise", "gain", "filter", "delay", "pitch", "reverb")

DEFAULT_PROBABILITIES = {
    "polarity": 0.8,
    "noise": 0.8,
    "gain": 0.8,
    "filter": 0.8,
    "delay": 0.4,
    "pitch": 0.4,
    "reverb": 0.4,
}

DEFAULT_PARAMETERS: dict[str, dict[str, Any]] = {
    "polarity": {},
    "noise": {"snr_db": 80.0},
    "gain": {"min_db": -6.0, "max_db": 0.0},
    "filter": {"low_pass_hz": (2200.0, 4000.0), "high_pass_hz": (200.0, 1200.0)},
    "delay": {"min_ms": 200, "max_ms": 500, "step_ms": 50, "volume": 0.5},
    "pitch": {"min_semitones": -5.0, "max_semitones": 5.0},
    "reverb": {"room_size": (0.0, 100.0), "reverberance": (0.0, 100.0),
               "damping": (0.0, 100.0)},
}

# pitch shift / time stretch
FRAME = 2048
HOP = 512

# reverb topology, comb delays in samples at 22050 Hz
COMB_DELAYS = (1116, 1188, 1277, 1356)
ALLPASS_DELAYS = (556, 441)
ALLPASS_FEEDBACK = 0.5
MAX_COMB_FEEDBACK = 0.98


def _samples64(buffer: AudioBuffer) -> np.ndarray:
    return buffer.samples.astype(np.float64)


# ---------------------------------------------------------------------------
# individual transforms
# ---------------------------------------------------------------------------

def random_crop(buffer: AudioBuffer, length: int, rng: np.random.Generator,
                start: int | None = None) -> AudioBuffer:
    n = len(buffer)
    if n < length:
        raise TooShort(f"buffer of {n} samples cannot be cropped to {length}")
    if start is None:
        start = int(rng.integers(0, n - length + 1))
    elif not 0 <= start <= n - length:
        raise ValueError(f"crop start {start} outside [0, {n - length}]")
    return buffer.replace(buffer.samples[start:start + length])


def invert_polarity(buffer: AudioBuffer) -> AudioBuffer:
    return buffer.replace(-buffer.samples)


def add_noise(buffer: AudioBuffer, snr_db: float = 80.0, rng: np.random.Generator | None = None,
              strict: bool = False) -> AudioBuffer:
    """Add white Gaussian noise at ``snr_db`` relative to the buffer's RMS.

    A silent buffer has no defined noise level: it is returned unchanged, or
    :class:`SilentInput` is raised when ``strict`` is set.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return buffer
    signal_rms = buffer.rms()
    if signal_rms == 0.0:
        if strict:
            raise SilentInput("cannot set a noise level relative to a silent buffer")
        return buffer
    if rng is None:
        rng = np.random.default_rng()
    noise_rms = signal_rms / 10.0 ** (snr_db / 20.0)
    noise = rng.standard_normal(len(buffer)) * noise_rms
    return buffer.replace(_samples64(buffer) + noise)


def apply_gain(buffer: AudioBuffer, gain_db: float) -> AudioBuffer:
    if not -6.0 <= gain_db <= 0.0:
        raise OutOfRange(f"gain {gain_db} dB outside [-6, 0]")
    return buffer.replace(_samples64(buffer) * 10.0 ** (gain_db / 20.0))


def biquad_coefficients(kind: str, cutoff: float, sample_rate: int,
                        q: float = 1.0 / math.sqrt(2.0)):
    """RBJ cookbook low/high-pass biquad; ``q = 1/sqrt(2)`` is Butterworth."""
    w0 = 2.0 * math.pi * cutoff / sample_rate
    cos_w0 = math.cos(w0)
    alpha = math.sin(w0) / (2.0 * q)
    if kind == "lowpass":
        b = [(1 - cos_w0) / 2, 1 - cos_w0, (1 - cos_w0) / 2]
    elif kind == "highpass":
        b = [(1 + cos_w0) / 2, -(1 + cos_w0), (1 + cos_w0) / 2]
    else:
        raise ValueError(f"unknown filter kind {kind!r}")
    a = [1 + alpha, -2 * cos_w0, 1 - alpha]
    return np.array(b) / a[0], np.array(a) / a[0]


def _clamp_cutoff(cutoff: float, sample_rate: int) -> float:
    return min(cutoff, 0.45 * sample_rate)


def lowpass(buffer: AudioBuffer, cutoff: float) -> AudioBuffer:
    b, a = biquad_coefficients("lowpass", _clamp_cutoff(cutoff, buffer.sample_rate),
                               buffer.sample_rate)
    return buffer.replace(signal.lfilter(b, a, _samples64(buffer)))


def highpass(buffer: AudioBuffer, cutoff: float) -> AudioBuffer:
    b, a = biquad_coefficients("highpass", _clamp_cutoff(cutoff, buffer.sample_rate),
                               buffer.sample_rate)
    return buffer.replace(signal.lfilter(b, a, _samples64(buffer)))


def frequency_filter(buffer: AudioBuffer, rng: np.random.Generator,
                     low_pass_hz=(2200.0, 4000.0), high_pass_hz=(200.0, 1200.0)) -> AudioBuffer:
    """Coin flip between a low-pass and a high-pass with a uniform cutoff."""
    if rng.random() < 0.5:
        return lowpass(buffer, rng.uniform(*low_pass_hz))
    return highpass(buffer, rng.uniform(*high_pass_hz))


def delay_offset(delay_ms: float, sample_rate: int) -> int:
    return int(delay_ms * (sample_rate / 1000))


def apply_delay(buffer: AudioBuffer, delay_ms: float, volume: float = 0.5) -> AudioBuffer:
    x = _samples64(buffer)
    offset = delay_offset(delay_ms, buffer.sample_rate)
    delayed = np.zeros_like(x)
    if offset < x.size:
        delayed[offset:] = x[:x.size - offset]
    return buffer.replace((x + delayed * volume) / 2)


def delay(buffer: AudioBuffer, rng: np.random.Generator, min_ms=200, max_ms=500, step_ms=50,
          volume=0.5) -> AudioBuffer:
    delay_ms = rng.choice(np.arange(min_ms, max_ms, step_ms))
    return apply_delay(buffer, float(delay_ms), volume)


def _wsola_stretch(y: np.ndarray, out_len: int, frame: int = FRAME, hop: int = HOP) -> np.ndarray:
    """Waveform-similarity overlap-add time stretch of ``y`` to ``out_len`` samples."""
    tol = hop // 2
    analysis_hop = hop * y.size / out_len
    n_frames = out_len // hop + 2
    lead = frame // 2 + tol
    tail = int(math.ceil(n_frames * analysis_hop)) + frame + 2 * tol
    yp = np.concatenate([np.zeros(lead), y, np.zeros(max(tail - y.size, 0) + frame)])
    window = np.hanning(frame + 1)[:frame]
    out = np.zeros(n_frames * hop + frame)
    norm = np.zeros_like(out)
    prev = None
    for k in range(n_frames):
        nominal = int(round(k * analysis_hop)) + tol
        if prev is None:
            start = nominal
        else:
            target = yp[prev + hop:prev + hop + frame]
            lo = max(nominal - tol, 0)
            region = yp[lo:nominal + tol + frame]
            if np.any(target):
                score = np.correlate(region, target, mode="valid")
                start = lo + int(np.argmax(score))
            else:
                start = nominal
        out[k * hop:k * hop + frame] += window * yp[start:start + frame]
        norm[k * hop:k * hop + frame] += window
        prev = start
    out = out[frame // 2:frame // 2 + out_len]
    norm = norm[frame // 2:frame // 2 + out_len]
    return out / np.maximum(norm, 1e-8)


def pitch_shift(buffer: AudioBuffer, semitones: float) -> AudioBuffer:
    """Shift pitch by ``semitones`` (12-TET) keeping the length.

    Resamples by ``2**(-semitones/12)`` then time-stretches back.
    """
    if abs(semitones) > 5.0:
        raise OutOfRange(f"pitch shift of {semitones} semitones outside [-5, 5]")
    x = _samples64(buffer)
    ratio = 2.0 ** (-semitones / 12.0)
    shifted_len = max(int(round(x.size * ratio)), 1)
    y = signal.resample(x, shifted_len) if shifted_len != x.size else x
    return buffer.replace(_wsola_stretch(y, x.size))


def _comb(x: np.ndarray, delay_samples: int, feedback: float, damping: float) -> np.ndarray:
    # y[n] = x[n] + feedback * lp[n],  lp[n] = (1 - damping) * y[n - D] + damping * lp[n - 1]
    a = np.zeros(delay_samples + 1)
    a[0] = 1.0
    a[1] = -damping
    a[delay_samples] -= feedback * (1.0 - damping)
    return signal.lfilter([1.0, -damping], a, x)


def _allpass(x: np.ndarray, delay_samples: int, gain: float) -> np.ndarray:
    b = np.zeros(delay_samples + 1)
    b[0] = -gain
    b[delay_samples] = 1.0
    a = np.zeros(delay_samples + 1)
    a[0] = 1.0
    a[delay_samples] = -gain
    return signal.lfilter(b, a, x)


def apply_reverb(buffer: AudioBuffer, room_size: float, reverberance: float,
                 damping: float) -> AudioBuffer:
    """Schroeder reverb: four parallel damped combs into two series all-passes.

    The wet signal is mixed in at ``reverberance / 100`` and the result is
    scaled back to the input's peak level.
    """
    for name, value in (("room_size", room_size), ("reverberance", reverberance),
                        ("damping", damping)):
        if not 0.0 <= value <= 100.0:
            raise OutOfRange(f"{name}={value} outside [0, 100]")
    x = _samples64(buffer)
    scale = (0.5 + room_size / 200.0) * buffer.sample_rate / 22050.0
    feedback = min(reverberance / 100.0, MAX_COMB_FEEDBACK)
    damp = damping / 100.0
    wet = np.zeros_like(x)
    for d in COMB_DELAYS:
        wet += _comb(x, max(int(round(d * scale)), 1), feedback, damp)
    wet /= len(COMB_DELAYS)
    for d in ALLPASS_DELAYS:
        wet = _allpass(wet, max(int(round(d * buffer.sample_rate / 22050.0)), 1),
                       ALLPASS_FEEDBACK)
    out = x + (reverberance / 100.0) * wet
    peak_in = float(np.max(np.abs(buffer.samples)))
    peak_out = float(np.max(np.abs(out)))
    if peak_out > 0.0:
        out = out * (peak_in / peak_out)
    out = out.astype(np.float32)
    return buffer.replace(np.clip(out, -peak_in, peak_in))


def reverb(buffer: AudioBuffer, rng: np.random.Generator, room_size=(0.0, 100.0),
           reverberance=(0.0, 100.0), damping=(0.0, 100.0)) -> AudioBuffer:
    return apply_reverb(buffer, rng.uniform(*room_size), rng.uniform(*reverberance),
                        rng.uniform(*damping))


# ---------------------------------------------------------------------------
# chains and pairs
# ---------------------------------------------------------------------------

@dataclass
class TransformConfig:
    kind: str
    probability: float
    parameters: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TRANSFORM_ORDER:
            raise ValueError(f"unknown transform {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability {self.probability} outside [0, 1]")
        unknown = set(self.parameters) - set(DEFAULT_PARAMETERS[self.kind])
        if unknown:
            raise ValueError(f"unknown {self.kind} parameters: {sorted(unknown)}")
        self.parameters = {**DEFAULT_PARAMETERS[self.kind], **self.parameters}


@dataclass
class TransformChain:
    """Random crop of ``crop_length`` followed by ``transforms`` in canonical order."""

    crop_length: int
    transforms: list[TransformConfig] = field(default_factory=list)

    def __post_init__(self):
        if self.crop_length < 1:
            raise ValueError("crop_length must be positive")
        kinds = [t.kind for t in self.transforms]
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"duplicate transforms in chain: {kinds}")
        if kinds != sorted(kinds, key=TRANSFORM_ORDER.index):
            raise ValueError(f"transforms must follow the order {TRANSFORM_ORDER}")

    @classmethod
    def default(cls, crop_length: int, probabilities: dict[str, float] | None = None,
                parameters: dict[str, dict] | None = None) -> "TransformChain":
        probabilities = {**DEFAULT_PROBABILITIES, **(probabilities or {})}
        parameters = parameters or {}
        return cls(crop_length, [TransformConfig(kind, probabilities[kind], parameters.get(kind, {}))
                                 for kind in TRANSFORM_ORDER])


@dataclass(frozen=True, eq=False)
class ExamplePair:
    x_i: AudioBuffer
    x_j: AudioBuffer
    source_id: str


def _draw_and_apply(kind: str, buffer: AudioBuffer, params: dict, rng: np.random.Generator):
    if kind == "polarity":
        return invert_polarity(buffer)
    if kind == "noise":
        return add_noise(buffer, params["snr_db"], rng)
    if kind == "gain":
        return apply_gain(buffer, float(rng.uniform(params["min_db"], params["max_db"])))
    if kind == "filter":
        return frequency_filter(buffer, rng, params["low_pass_hz"], params["high_pass_hz"])
    if kind == "delay":
        return delay(buffer, rng, params["min_ms"], params["max_ms"], params["step_ms"],
                     params["volume"])
    if kind == "pitch":
        return pitch_shift(buffer, float(rng.uniform(params["min_semitones"],
                                                     params["max_semitones"])))
    if kind == "reverb":
        return reverb(buffer, rng, params["room_size"], params["reverberance"],
                      params["damping"])
    raise ValueError(kind)


def apply_chain(buffer: AudioBuffer, chain: TransformChain, rng: np.random.Generator):
    """Apply the non-crop transforms, each behind its own coin flip.

    Returns the augmented buffer and the list of transform kinds applied.
    """
    applied = []
    for t in chain.transforms:
        if rng.random() < t.probability:
            buffer = _draw_and_apply(t.kind, buffer, t.parameters, rng)
            applied.append(t.kind)
    return buffer, applied


def make_pair(song: AudioBuffer, chain: TransformChain, rng: np.random.Generator,
              asymmetric: bool = False) -> ExamplePair:
    """Two independent crops of ``song``, each augmented independently.

    In asymmetric mode only the first view is augmented; the second stays
    the raw crop.
    """
    if len(song) < chain.crop_length:
        raise TooShort(f"song {song.source_id!r} has {len(song)} samples, "
                       f"needs {chain.crop_length}")
    x_i = random_crop(song, chain.crop_length, rng)
    x_j = random_crop(song, chain.crop_length, rng)
    x_i, _ = apply_chain(x_i, chain, rng)
    if not asymmetric:
        x_j, _ = apply_chain(x_j, chain, rng)
    return ExamplePair(x_i, x_j, song.source_id)
