"""WAV decoding/encoding, band-limited resampling and fragment reassembly."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import gcd
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from .errors import InvalidRate, MalformedWav, MixedRates, UnsupportedEncoding

CANONICAL_RATES = (8000, 16000, 22050)

_FORMAT_PCM = 0x0001
_FORMAT_FLOAT = 0x0003
_FORMAT_EXTENSIBLE = 0xFFFE

# resampler design
TAPS_PER_PHASE = 256
STOPBAND_DB = 70.0


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Immutable mono waveform.

    ``samples`` is stored as a read-only float32 array.
    """

    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float32, copy=True).reshape(-1)
        if samples.size == 0:
            raise ValueError("AudioBuffer must be non-empty")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def replace(self, samples: np.ndarray) -> "AudioBuffer":
        """Same rate and source, new samples."""
        return AudioBuffer(samples, self.sample_rate, self.source_id)

    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.samples, dtype=np.float64))))


def _parse_chunks(data: bytes):
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWav("missing RIFF/WAVE header")
    riff_size = struct.unpack_from("<I", data, 4)[0]
    if riff_size + 8 > len(data):
        raise MalformedWav(f"RIFF size {riff_size} exceeds file length {len(data)}")
    pos = 12
    end = riff_size + 8
    chunks = {}
    while pos + 8 <= end:
        cid, size = struct.unpack_from("<4sI", data, pos)
        body_start = pos + 8
        if body_start + size > end:
            raise MalformedWav(f"chunk {cid!r} truncated: declares {size} bytes, "
                               f"{end - body_start} available")
        chunks.setdefault(cid, data[body_start:body_start + size])
        pos = body_start + size + (size & 1)
    return chunks


def _parse_fmt(fmt: bytes):
    if len(fmt) < 16:
        raise MalformedWav("fmt chunk too short")
    tag, channels, rate, _byte_rate, block_align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == _FORMAT_EXTENSIBLE:
        if len(fmt) < 26:
            raise MalformedWav("extensible fmt chunk too short")
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if tag not in (_FORMAT_PCM, _FORMAT_FLOAT):
        raise UnsupportedEncoding(f"format tag 0x{tag:04x} is not PCM or IEEE float")
    if channels not in (1, 2):
        raise UnsupportedEncoding(f"{channels} channels; only mono and stereo are supported")
    if rate == 0:
        raise MalformedWav("sample rate is zero")
    if tag == _FORMAT_PCM and bits not in (8, 16, 24, 32):
        raise UnsupportedEncoding(f"{bits}-bit integer PCM")
    if tag == _FORMAT_FLOAT and bits not in (32, 64):
        raise UnsupportedEncoding(f"{bits}-bit float PCM")
    if block_align != channels * bits // 8:
        raise MalformedWav(f"block_align {block_align} inconsistent with {channels}x{bits} bits")
    return tag, channels, rate, bits


def _decode_samples(raw: bytes, tag: int, bits: int) -> np.ndarray:
    if tag == _FORMAT_FLOAT:
        return np.frombuffer(raw, dtype="<f4" if bits == 32 else "<f8").astype(np.float64)
    if bits == 8:
        # 8-bit WAV is unsigned
        return (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    if bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        return ints.astype(np.float64) / float(1 << 23)
    dtype = "<i2" if bits == 16 else "<i4"
    return np.frombuffer(raw, dtype=dtype).astype(np.float64) / float(1 << (bits - 1))


def decode_wav(path, source_id: str | None = None) -> AudioBuffer:
    """Read a RIFF/WAVE file into a mono :class:`AudioBuffer`.

    Integer PCM is divided by ``2**(bits-1)``; stereo is averaged to mono.
    """
    path = Path(path)
    data = path.read_bytes()
    chunks = _parse_chunks(data)
    if b"fmt " not in chunks:
        raise MalformedWav("missing fmt chunk")
    if b"data" not in chunks:
        raise MalformedWav("missing data chunk")
    tag, channels, rate, bits = _parse_fmt(chunks[b"fmt "])
    raw = chunks[b"data"]
    frame_bytes = channels * bits // 8
    if len(raw) % frame_bytes:
        raise MalformedWav(f"data chunk of {len(raw)} bytes is not a whole number of frames")
    if not raw:
        raise MalformedWav("data chunk is empty")
    samples = _decode_samples(raw, tag, bits)
    if channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1)
    if not np.all(np.isfinite(samples)):
        raise MalformedWav("non-finite float samples")
    samples = np.clip(samples, -1.0, 1.0)
    return AudioBuffer(samples, rate, source_id if source_id is not None else path.stem)


def encode_wav(buffer: AudioBuffer, path) -> Path:
    """Write ``buffer`` as a mono 32-bit IEEE-float WAV."""
    path = Path(path)
    payload = np.ascontiguousarray(buffer.samples, dtype="<f4").tobytes()
    rate = buffer.sample_rate
    fmt = struct.pack("<HHIIHH", _FORMAT_FLOAT, 1, rate, rate * 4, 4, 32)
    # non-PCM formats carry a cbSize field and a fact chunk
    fmt += struct.pack("<H", 0)
    fact = struct.pack("<I", len(buffer))
    body = (b"WAVE"
            + b"fmt " + struct.pack("<I", len(fmt)) + fmt
            + b"fact" + struct.pack("<I", len(fact)) + fact
            + b"data" + struct.pack("<I", len(payload)) + payload)
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    return path


def design_lowpass(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc prototype for a ``up/down`` polyphase resampler.

    The stop band starts at the lower of the two Nyquist frequencies so that
    anything that would alias is attenuated by roughly ``STOPBAND_DB``.
    """
    numtaps = TAPS_PER_PHASE * up + 1
    beta = signal.kaiser_beta(STOPBAND_DB)
    # transition width (fraction of the upsampled Nyquist) from Kaiser's estimate
    width = (STOPBAND_DB - 7.95) / (2.285 * np.pi * (numtaps - 1))
    cutoff = 1.0 / max(up, down) - width / 2.0
    return signal.firwin(numtaps, cutoff, window=("kaiser", beta))


def resample(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    if target_rate not in CANONICAL_RATES:
        raise InvalidRate(f"target rate {target_rate} not in {CANONICAL_RATES}")
    if target_rate == buffer.sample_rate:
        return buffer
    g = gcd(buffer.sample_rate, target_rate)
    up, down = target_rate // g, buffer.sample_rate // g
    h = design_lowpass(up, down)
    out = signal.resample_poly(buffer.samples.astype(np.float64), up, down, window=h)
    return AudioBuffer(np.clip(out, -1.0, 1.0), target_rate, buffer.source_id)


def concat_fragments(fragments: Sequence[AudioBuffer]) -> AudioBuffer:
    if not fragments:
        raise ValueError("no fragments to concatenate")
    first = fragments[0]
    for frag in fragments[1:]:
        if frag.sample_rate != first.sample_rate:
            raise MixedRates(f"{frag.sample_rate} Hz fragment among {first.sample_rate} Hz fragments")
        if frag.source_id != first.source_id:
            raise ValueError(f"fragment of {frag.source_id!r} mixed into {first.source_id!r}")
    if len(fragments) == 1:
        return first
    return AudioBuffer(np.concatenate([f.samples for f in fragments]), first.sample_rate,
                       first.source_id)
