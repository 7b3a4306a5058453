import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from clmrkit.audio_io import (AudioBuffer, concat_fragments, decode_wav, design_lowpass,
                              encode_wav, resample)
from clmrkit.errors import InvalidRate, MalformedWav, MixedRates, UnsupportedEncoding

from conftest import tone


def write_pcm(path, ints, width, channels=1, rate=22050):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        if width == 3:
            raw = b"".join(int(v).to_bytes(3, "little", signed=True) for v in ints)
        else:
            dtype = {1: np.uint8, 2: "<i2", 4: "<i4"}[width]
            raw = np.asarray(ints).astype(dtype).tobytes()
        w.writeframes(raw)


def test_16bit_full_scale(tmp_path):
    write_pcm(tmp_path / "a.wav", [32767, -32768, 0, 16384], 2)
    buf = decode_wav(tmp_path / "a.wav")
    assert buf.samples.tolist() == pytest.approx([32767 / 32768, -1.0, 0.0, 0.5], abs=0)
    assert buf.sample_rate == 22050
    assert buf.source_id == "a"


@pytest.mark.parametrize("width,ints", [
    (1, [0, 128, 255, 64]),
    (3, [2 ** 23 - 1, -2 ** 23, 0, 12345]),
    (4, [2 ** 31 - 1, -2 ** 31, 0, -7]),
])
def test_pcm_widths(tmp_path, width, ints):
    write_pcm(tmp_path / "a.wav", ints, width)
    got = decode_wav(tmp_path / "a.wav").samples.astype(np.float64)
    if width == 1:
        want = (np.array(ints) - 128) / 128.0
    else:
        want = np.array(ints, dtype=np.float64) / 2.0 ** (8 * width - 1)
    np.testing.assert_allclose(got, want.astype(np.float32), rtol=0, atol=0)


def test_stereo_is_averaged(tmp_path):
    write_pcm(tmp_path / "s.wav", [16384, 0, -16384, 16384], 2, channels=2)
    np.testing.assert_array_equal(decode_wav(tmp_path / "s.wav").samples, [0.25, 0.0])


def test_float_round_trip_is_exact(tmp_path, rng):
    x = rng.uniform(-1, 1, 1001).astype(np.float32)
    path = encode_wav(AudioBuffer(x, 16000, "x"), tmp_path / "x.wav")
    back = decode_wav(path)
    np.testing.assert_array_equal(back.samples, x)
    assert back.sample_rate == 16000


def test_encoded_float_wav_readable_by_scipy(tmp_path, rng):
    from scipy.io import wavfile
    x = rng.uniform(-1, 1, 300).astype(np.float32)
    encode_wav(AudioBuffer(x, 8000), tmp_path / "x.wav")
    rate, data = wavfile.read(tmp_path / "x.wav")
    assert rate == 8000
    np.testing.assert_array_equal(data, x)


def test_truncated_file_raises(tmp_path):
    write_pcm(tmp_path / "a.wav", np.arange(100), 2)
    data = (tmp_path / "a.wav").read_bytes()
    (tmp_path / "b.wav").write_bytes(data[:-51])
    with pytest.raises(MalformedWav):
        decode_wav(tmp_path / "b.wav")


def test_not_riff_raises(tmp_path):
    (tmp_path / "a.wav").write_bytes(b"ID3\x00" * 20)
    with pytest.raises(MalformedWav):
        decode_wav(tmp_path / "a.wav")


def test_unsupported_format_tag(tmp_path):
    fmt = struct.pack("<HHIIHH", 0x0055, 1, 8000, 1000, 1, 8)   # MP3 in WAV
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", 4) + b"\0" * 4
    (tmp_path / "m.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with pytest.raises(UnsupportedEncoding):
        decode_wav(tmp_path / "m.wav")


def test_buffer_is_immutable():
    buf = AudioBuffer(np.zeros(4), 8000)
    with pytest.raises(ValueError):
        buf.samples[0] = 1.0
    with pytest.raises(ValueError):
        AudioBuffer(np.zeros(0), 8000)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, st.integers(1, 400), elements=st.floats(-1, 1, width=32)),
       st.sampled_from([8000, 16000, 22050]))
def test_round_trip_property(tmp_path_factory, x, rate):
    path = tmp_path_factory.mktemp("rt") / "x.wav"
    back = decode_wav(encode_wav(AudioBuffer(x, rate), path))
    np.testing.assert_array_equal(back.samples, x)


def test_resample_identity_and_invalid_rate():
    buf = tone(440, 1000)
    assert resample(buf, 22050) is buf
    with pytest.raises(InvalidRate):
        resample(buf, 44100)


@pytest.mark.parametrize("src,dst,seconds", [(22050, 8000, 2.0), (8000, 16000, 1.5),
                                             (16000, 22050, 1.0)])
def test_resample_length(src, dst, seconds):
    out = resample(tone(200, int(src * seconds), sr=src), dst)
    assert len(out) == int(dst * seconds)
    assert out.sample_rate == dst


def tone_rms_db(freq, src, dst, seconds=2.0):
    """Output/input RMS ratio (dB) of a resampled sine, edges trimmed."""
    x = tone(freq, int(src * seconds), sr=src)
    y = resample(x, dst).samples.astype(np.float64)[dst // 10:-dst // 10]
    return 20 * np.log10(np.sqrt(np.mean(y ** 2)) / x.rms())


@pytest.mark.parametrize("src,dst", [(22050, 8000), (22050, 16000), (16000, 8000),
                                     (8000, 22050)])
def test_resample_passband_within_1db(src, dst):
    nyquist = min(src, dst) / 2
    for frac in (0.05, 0.5, 0.9):
        assert abs(tone_rms_db(frac * nyquist, src, dst)) < 1.0, frac


@pytest.mark.parametrize("src,dst", [(22050, 8000), (22050, 16000), (16000, 8000)])
def test_resample_stopband_60db(src, dst):
    for frac in (1.02, 1.2, 1.35):
        freq = frac * dst / 2
        if freq < src / 2:
            assert tone_rms_db(freq, src, dst) < -60, frac


def test_resample_keeps_tone_frequency():
    y = resample(tone(1000, 22050 * 2), 8000)
    spec = np.abs(np.fft.rfft(y.samples * np.hanning(len(y))))
    assert abs(np.argmax(spec) * 8000 / len(y) - 1000) <= 8000 / len(y)


def test_lowpass_prototype_is_symmetric():
    h = design_lowpass(160, 441)
    assert h.size == 256 * 160 + 1
    np.testing.assert_allclose(h, h[::-1], atol=1e-15)


def test_concat_is_associative(rng):
    a, b, c = (AudioBuffer(rng.uniform(-1, 1, n), 8000, "s") for n in (3, 5, 7))
    left = concat_fragments([concat_fragments([a, b]), c])
    right = concat_fragments([a, concat_fragments([b, c])])
    np.testing.assert_array_equal(left.samples, right.samples)
    assert concat_fragments([a]).samples.tolist() == a.samples.tolist()


def test_concat_fragments():
    a = AudioBuffer(np.ones(3), 8000, "s")
    b = AudioBuffer(np.zeros(2), 8000, "s")
    np.testing.assert_array_equal(concat_fragments([a, b]).samples, [1, 1, 1, 0, 0])
    with pytest.raises(MixedRates):
        concat_fragments([a, AudioBuffer(np.zeros(2), 16000, "s")])
    with pytest.raises(ValueError):
        concat_fragments([a, AudioBuffer(np.zeros(2), 8000, "t")])
