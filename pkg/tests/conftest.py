import numpy as np
import pytest

from clmrkit.audio_io import AudioBuffer


def tone(freq, n, sr=22050, amp=0.5, phase=0.0):
    t = np.arange(n) / sr
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t + phase), sr, "tone")


def peak_hz(x, sr):
    """FFT peak with parabolic interpolation between bins."""
    x = np.asarray(x, dtype=np.float64)
    spec = np.abs(np.fft.rfft(x * np.hanning(x.size)))
    k = int(np.argmax(spec[1:-1])) + 1
    a, b, c = np.log(spec[k - 1:k + 2] + 1e-300)
    offset = 0.5 * (a - c) / (a - 2 * b + c)
    return (k + offset) * sr / x.size


def band_gain_db(y, x, freq, sr):
    """Output/input magnitude ratio at ``freq`` (dB), Hann-windowed."""
    w = np.hanning(len(x))
    fx = np.abs(np.fft.rfft(np.asarray(x, np.float64) * w))
    fy = np.abs(np.fft.rfft(np.asarray(y, np.float64) * w))
    k = int(round(freq * len(x) / sr))
    return 20 * np.log10(fy[k - 2:k + 3].max() / fx[k - 2:k + 3].max())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, ok: bool, detail: str):
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"{criterion}: {'PASS' if ok else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda k: [int(p) if p.isdigit() else p
                                                    for p in k.replace("(", " ").split()]):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
