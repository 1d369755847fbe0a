import numpy as np
import pytest

from cardioforge.fixtures import FixtureConfig
from cardioforge.state import Label, ManifestEntry, Modality, MultiRecord, Recording


def sine(freq_hz: float, fs: float, duration_s: float, amplitude: float = 1.0, phase: float = 0.0) -> np.ndarray:
    t = np.arange(int(round(fs * duration_s))) / fs
    return amplitude * np.sin(2 * np.pi * freq_hz * t + phase)


def tone_amplitude(x: np.ndarray, fs: float, freq_hz: float) -> float:
    """Amplitude of the FFT bin nearest ``freq_hz`` (Hann-windowed, gain-corrected)."""
    window = np.hanning(x.size)
    spectrum = np.abs(np.fft.rfft(x * window)) * 2 / window.sum()
    freqs = np.fft.rfftfreq(x.size, 1 / fs)
    return float(spectrum[np.argmin(np.abs(freqs - freq_hz))])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pcg_recording():
    return Recording(samples=sine(100.0, 4125.0, 6.0, 0.8), fs=4125.0, modality=Modality.PCG)


@pytest.fixture
def make_entries():
    """Manifest entries with ``n_normal`` / ``n_abnormal`` subjects (no files behind them)."""
    def _make(n_normal: int, n_abnormal: int) -> list[ManifestEntry]:
        labels = [Label.NORMAL] * n_normal + [Label.ABNORMAL] * n_abnormal
        return [ManifestEntry(paths=[f"s{i:04d}.wav"], subject_id=f"s{i:04d}", label=label,
                              modalities=[Modality.PCG]) for i, label in enumerate(labels)]
    return _make


@pytest.fixture
def small_fixture_cfg():
    return FixtureConfig(n_subjects=4, duration_s=5.0, fs=2000)


@pytest.fixture
def multichannel_record():
    sites = ["aortic", "pulmonic", "tricuspid", "mitral", "apex", "left"]
    channels = tuple(Recording(samples=sine(60.0 + 10 * i, 4125.0, 3.0, 0.5), fs=4125.0, modality=Modality.PCG,
                               channel_site=site) for i, site in enumerate(sites))
    return MultiRecord(subject_id="mc0001", label=Label.ABNORMAL, channels=channels)
