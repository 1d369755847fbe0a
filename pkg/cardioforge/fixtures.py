"""Desk-scale synthetic PCG / ECG / multichannel-PCG subjects standing in for clinical data."""
import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy import signal

from cardioforge.signal_io import derive_seed, largest_remainder, save_record, write_manifest
from cardioforge.state import Label, ManifestEntry, Modality, MultiRecord, Recording

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


class FixtureConfig(BaseModel):
    n_subjects: int = Field(default=10, ge=0)
    duration_s: float = Field(default=12.0, gt=0)
    fs: int = Field(default=4000, ge=1000)
    abnormal_fraction: float = Field(default=0.5, ge=0, le=1)
    heart_rate_bpm: tuple[float, float] = (60.0, 90.0)
    # Auscultation sites; several sites produce multichannel PCG subjects
    sites: list[str] = Field(default_factory=list)
    include_ecg: bool = True
    murmur_gain: float = Field(default=0.5, ge=0)
    noise_level: float = Field(default=0.01, ge=0)
    dataset: str = "fixtures"


def _burst(t: np.ndarray, centre: float, width_s: float, freq_hz: float) -> np.ndarray:
    """Gaussian-enveloped tone burst."""
    return np.exp(-0.5 * ((t - centre) / width_s) ** 2) * np.sin(2 * np.pi * freq_hz * (t - centre))


def systole_s(period_s: float) -> float:
    """S1-to-S2 interval for a cycle period."""
    return 0.3 * period_s + 0.05


def synth_pcg(t: np.ndarray, period_s: float, abnormal: bool, rng: np.random.Generator, fs: float,
              murmur_gain: float, noise_level: float) -> np.ndarray:
    """S1/S2 bursts per cycle; abnormal subjects add band-limited systolic murmur noise."""
    out = np.zeros_like(t)
    s1_freq, s2_freq = rng.uniform(45, 70), rng.uniform(70, 110)
    systole = systole_s(period_s)
    onsets = np.arange(0.1, t[-1], period_s)
    murmur_band = signal.butter(4, [120.0, 350.0], btype="bandpass", fs=fs, output="sos")
    murmur_noise = signal.sosfiltfilt(murmur_band, rng.standard_normal(t.size))
    murmur_noise /= np.max(np.abs(murmur_noise)) or 1.0
    for onset in onsets:
        jitter = rng.normal(0, 0.005)
        out += _burst(t, onset + jitter, 0.012, s1_freq)
        out += 0.7 * _burst(t, onset + systole + jitter, 0.01, s2_freq)
        if abnormal:
            gate = (t > onset + 0.04) & (t < onset + systole - 0.03)
            out[gate] += murmur_gain * murmur_noise[gate]
    out += noise_level * rng.standard_normal(t.size)
    return out


def synth_ecg(t: np.ndarray, period_s: float, rng: np.random.Generator, noise_level: float) -> np.ndarray:
    """Spike-train pseudo-ECG: narrow QRS, small P and T waves, slight drift."""
    out = np.zeros_like(t)
    for onset in np.arange(0.1, t[-1], period_s):
        out += np.exp(-0.5 * ((t - onset + 0.02) / 0.008) ** 2)
        out -= 0.15 * np.exp(-0.5 * ((t - onset) / 0.01) ** 2)
        out += 0.12 * np.exp(-0.5 * ((t - onset + 0.16) / 0.02) ** 2)
        out += 0.25 * np.exp(-0.5 * ((t - onset - 0.28 * period_s) / 0.04) ** 2)
    out += 0.05 * np.sin(2 * np.pi * rng.uniform(0.1, 0.3) * t + rng.uniform(0, 2 * np.pi))
    return out + noise_level * rng.standard_normal(t.size)


def _peak_normalise(x: np.ndarray, peak: float = 0.9) -> np.ndarray:
    top = np.max(np.abs(x))
    return x * (peak / top) if top > 0 else x


def fixture_subject(subject_id: str, label: Label, seed: int, cfg: FixtureConfig) -> MultiRecord:
    """One synthetic subject; PCG (one channel per site) plus optional pseudo-ECG."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(round(cfg.duration_s * cfg.fs))) / cfg.fs
    heart_rate = float(rng.uniform(*cfg.heart_rate_bpm))
    period = 60.0 / heart_rate
    abnormal = label is Label.ABNORMAL

    channels = []
    pcg = synth_pcg(t, period, abnormal, rng, cfg.fs, cfg.murmur_gain, cfg.noise_level)
    if cfg.sites:
        for index, site in enumerate(cfg.sites):
            # Each site hears the same heart with its own gain, small delay and sensor noise
            delay = int(rng.integers(0, int(0.004 * cfg.fs) + 1))
            gain = rng.uniform(0.5, 1.0)
            site_pcg = gain * np.roll(pcg, delay) + cfg.noise_level * rng.standard_normal(t.size)
            channels.append(Recording(samples=_peak_normalise(site_pcg), fs=float(cfg.fs),
                                      modality=Modality.PCG, channel_site=site))
    else:
        channels.append(Recording(samples=_peak_normalise(pcg), fs=float(cfg.fs), modality=Modality.PCG))
    if cfg.include_ecg and not cfg.sites:
        ecg = synth_ecg(t, period, rng, cfg.noise_level)
        channels.append(Recording(samples=_peak_normalise(ecg), fs=float(cfg.fs), modality=Modality.ECG))

    return MultiRecord(subject_id=subject_id, label=label, channels=tuple(channels), dataset=cfg.dataset,
                       provenance={"record_id": subject_id, "seed": seed, "heart_rate_bpm": heart_rate,
                                   "first_onset_s": 0.1, "systole_s": systole_s(period)})


def make_fixture_records(cfg: FixtureConfig, seed: int = 0) -> list[MultiRecord]:
    """Class-balanced subjects (largest remainder on ``abnormal_fraction``), deterministic per seed."""
    n_normal, n_abnormal = largest_remainder(cfg.n_subjects, [1 - cfg.abnormal_fraction, cfg.abnormal_fraction])
    labels = [Label.NORMAL] * n_normal + [Label.ABNORMAL] * n_abnormal
    records = []
    for index, label in enumerate(labels):
        subject_id = f"fx{index:04d}"
        records.append(fixture_subject(subject_id, label, derive_seed(seed, "fixture", subject_id), cfg))
    return records


def make_fixture_dataset(out_dir: Union[str, Path], cfg: Optional[FixtureConfig] = None,
                         seed: int = 0) -> tuple[Path, list[ManifestEntry]]:
    """
    Write fixture subjects as WAV files plus a JSON-lines manifest.

    Args:
        out_dir: Destination directory.
        cfg: Fixture layout; defaults to 10 PCG+ECG subjects.
        seed: Master seed.

    Returns:
        tuple: (manifest path, manifest entries).
    """
    cfg = cfg or FixtureConfig()
    out_dir = Path(out_dir)
    records = make_fixture_records(cfg, seed)
    entries = [save_record(mrec, out_dir, subtype="PCM_16") for mrec in records]
    manifest = write_manifest(entries, out_dir / MANIFEST_NAME)
    logger.info(f"Wrote {len(entries)} fixture subjects to {out_dir}")
    return manifest, entries
