"""Offline and online augmentation of PCG/ECG recordings."""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import librosa
import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy import signal

from cardioforge import dsp
from cardioforge.errors import ArgumentError, ConfigError, DSPSpecError
from cardioforge.signal_io import derive_seed, load_record
from cardioforge.state import Fragment, Label, ManifestEntry, Modality, MultiRecord, Recording, SourceKind

logger = logging.getLogger(__name__)

# Offline pipeline order
OFFLINE_OPS = (
    "hpss",
    "white_noise",
    "time_stretch",
    "amplitude_modulation",
    "baseline_wander",
    "parametric_eq",
    "clinical_noise",
)

NOISE_KINDS = ("pcg_clinical", "ecg_baseline_wander", "ecg_muscle", "ecg_electrode")

SILENT_FLAG = "silent_input"
HPSS_SHORT_FLAG = "hpss_short_input"


class AugmentProbabilities(BaseModel):
    hpss: float = Field(default=0.75, ge=0, le=1)
    white_noise: float = Field(default=0.075, ge=0, le=1)
    time_stretch: float = Field(default=0.25, ge=0, le=1)
    amplitude_modulation: float = Field(default=0.75, ge=0, le=1)
    baseline_wander: float = Field(default=0.75, ge=0, le=1)
    parametric_eq: float = Field(default=0.25, ge=0, le=1)
    clinical_noise: float = Field(default=0.5, ge=0, le=1)


class OnlineProbabilities(BaseModel):
    mask: float = Field(default=0.2, ge=0, le=1)
    stretch: float = Field(default=0.2, ge=0, le=1)


class AugmentRanges(BaseModel):
    """Parameter ranges; every op draws uniformly from its range (EQ centre log-uniformly)."""
    stretch_rate: tuple[float, float] = (0.85, 1.15)
    white_snr_db: tuple[float, float] = (15.0, 30.0)
    clinical_snr_db: tuple[float, float] = (5.0, 20.0)
    am_depth: tuple[float, float] = (0.05, 0.4)
    am_rate_hz: tuple[float, float] = (0.1, 1.0)
    wander_amp: tuple[float, float] = (0.05, 0.3)
    wander_hz: tuple[float, float] = (0.1, 0.8)
    eq_center_pcg_hz: tuple[float, float] = (30.0, 350.0)
    eq_center_ecg_hz: tuple[float, float] = (3.0, 55.0)
    eq_gain_db: tuple[float, float] = (-6.0, 6.0)
    eq_q: tuple[float, float] = (0.7, 3.0)
    # Online masking
    max_time_mask_frac: float = 0.1
    max_freq_bands: int = 8

    @field_validator("stretch_rate", "white_snr_db", "clinical_snr_db", "am_depth", "am_rate_hz", "wander_amp",
                     "wander_hz", "eq_center_pcg_hz", "eq_center_ecg_hz", "eq_gain_db", "eq_q")
    @classmethod
    def _ordered(cls, value: tuple[float, float]) -> tuple[float, float]:
        if value[0] > value[1]:
            raise ValueError(f"range lower bound exceeds upper bound: {value}")
        return value


class AugmentConfig(BaseModel):
    probabilities: AugmentProbabilities = Field(default_factory=AugmentProbabilities)
    online: OnlineProbabilities = Field(default_factory=OnlineProbabilities)
    ranges: AugmentRanges = Field(default_factory=AugmentRanges)
    seed: int = Field(default=0, description="Master seed for augmented-dataset construction")
    hpss_kernel: int = Field(default=31, ge=3)
    hpss_window: int = Field(default=512, ge=16)
    online_window: int = Field(default=256, ge=16)
    online_hop: int = Field(default=64, ge=1)
    # WSOLA frame and search tolerance, seconds
    stretch_frame_s: float = Field(default=0.064, gt=0)
    stretch_tolerance_s: float = Field(default=0.016, ge=0)
    crossfade_s: float = Field(default=0.05, ge=0)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        """All offline and online probabilities set to zero."""
        zeros = {name: 0.0 for name in OFFLINE_OPS}
        return cls(probabilities=AugmentProbabilities(**zeros), online=OnlineProbabilities(mask=0.0, stretch=0.0))


@dataclass
class NoiseBank:
    """Noise clips by kind (PCG clinical noise, ECG wander / muscle / electrode artefacts)."""

    clips: dict[str, list[Recording]] = field(default_factory=dict)

    def clips_for(self, kind: str) -> list[Recording]:
        return self.clips.get(kind, [])

    def is_empty(self, kind: Optional[str] = None) -> bool:
        if kind is None:
            return not any(self.clips.values())
        return not self.clips_for(kind)

    @classmethod
    def synthetic(cls, fs: float = 4125.0, seed: int = 0, duration_s: float = 8.0, n_per_kind: int = 2) -> "NoiseBank":
        """Stand-in bank of filtered noise and drift clips, peak-normalised to 1."""
        rng = np.random.default_rng(seed)
        n = int(round(duration_s * fs))
        t = np.arange(n) / fs
        clips: dict[str, list[Recording]] = {kind: [] for kind in NOISE_KINDS}
        for _ in range(n_per_kind):
            band = signal.butter(4, [25.0, min(400.0, 0.45 * fs)], btype="bandpass", fs=fs, output="sos")
            clinical = signal.sosfilt(band, rng.standard_normal(n))
            # Sparse handling bumps on top of the stethoscope noise floor
            bumps = np.zeros(n)
            bumps[rng.integers(0, n, size=max(1, int(duration_s)))] = rng.uniform(2.0, 5.0)
            clinical += signal.sosfilt(band, bumps)
            clips["pcg_clinical"].append(_noise_clip(clinical, fs, Modality.PCG, "pcg_clinical"))

            freqs = rng.uniform(0.05, 0.6, size=3)
            phases = rng.uniform(0, 2 * np.pi, size=3)
            wander = np.sum([np.sin(2 * np.pi * f * t + p) for f, p in zip(freqs, phases)], axis=0)
            clips["ecg_baseline_wander"].append(_noise_clip(wander, fs, Modality.ECG, "ecg_baseline_wander"))

            muscle_band = signal.butter(4, [20.0, min(150.0, 0.45 * fs)], btype="bandpass", fs=fs, output="sos")
            muscle = signal.sosfilt(muscle_band, rng.standard_normal(n)) * (1 + 0.5 * np.sin(2 * np.pi * 0.3 * t))
            clips["ecg_muscle"].append(_noise_clip(muscle, fs, Modality.ECG, "ecg_muscle"))

            lowpass = signal.butter(2, 2.0, btype="lowpass", fs=fs, output="sos")
            steps = np.cumsum(rng.standard_normal(n) * (rng.random(n) < 5.0 / fs))
            electrode = signal.sosfilt(lowpass, steps) + 0.05 * rng.standard_normal(n)
            clips["ecg_electrode"].append(_noise_clip(electrode, fs, Modality.ECG, "ecg_electrode"))
        return cls(clips)

    @classmethod
    def from_manifest(cls, entries: Sequence[ManifestEntry], root: Union[str, Path]) -> "NoiseBank":
        """Build a bank from manifest entries whose provenance names a ``noise_kind``."""
        clips: dict[str, list[Recording]] = {kind: [] for kind in NOISE_KINDS}
        for entry in entries:
            kind = entry.provenance.get("noise_kind")
            if kind not in clips:
                raise ConfigError(f"Noise entry {entry.subject_id} has unknown noise_kind {kind!r}",
                                  subject_id=entry.subject_id)
            clips[kind].extend(load_record(entry, root).channels)
        logger.info(f"Loaded noise bank: { {kind: len(found) for kind, found in clips.items()} }")
        return cls(clips)


def _noise_clip(samples: np.ndarray, fs: float, modality: Modality, kind: str) -> Recording:
    peak = np.max(np.abs(samples))
    return Recording(samples=samples / peak if peak > 0 else samples, fs=fs, modality=modality, channel_site=kind)


@lru_cache(maxsize=8)
def default_noise_bank(fs: float = 4125.0, seed: int = 0) -> NoiseBank:
    return NoiseBank.synthetic(fs=fs, seed=seed)


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def hpss(rec: Recording, kernel: int = 31, window_len: int = 512) -> Recording:
    """
    Keep the harmonic part of a median-filtering harmonic/percussive separation.

    Soft masks with power 2; the harmonic median runs across time, the
    percussive median across frequency. Inputs shorter than the STFT window
    pass through flagged.
    """
    if len(rec) < window_len:
        logger.warning(f"HPSS input of {len(rec)} samples is shorter than the {window_len}-sample window")
        return rec.flagged(HPSS_SHORT_FLAG)
    hop = window_len // 4
    spectrum = dsp.stft(rec, window_len, hop)
    harmonic, _ = librosa.decompose.hpss(spectrum, kernel_size=kernel, power=2.0, mask=False)
    return rec.derive(dsp.istft(harmonic, window_len, hop, length=len(rec)), step="hpss")


def add_white_noise(rec: Recording, snr_db: float, rng: np.random.Generator) -> Recording:
    """Add Gaussian noise scaled to hit ``snr_db`` exactly; silent input passes through flagged."""
    if np.isposinf(snr_db):
        return rec.derive(rec.samples.copy())
    if not np.isfinite(snr_db):
        raise DSPSpecError(f"snr_db must be finite or +inf, got {snr_db}")
    p_signal = _power(rec.samples)
    if p_signal == 0.0:
        logger.warning("White noise requested on a silent recording; SNR undefined, passing through")
        return rec.flagged(SILENT_FLAG)
    noise = rng.standard_normal(len(rec))
    noise *= np.sqrt(p_signal / 10 ** (snr_db / 10) / _power(noise))
    return rec.derive(rec.samples + noise, step="white_noise")


def time_stretch(rec: Recording, rate: float, frame_s: float = 0.064, tolerance_s: float = 0.016) -> Recording:
    """
    Pitch-preserving WSOLA time stretch.

    ``rate > 1`` shortens the recording. The output has exactly
    ``round(len / rate)`` samples.

    Args:
        rec: Input recording.
        rate: Playback-speed factor, must be positive.
        frame_s: Analysis frame length in seconds.
        tolerance_s: Maximum waveform-similarity shift in seconds.

    Returns:
        Recording: Stretched recording.
    """
    if not rate > 0:
        raise ArgumentError(f"Stretch rate must be positive, got {rate}")
    if rate == 1.0:
        return rec.derive(rec.samples.copy(), step="time_stretch_1")
    out = wsola(rec.samples, rate,
                frame_len=max(8, 2 * int(round(frame_s * rec.fs / 2))),
                tolerance=int(round(tolerance_s * rec.fs)))
    return rec.derive(out, step=f"time_stretch_{rate:.4f}")


def wsola(x: np.ndarray, rate: float, frame_len: int, tolerance: int) -> np.ndarray:
    n = x.size
    n_out = int(round(n / rate))
    hop = frame_len // 2
    window = signal.get_window("hann", frame_len)
    n_frames = int(np.ceil(n_out / hop)) + 2

    pad = frame_len + tolerance + hop
    tail = int(np.ceil(n_frames * hop * rate)) + 2 * frame_len + tolerance + hop
    xp = np.pad(x, (pad, max(0, tail - n)))
    y = np.zeros((n_frames + 2) * hop + frame_len)

    previous = None
    for k in range(-1, n_frames):
        nominal = pad + int(round(k * hop * rate))
        if previous is None or tolerance == 0:
            start = nominal
        else:
            continuation = xp[previous + hop:previous + hop + frame_len]
            lo = nominal - tolerance
            region = xp[lo:lo + frame_len + 2 * tolerance]
            similarity = np.correlate(region, continuation, mode="valid")
            start = lo + int(np.argmax(similarity)) if np.any(similarity) else nominal
        out_pos = (k + 1) * hop
        y[out_pos:out_pos + frame_len] += window * xp[start:start + frame_len]
        previous = start
    return y[hop:hop + n_out]


def amplitude_modulation(rec: Recording, depth: float, mod_hz: float, phase: float = 0.0) -> Recording:
    """Multiply by ``1 + depth * sin(2*pi*mod_hz*t + phase)``."""
    if not 0.0 <= depth < 1.0:
        raise DSPSpecError(f"Modulation depth must be in [0, 1), got {depth}")
    if not 0.0 <= mod_hz < rec.fs / 2:
        raise DSPSpecError(f"Modulation rate {mod_hz} Hz is not below fs/2")
    t = np.arange(len(rec)) / rec.fs
    return rec.derive(rec.samples * (1.0 + depth * np.sin(2 * np.pi * mod_hz * t + phase)),
                      step="amplitude_modulation")


def baseline_wander(rec: Recording, amp: float, wander_hz: float, phase: float = 0.0,
                    clip: Optional[np.ndarray] = None) -> Recording:
    """
    Add a slow drift: ``amp * sin(2*pi*wander_hz*t + phase)``, or ``amp * clip / max|clip|``
    when a bank clip of at least the recording's length is given.
    """
    if wander_hz > 1.0:
        raise DSPSpecError(f"Baseline wander above 1 Hz ({wander_hz}) is not a drift")
    if abs(amp) > 0.5:
        raise DSPSpecError(f"Baseline wander amplitude {amp} exceeds 0.5")
    if clip is not None:
        clip = np.asarray(clip, dtype=np.float64)[:len(rec)]
        if clip.size < len(rec):
            raise DSPSpecError(f"Wander clip of {clip.size} samples is shorter than the recording")
        peak = np.max(np.abs(clip))
        drift = amp * clip / peak if peak > 0 else np.zeros(len(rec))
    else:
        t = np.arange(len(rec)) / rec.fs
        drift = amp * np.sin(2 * np.pi * wander_hz * t + phase)
    return rec.derive(rec.samples + drift, step="baseline_wander")


def peaking_biquad(center_hz: float, gain_db: float, q: float, fs: float) -> tuple[np.ndarray, np.ndarray]:
    """Audio-EQ-Cookbook peaking filter coefficients (b, a), normalised so a[0] = 1."""
    amp = 10 ** (gain_db / 40)
    w0 = 2 * np.pi * center_hz / fs
    alpha = np.sin(w0) / (2 * q)
    b = np.array([1 + alpha * amp, -2 * np.cos(w0), 1 - alpha * amp])
    a = np.array([1 + alpha / amp, -2 * np.cos(w0), 1 - alpha / amp])
    return b / a[0], a / a[0]


def parametric_eq(rec: Recording, center_hz: float, gain_db: float, q: float) -> Recording:
    if not 0 < center_hz < rec.fs / 2:
        raise DSPSpecError(f"EQ centre {center_hz} Hz must lie in (0, fs/2)")
    if abs(gain_db) > 12:
        raise DSPSpecError(f"EQ gain {gain_db} dB exceeds +/-12 dB")
    if not 0.5 <= q <= 5:
        raise DSPSpecError(f"EQ Q {q} outside [0.5, 5]")
    if gain_db == 0:
        return rec.derive(rec.samples.copy(), step="parametric_eq")
    b, a = peaking_biquad(center_hz, gain_db, q, rec.fs)
    return rec.derive(signal.lfilter(b, a, rec.samples), step="parametric_eq")


def tile_clip(clip: np.ndarray, length: int, fade_len: int) -> np.ndarray:
    """Repeat ``clip`` with crossfaded joins until it covers ``length`` samples."""
    clip = np.asarray(clip, dtype=np.float64)
    if clip.size >= length:
        return clip.copy()
    fade_len = min(fade_len, clip.size // 2)
    usable = clip.size - fade_len
    repeats = int(np.ceil((length - fade_len) / usable)) if usable > 0 else length
    return dsp.crossfade_join([clip] * max(repeats, 1), fade_len)


def _bank_kind(modality: Modality, bank: NoiseBank, rng: np.random.Generator) -> str:
    if modality is Modality.PCG:
        return "pcg_clinical"
    kinds = [kind for kind in ("ecg_baseline_wander", "ecg_muscle", "ecg_electrode") if not bank.is_empty(kind)]
    if not kinds:
        raise ConfigError("Noise bank has no ECG noise clips")
    return kinds[int(rng.integers(len(kinds)))]


def add_clinical_noise(rec: Recording, bank: NoiseBank, snr_db: float, rng: np.random.Generator,
                       kind: Optional[str] = None, crossfade_s: float = 0.05) -> Recording:
    """
    Mix a random-offset slice of a bank clip at ``snr_db``.

    The clip is resampled to the recording's rate and tiled with crossfades
    when it is shorter than the recording.
    """
    if bank is None or bank.is_empty():
        raise ConfigError("Clinical noise requested with an empty noise bank")
    kind = kind or _bank_kind(rec.modality, bank, rng)
    clips = bank.clips_for(kind)
    if not clips:
        raise ConfigError(f"Noise bank has no clips of kind {kind}", kind=kind)
    p_signal = _power(rec.samples)
    if p_signal == 0.0:
        logger.warning("Clinical noise requested on a silent recording; passing through")
        return rec.flagged(SILENT_FLAG)

    clip = clips[int(rng.integers(len(clips)))]
    if clip.fs != rec.fs:
        clip = dsp.resample(clip, rec.fs)
    noise = tile_clip(clip.samples, len(rec), int(round(crossfade_s * rec.fs)))
    offset = int(rng.integers(0, noise.size - len(rec) + 1))
    noise = noise[offset:offset + len(rec)]
    p_noise = _power(noise)
    if p_noise == 0.0:
        return rec.derive(rec.samples.copy(), step=f"clinical_noise_{kind}")
    noise = noise * np.sqrt(p_signal / 10 ** (snr_db / 10) / p_noise)
    return rec.derive(rec.samples + noise, step=f"clinical_noise_{kind}")


@dataclass
class AugmentPlan:
    """Fire decisions and drawn parameters for one pass of the offline pipeline."""

    fired: dict[str, bool]
    params: dict[str, dict[str, Any]]

    @property
    def applied(self) -> list[str]:
        return [name for name in OFFLINE_OPS if self.fired.get(name)]


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def draw_plan(cfg: AugmentConfig, rng: np.random.Generator, modality: Modality = Modality.PCG,
              stretch: Optional[tuple[bool, float]] = None) -> AugmentPlan:
    """
    Draw every fire decision first (in pipeline order), then parameters for the ops that fire.

    Args:
        cfg: Augmentation config.
        rng: Random generator; fully determines the plan.
        modality: Selects the EQ centre range.
        stretch: Optional shared (fired, rate) decision overriding the local draw.

    Returns:
        AugmentPlan: The drawn plan.
    """
    probabilities = cfg.probabilities.model_dump()
    fired = {name: bool(rng.random() < probabilities[name]) for name in OFFLINE_OPS}
    ranges = cfg.ranges
    params: dict[str, dict[str, Any]] = {}
    if fired["white_noise"]:
        params["white_noise"] = {"snr_db": _uniform(rng, ranges.white_snr_db)}
    if fired["time_stretch"]:
        params["time_stretch"] = {"rate": _uniform(rng, ranges.stretch_rate)}
    if fired["amplitude_modulation"]:
        params["amplitude_modulation"] = {"depth": _uniform(rng, ranges.am_depth),
                                          "mod_hz": _uniform(rng, ranges.am_rate_hz),
                                          "phase": _uniform(rng, (0.0, 2 * np.pi))}
    if fired["baseline_wander"]:
        params["baseline_wander"] = {"amp": _uniform(rng, ranges.wander_amp),
                                     "wander_hz": _uniform(rng, ranges.wander_hz),
                                     "phase": _uniform(rng, (0.0, 2 * np.pi))}
    if fired["parametric_eq"]:
        lo, hi = ranges.eq_center_pcg_hz if modality is Modality.PCG else ranges.eq_center_ecg_hz
        params["parametric_eq"] = {"center_hz": float(np.exp(rng.uniform(np.log(lo), np.log(hi)))),
                                   "gain_db": _uniform(rng, ranges.eq_gain_db),
                                   "q": _uniform(rng, ranges.eq_q)}
    if fired["clinical_noise"]:
        params["clinical_noise"] = {"snr_db": _uniform(rng, ranges.clinical_snr_db)}

    if stretch is not None:
        fired["time_stretch"] = stretch[0]
        params.pop("time_stretch", None)
        if stretch[0]:
            params["time_stretch"] = {"rate": stretch[1]}
    return AugmentPlan(fired=fired, params=params)


def execute_plan(rec: Recording, plan: AugmentPlan, cfg: AugmentConfig, rng: np.random.Generator,
                 bank: Optional[NoiseBank] = None) -> Recording:
    out = rec
    for name in plan.applied:
        params = plan.params.get(name, {})
        if name == "hpss":
            out = hpss(out, kernel=cfg.hpss_kernel, window_len=cfg.hpss_window)
        elif name == "white_noise":
            out = add_white_noise(out, params["snr_db"], rng)
        elif name == "time_stretch":
            out = time_stretch(out, params["rate"], cfg.stretch_frame_s, cfg.stretch_tolerance_s)
        elif name == "amplitude_modulation":
            out = amplitude_modulation(out, params["depth"], params["mod_hz"], params["phase"])
        elif name == "baseline_wander":
            clip = _wander_clip(out, bank, rng)
            out = baseline_wander(out, params["amp"], params["wander_hz"], params["phase"], clip=clip)
        elif name == "parametric_eq":
            center = min(params["center_hz"], 0.45 * out.fs)
            out = parametric_eq(out, center, params["gain_db"], params["q"])
        elif name == "clinical_noise":
            bank = bank if bank is not None else default_noise_bank(float(out.fs))
            out = add_clinical_noise(out, bank, params["snr_db"], rng, crossfade_s=cfg.crossfade_s)
    return out


def _wander_clip(rec: Recording, bank: Optional[NoiseBank], rng: np.random.Generator) -> Optional[np.ndarray]:
    """ECG channels use a bank wander clip when one is available."""
    if rec.modality is not Modality.ECG or bank is None or bank.is_empty("ecg_baseline_wander"):
        return None
    clips = bank.clips_for("ecg_baseline_wander")
    clip = clips[int(rng.integers(len(clips)))]
    if clip.fs != rec.fs:
        clip = dsp.resample(clip, rec.fs)
    tiled = tile_clip(clip.samples, len(rec), int(round(0.05 * rec.fs)))
    offset = int(rng.integers(0, tiled.size - len(rec) + 1))
    return tiled[offset:offset + len(rec)]


def augment_single(rec: Recording, cfg: AugmentConfig, rng: np.random.Generator,
                   bank: Optional[NoiseBank] = None) -> Recording:
    """Apply each offline augmentation with its probability, in pipeline order."""
    plan = draw_plan(cfg, rng, rec.modality)
    return execute_plan(rec, plan, cfg, rng, bank)


def augment_multi(mrec: MultiRecord, cfg: AugmentConfig, rng: np.random.Generator,
                  bank: Optional[NoiseBank] = None) -> MultiRecord:
    """
    Augment every channel of a record with one shared time-stretch decision.

    The stretch fire/rate is drawn once and applied to all channels so they
    stay aligned; every other op is drawn independently per channel.

    The applied op names per channel are recorded as ``provenance["applied_ops"]``.
    """
    stretch_fired = bool(rng.random() < cfg.probabilities.time_stretch)
    rate = _uniform(rng, cfg.ranges.stretch_rate) if stretch_fired else 1.0
    channels, applied = [], []
    for channel in mrec.channels:
        plan = draw_plan(cfg, rng, channel.modality, stretch=(stretch_fired, rate))
        channels.append(execute_plan(channel, plan, cfg, rng, bank))
        applied.append(plan.applied)
    provenance = {**mrec.provenance, "applied_ops": applied}
    return mrec.with_channels(channels, source=SourceKind.AUGMENTED, provenance=provenance)


def _mel_band_edges(fs: float, n_bands: int = 80) -> np.ndarray:
    return librosa.mel_frequencies(n_mels=n_bands + 1, fmin=0.0, fmax=fs / 2, htk=True)


def time_mask(samples: np.ndarray, start_frame: int, width: int, window_len: int, hop: int) -> np.ndarray:
    """Zero ``width`` STFT frames from ``start_frame`` and resynthesise."""
    spectrum = dsp.stft(samples, window_len, hop)
    spectrum[:, start_frame:start_frame + width] = 0
    return dsp.istft(spectrum, window_len, hop, length=samples.size)


def freq_mask(samples: np.ndarray, fs: float, first_band: int, n_bands: int, window_len: int, hop: int) -> np.ndarray:
    """Zero the STFT bins inside ``n_bands`` consecutive mel-equivalent bands and resynthesise."""
    edges = _mel_band_edges(fs)
    lo, hi = edges[first_band], edges[min(first_band + n_bands, edges.size - 1)]
    freqs = librosa.fft_frequencies(sr=fs, n_fft=window_len)
    spectrum = dsp.stft(samples, window_len, hop)
    spectrum[(freqs >= lo) & (freqs < hi), :] = 0
    return dsp.istft(spectrum, window_len, hop, length=samples.size)


def _center_fit(x: np.ndarray, length: int) -> np.ndarray:
    if x.size >= length:
        start = (x.size - length) // 2
        return x[start:start + length]
    before = (length - x.size) // 2
    return np.pad(x, (before, length - x.size - before))


def online_augment(frag: Fragment, cfg: AugmentConfig, rng: np.random.Generator) -> Fragment:
    """
    Training-time augmentation of a fixed-length fragment.

    With its probability, masks up to 10% of STFT frames and up to 8
    mel-equivalent bands; with its own probability, time-stretches and
    centre-crops or pads back. Masks and stretch are shared across channels.
    The fragment length never changes.
    """
    samples = frag.samples.copy()
    n = frag.length
    window, hop = min(cfg.online_window, n), cfg.online_hop

    if rng.random() < cfg.online.mask and n >= window:
        n_frames = n // hop + 1
        width = int(rng.integers(1, max(1, int(cfg.ranges.max_time_mask_frac * n_frames)) + 1))
        start = int(rng.integers(0, n_frames - width + 1))
        bands = int(rng.integers(1, cfg.ranges.max_freq_bands + 1))
        first_band = int(rng.integers(0, 80 - bands + 1))
        samples = np.stack([
            freq_mask(time_mask(channel, start, width, window, hop), frag.fs, first_band, bands, window, hop)
            for channel in samples
        ])

    if rng.random() < cfg.online.stretch:
        rate = _uniform(rng, cfg.ranges.stretch_rate)
        frame_len = max(8, 2 * int(round(cfg.stretch_frame_s * frag.fs / 2)))
        tolerance = int(round(cfg.stretch_tolerance_s * frag.fs))
        samples = np.stack([_center_fit(wsola(channel, rate, frame_len, tolerance), n) for channel in samples])

    return frag.with_samples(samples)


def make_augmented_dataset(records: Sequence[MultiRecord], counts: Mapping[Union[Label, str], int],
                           cfg: AugmentConfig, seed: Optional[int] = None,
                           bank: Optional[NoiseBank] = None) -> list[MultiRecord]:
    """
    Emit ``counts[label]`` augmented copies of every source record.

    Each copy is seeded from (seed, subject id, copy index), so the result
    does not depend on record order.

    Args:
        records: Preprocessed source records.
        counts: Copies per class label.
        cfg: Augmentation config.
        seed: Master seed; defaults to ``cfg.seed``.
        bank: Noise bank for clinical noise and ECG wander.

    Returns:
        list[MultiRecord]: Augmented records with provenance.
    """
    master = cfg.seed if seed is None else seed
    per_label = {Label(label): int(count) for label, count in counts.items()}
    if any(count < 0 for count in per_label.values()):
        raise ConfigError(f"Augment counts must be non-negative, got {dict(counts)}")

    out: list[MultiRecord] = []
    for mrec in records:
        for copy in range(per_label.get(mrec.label, 0)):
            copy_seed = derive_seed(master, mrec.subject_id, copy)
            augmented = augment_multi(mrec, cfg, np.random.default_rng(copy_seed), bank)
            out.append(augmented.with_channels(augmented.channels, provenance={
                "source_subject": mrec.subject_id,
                "record_id": f"{mrec.provenance.get('record_id', mrec.subject_id)}_aug{copy}",
                "seed": copy_seed,
                "applied_ops": augmented.provenance["applied_ops"],
            }))
    logger.info(f"Built {len(out)} augmented records from {len(records)} sources")
    return out
