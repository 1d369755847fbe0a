"""Filtering, resampling, normalisation, spectrogram features and windowing."""
import logging
from fractions import Fraction
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import librosa
import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from scipy import signal

from cardioforge.errors import DSPSpecError
from cardioforge.state import Fragment, FragmentList, Label, Modality, MultiRecord, Recording

logger = logging.getLogger(__name__)

# Classification-side band edges (Hz)
PREPROCESS_BANDS = {Modality.PCG: (25.0, 400.0), Modality.ECG: (2.0, 60.0)}
# Generation-side band edges (Hz)
GENERATION_BANDS = {Modality.PCG: (2.0, 500.0), Modality.ECG: (0.25, 100.0)}
INTERMEDIATE_FS = 1000.0
GENERATION_FS = 4000.0

KAISER_BETA = 8.6
TAPS_PER_PHASE = 64

DEGENERATE_FLAG = "degenerate_normalization"
SHORT_RECORD_FLAG = "short_record"


class BandpassSpec(BaseModel):
    low_hz: float = Field(gt=0, description="Lower cutoff (Hz)")
    high_hz: float = Field(gt=0, description="Upper cutoff (Hz)")
    order: int = Field(default=4, ge=1, description="Butterworth order per direction")
    fs: Optional[float] = Field(default=None, gt=0, description="Sample rate the band edges were designed for")

    def check(self, fs: float) -> None:
        """Raise DSPSpecError unless 0 < low < high < fs/2."""
        if self.fs is not None and not np.isclose(self.fs, fs):
            raise DSPSpecError(f"Bandpass spec designed for {self.fs} Hz applied at {fs} Hz")
        if not (0 < self.low_hz < self.high_hz < fs / 2):
            raise DSPSpecError(
                f"Band {self.low_hz}-{self.high_hz} Hz invalid at fs={fs} Hz (need 0 < low < high < fs/2)",
                low_hz=self.low_hz, high_hz=self.high_hz, fs=fs)

    def padlen(self, n_samples: int) -> int:
        """Reflect-pad length: 3x the band-pass order (twice the Butterworth order), capped by the signal."""
        return min(3 * 2 * self.order, n_samples - 1)


class MelSpec(BaseModel):
    window_len: int = Field(default=1024, ge=1)
    hop: int = Field(default=256, ge=1)
    n_mels: int = Field(default=80, ge=1)
    fs: Optional[float] = Field(default=None, gt=0)
    fmin: float = Field(default=0.0, ge=0)
    fmax: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _hop_fits_window(self):
        if self.hop > self.window_len:
            raise ValueError(f"hop ({self.hop}) must not exceed window_len ({self.window_len})")
        return self


class SegmentSpec(BaseModel):
    window_s: float = Field(default=4.0, gt=0, description="Window length in seconds")
    overlap_s: float = Field(default=0.25, ge=0, description="Overlap between consecutive windows")
    skip_head_s: float = Field(default=0.3, ge=0, description="Discarded recording head")

    @model_validator(mode="after")
    def _overlap_below_window(self):
        if self.overlap_s >= self.window_s:
            raise ValueError(f"overlap_s ({self.overlap_s}) must be smaller than window_s ({self.window_s})")
        return self


def bandpass(rec: Recording, spec: BandpassSpec) -> Recording:
    """
    Zero-phase Butterworth band-pass (forward-backward second-order sections).

    Args:
        rec: Input recording.
        spec: Band edges and order; must be valid for ``rec.fs``.

    Returns:
        Recording: Filtered copy, same length.
    """
    spec.check(rec.fs)
    sos = signal.butter(spec.order, [spec.low_hz, spec.high_hz], btype="bandpass", fs=rec.fs, output="sos")
    filtered = signal.sosfiltfilt(sos, rec.samples, padtype="even", padlen=spec.padlen(len(rec)))
    return rec.derive(filtered, step=f"bandpass_{spec.low_hz:g}_{spec.high_hz:g}")


def _resample_ratio(fs: float, target_fs: float) -> Fraction:
    return Fraction(target_fs).limit_denominator(10_000) / Fraction(fs).limit_denominator(10_000)


def resample(rec: Recording, target_fs: float) -> Recording:
    """
    Polyphase windowed-sinc resampling (Kaiser window, 64 taps per phase).

    Output length is ``round(len * target_fs / fs)``; equal rates return an
    exact copy.
    """
    if not (target_fs > 0):
        raise DSPSpecError(f"target_fs must be positive, got {target_fs}")
    if target_fs == rec.fs:
        return rec.derive(rec.samples.copy(), step="resample_identity")

    n_out = int(round(len(rec) * target_fs / rec.fs))
    if n_out == 0:
        raise DSPSpecError(f"Resampling {len(rec)} samples from {rec.fs} to {target_fs} Hz yields no samples")

    ratio = _resample_ratio(rec.fs, target_fs)
    up, down = ratio.numerator, ratio.denominator
    max_rate = max(up, down)
    half_len = TAPS_PER_PHASE // 2 * max_rate
    taps = signal.firwin(2 * half_len + 1, 1.0 / max_rate, window=("kaiser", KAISER_BETA))
    out = signal.resample_poly(rec.samples, up, down, window=taps, padtype="line")

    if out.size >= n_out:
        out = out[:n_out]
    else:
        out = np.pad(out, (0, n_out - out.size), mode="edge")
    return rec.derive(out, fs=float(target_fs), step=f"resample_{target_fs:g}")


def minmax_normalize(rec: Recording) -> Recording:
    """Affine map of [min, max] onto [-1, 1]; a constant signal becomes zeros and is flagged."""
    lo, hi = float(rec.samples.min()), float(rec.samples.max())
    if hi == lo:
        logger.warning("Constant signal: min-max normalisation is degenerate, returning zeros")
        return rec.derive(np.zeros_like(rec.samples), step="minmax", flag=DEGENERATE_FLAG)
    scaled = 2.0 * (rec.samples - lo) / (hi - lo) - 1.0
    return rec.derive(np.clip(scaled, -1.0, 1.0), step="minmax")


def preprocess_chain(rec: Recording, modality: Optional[Modality] = None, target_fs: float = 4125.0,
                     renormalize: bool = True) -> Recording:
    """
    Classification-side chain: resample to 1 kHz, band-pass, min-max, resample to ``target_fs``.

    With ``renormalize`` the output is min-max normalised once more after the
    final resample so it spans exactly [-1, 1].

    Args:
        rec: Raw recording.
        modality: Selects the band (PCG 25-400 Hz, ECG 2-60 Hz); defaults to ``rec.modality``.
        target_fs: Classifier input rate.
        renormalize: Re-apply min-max after the last resample.

    Returns:
        Recording: Preprocessed recording at ``target_fs``.
    """
    modality = Modality(modality or rec.modality)
    low, high = PREPROCESS_BANDS[modality]
    if rec.fs < 2 * high:
        raise DSPSpecError(f"{modality.value} input at {rec.fs} Hz is below twice the {high} Hz band edge")

    out = resample(rec, INTERMEDIATE_FS)
    out = bandpass(out, BandpassSpec(low_hz=low, high_hz=high))
    out = minmax_normalize(out)
    out = resample(out, target_fs)
    if renormalize and DEGENERATE_FLAG not in out.flags:
        out = minmax_normalize(out)
    return out


def generation_chain(rec: Recording, modality: Optional[Modality] = None,
                     target_fs: float = GENERATION_FS) -> Recording:
    """Synthesis-side chain: wide band-pass (PCG 2-500 Hz, ECG 0.25-100 Hz) then resample."""
    modality = Modality(modality or rec.modality)
    low, high = GENERATION_BANDS[modality]
    out = bandpass(rec, BandpassSpec(low_hz=low, high_hz=high))
    return resample(out, target_fs)


def stft(rec: Union[Recording, np.ndarray], window_len: int = 1024, hop: int = 256) -> np.ndarray:
    """
    Centered (reflect-padded) Hann STFT.

    Returns:
        np.ndarray: Complex matrix [window_len // 2 + 1, len // hop + 1].
    """
    samples = rec.samples if isinstance(rec, Recording) else np.asarray(rec, dtype=np.float64)
    if hop <= 0:
        raise DSPSpecError(f"hop must be positive, got {hop}")
    if window_len > samples.size:
        raise DSPSpecError(f"window_len {window_len} exceeds signal length {samples.size}")
    return librosa.stft(samples, n_fft=window_len, hop_length=hop, window="hann",
                        center=True, pad_mode="reflect")


def istft(matrix: np.ndarray, window_len: int = 1024, hop: int = 256, length: Optional[int] = None) -> np.ndarray:
    return librosa.istft(matrix, hop_length=hop, n_fft=window_len, window="hann", center=True, length=length)


def mel_filterbank(spec: MelSpec, fs: float) -> np.ndarray:
    """HTK-scale triangular filterbank [n_mels, window_len // 2 + 1]."""
    n_bins = spec.window_len // 2 + 1
    if spec.n_mels > n_bins:
        raise DSPSpecError(f"n_mels={spec.n_mels} exceeds the {n_bins} STFT bins of window_len={spec.window_len}")
    fmax = spec.fmax if spec.fmax is not None else fs / 2
    if fmax > fs / 2 or spec.fmin >= fmax:
        raise DSPSpecError(f"Mel range {spec.fmin}-{fmax} Hz invalid at fs={fs} Hz")
    return librosa.filters.mel(sr=fs, n_fft=spec.window_len, n_mels=spec.n_mels,
                               fmin=spec.fmin, fmax=fmax, htk=True)


def mel_spectrogram(rec: Recording, spec: Optional[MelSpec] = None) -> np.ndarray:
    """
    Log-compressed mel power spectrogram, ``log(1 + S)``.

    Args:
        rec: Input recording.
        spec: Window, hop and band layout; ``spec.fs`` (if set) must match ``rec.fs``.

    Returns:
        np.ndarray: Non-negative matrix [n_mels, frames].
    """
    spec = spec or MelSpec()
    if spec.fs is not None and not np.isclose(spec.fs, rec.fs):
        raise DSPSpecError(f"Mel spec designed for {spec.fs} Hz applied at {rec.fs} Hz")
    filterbank = mel_filterbank(spec, rec.fs)
    power = np.abs(stft(rec, spec.window_len, spec.hop)) ** 2
    return np.log1p(filterbank @ power)


def segment(rec: Recording, spec: Optional[SegmentSpec] = None, subject_id: str = "",
            label: Label = Label.NORMAL, source: str = "original") -> FragmentList:
    """
    Cut overlapping fixed-length windows after skipping the recording head.

    Window boundaries are computed in samples; the trailing partial window is
    dropped. A recording shorter than skip + window yields an empty list with
    ``short_record`` set.
    """
    spec = spec or SegmentSpec()
    skip_n, win_n, step_n = _segment_geometry(spec, rec.fs)
    n = len(rec)
    if n < skip_n + win_n:
        logger.warning(f"Recording of {subject_id or '<anonymous>'} is {rec.duration:.2f}s, "
                       f"shorter than skip + window ({spec.skip_head_s + spec.window_s:.2f}s)")
        return FragmentList(short_record=True)

    count = (n - skip_n - win_n) // step_n + 1
    fragments = [
        Fragment(samples=rec.samples[start:start + win_n], fs=rec.fs, subject_id=subject_id,
                 label=label, offset=start, source=source)
        for start in (skip_n + i * step_n for i in range(count))
    ]
    return FragmentList(fragments)


def _segment_geometry(spec: SegmentSpec, fs: float) -> tuple[int, int, int]:
    skip_n = int(round(spec.skip_head_s * fs))
    win_n = int(round(spec.window_s * fs))
    step_n = win_n - int(round(spec.overlap_s * fs))
    if win_n < 1 or step_n < 1:
        raise DSPSpecError(f"Segment spec {spec} gives an empty window at fs={fs}")
    return skip_n, win_n, step_n


def segment_multi(mrec: MultiRecord, spec: Optional[SegmentSpec] = None) -> FragmentList:
    """Synchronized windows across all channels; fragments are [channels, window]."""
    spec = spec or SegmentSpec()
    rates = {ch.fs for ch in mrec.channels}
    if len(rates) != 1:
        raise DSPSpecError(f"Channels of {mrec.subject_id} have different rates {sorted(rates)}; resample first",
                           subject_id=mrec.subject_id)
    fs = rates.pop()
    n = min(len(ch) for ch in mrec.channels)
    stacked = np.stack([ch.samples[:n] for ch in mrec.channels])

    skip_n, win_n, step_n = _segment_geometry(spec, fs)
    if n < skip_n + win_n:
        logger.warning(f"Record {mrec.subject_id} is too short to segment ({n / fs:.2f}s)")
        return FragmentList(short_record=True)
    count = (n - skip_n - win_n) // step_n + 1
    return FragmentList([
        Fragment(samples=stacked[:, start:start + win_n], fs=fs, subject_id=mrec.subject_id,
                 label=mrec.label, offset=start, source=mrec.source_tag)
        for start in (skip_n + i * step_n for i in range(count))
    ])


def cap_fragments(fragments: Sequence[Fragment], cap: int, rng: np.random.Generator) -> FragmentList:
    """Keep at most ``cap`` randomly chosen fragments, preserving their original order."""
    short = getattr(fragments, "short_record", False)
    if cap < 0:
        raise DSPSpecError(f"Fragment cap must be non-negative, got {cap}")
    if len(fragments) <= cap:
        return FragmentList(fragments, short_record=short)
    keep = np.sort(rng.choice(len(fragments), size=cap, replace=False))
    return FragmentList([fragments[i] for i in keep], short_record=short)


def fade_curves(fade_len: int, curve: Literal["linear", "equal_power"] = "equal_power"
                ) -> tuple[np.ndarray, np.ndarray]:
    """Fade-out / fade-in gain curves of ``fade_len`` samples."""
    ramp = (np.arange(fade_len) + 0.5) / fade_len
    if curve == "linear":
        return 1.0 - ramp, ramp
    if curve == "equal_power":
        return np.cos(0.5 * np.pi * ramp), np.sin(0.5 * np.pi * ramp)
    raise DSPSpecError(f"Unknown crossfade curve: {curve}")


def crossfade_join(segments: Sequence[np.ndarray], fade_len: int,
                   curve: Literal["linear", "equal_power"] = "equal_power") -> np.ndarray:
    """
    Overlap-add consecutive segments, blending ``fade_len`` samples at each join.

    The joined length is ``sum(len) - fade_len * (n_segments - 1)``; the fade
    shrinks at a join whose neighbours are shorter than ``fade_len``.
    """
    segments = [np.asarray(seg, dtype=np.float64) for seg in segments if len(seg) > 0]
    if not segments:
        return np.zeros(0)
    out = segments[0].copy()
    for seg in segments[1:]:
        fade = min(fade_len, out.size, seg.size)
        if fade == 0:
            out = np.concatenate([out, seg])
            continue
        fade_out, fade_in = fade_curves(fade, curve)
        blended = out[-fade:] * fade_out + seg[:fade] * fade_in
        out = np.concatenate([out[:-fade], blended, seg[fade:]])
    return out


def dump_spectrogram_csv(matrix: np.ndarray, path: Union[str, Path]) -> Path:
    """Debug export: one frame per row, one column per frequency/mel bin."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.abs(matrix) if np.iscomplexobj(matrix) else matrix
    frame = pd.DataFrame(values.T, columns=[f"bin_{i}" for i in range(values.shape[0])])
    frame.to_csv(path, index_label="frame")
    return path
