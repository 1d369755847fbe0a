"""Conditional denoising diffusion for synthetic PCG generation."""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field
from scipy.ndimage import uniform_filter1d
from scipy.signal import find_peaks
from torch import nn

from cardioforge import dsp
from cardioforge.errors import ArgumentError, ConfigError, SamplingError, TrainingError
from cardioforge.model import (CHECKPOINT_VERSION, read_json_checkpoint, records_to_tensors, tensors_to_records,
                               write_json_checkpoint)
from cardioforge.signal_io import derive_seed, largest_remainder
from cardioforge.state import Label, Modality, MultiRecord, Recording, SourceKind

logger = logging.getLogger(__name__)

GENERATOR_TAGS = ("diffwave_style", "wavegrad_style")
REARRANGE_MODES = ("single", "chunks_1_4", "groups")
FEW_CYCLES_FLAG = "too_few_cycles"
DIVERGENCE_LIMIT = 1e3


class ScheduleConfig(BaseModel):
    n_steps: int = Field(default=50, ge=1)
    beta_start: float = Field(default=1e-4, gt=0, lt=1)
    beta_end: float = Field(default=0.2, gt=0, lt=1)


class DenoiserConfig(BaseModel):
    flavour: Literal["diffwave_style", "wavegrad_style"] = "diffwave_style"
    n_layers: int = Field(default=4, ge=1)
    channels: int = Field(default=16, ge=1)
    dilation_cycle: int = Field(default=4, ge=1)
    embed_dim: int = Field(default=32, ge=2, multiple_of=2)
    n_mels: int = Field(default=80, ge=1)
    mel_window: int = Field(default=1024, ge=16)
    mel_hop: int = Field(default=256, ge=1)
    # Disease labels x channel-pair labels (1 pair for single-channel generation)
    n_global_labels: int = Field(default=2, ge=1)
    fs: float = Field(default=dsp.GENERATION_FS, gt=0)
    segment_s: float = Field(default=1.0, gt=0)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances beta_t with alpha_t = 1 - beta_t and alpha_bar_t = prod(alpha_s)."""

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ConfigError("Noise schedule needs a non-empty 1-D beta array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("Noise schedule betas must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)
        if self.alpha_bars[-1] >= 0.01:
            raise ConfigError(f"Noise schedule ends at alpha_bar_T={self.alpha_bars[-1]:.4f}; it must be below 0.01",
                              alpha_bar_T=float(self.alpha_bars[-1]))

    @classmethod
    def linear(cls, n_steps: int = 50, beta_start: float = 1e-4, beta_end: float = 0.2) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, n_steps))

    @classmethod
    def from_config(cls, cfg: ScheduleConfig) -> "NoiseSchedule":
        return cls.linear(cfg.n_steps, cfg.beta_start, cfg.beta_end)

    @property
    def n_steps(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        self._check_step(t)
        return float(self.alpha_bars[t - 1])

    def _check_step(self, t) -> None:
        steps = np.asarray(t)
        if np.any(steps < 1) or np.any(steps > self.n_steps):
            raise ArgumentError(f"Diffusion step must be in [1, {self.n_steps}], got {t}")


@dataclass(frozen=True)
class CondLabel:
    """Global conditioning: disease label plus, in multichannel mode, a (conditioning, target) site pair."""

    disease: Label
    channel_pair: Optional[tuple[str, str]] = None

    def index(self, sites: Optional[Sequence[str]] = None) -> int:
        disease = Label(self.disease).index
        if self.channel_pair is None:
            if sites:
                raise ConfigError("Multichannel generation needs a channel pair label")
            return disease
        if not sites:
            raise ConfigError("A channel pair label is only valid in multichannel mode")
        source, target = self.channel_pair
        n_pairs = len(sites) ** 2
        return disease * n_pairs + list(sites).index(source) * len(sites) + list(sites).index(target)


def q_sample(x0, alpha_bar, eps):
    """Closed-form forward corruption ``sqrt(a) * x0 + sqrt(1 - a) * eps`` (numpy or torch)."""
    if isinstance(alpha_bar, torch.Tensor):
        return alpha_bar.sqrt() * x0 + (1 - alpha_bar).sqrt() * eps
    return math.sqrt(alpha_bar) * x0 + math.sqrt(1.0 - alpha_bar) * eps


def forward_diffuse(x0, t: int, eps, schedule: NoiseSchedule):
    """x_t for a 1-based step ``t``."""
    return q_sample(x0, schedule.alpha_bar(t), eps)


def step_embedding(values: torch.Tensor, dim: int, scale: float = 1.0) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) step or noise-level values [B] -> [B, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=values.dtype, device=values.device) / max(half - 1, 1))
    args = scale * values.unsqueeze(1) * freqs.unsqueeze(0)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResidualBlock(nn.Module):
    """Dilated gated conv with step/label projection and mel conditioning; returns (residual, skip)."""

    def __init__(self, cfg: DenoiserConfig, dilation: int):
        super().__init__()
        self.dilated_conv = nn.Conv1d(cfg.channels, 2 * cfg.channels, 3, padding=dilation, dilation=dilation)
        self.embedding_projection = nn.Linear(cfg.embed_dim, cfg.channels)
        self.conditioner_projection = nn.Conv1d(cfg.n_mels, 2 * cfg.channels, 1)
        self.output_projection = nn.Conv1d(cfg.channels, 2 * cfg.channels, 1)

    def forward(self, x: torch.Tensor, embedding: torch.Tensor,
                conditioner: Optional[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        y = x + self.embedding_projection(embedding).unsqueeze(-1)
        y = self.dilated_conv(y)
        if conditioner is not None:
            y = y + self.conditioner_projection(conditioner)
        gate, filt = y.chunk(2, dim=1)
        y = self.output_projection(torch.sigmoid(gate) * torch.tanh(filt))
        residual, skip = y.chunk(2, dim=1)
        return (x + residual) / math.sqrt(2.0), skip


class ToyDenoiser(nn.Module):
    """
    Desk-scale noise predictor with a DiffWave-shaped body.

    ``diffwave_style`` embeds the discrete step; ``wavegrad_style`` embeds
    the continuous noise level sqrt(alpha_bar). Mel conditioning is
    nearest-upsampled to the audio rate; the global label is embedded and
    added to the step embedding.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.input_projection = nn.Conv1d(1, cfg.channels, 1)
        self.embedding_mlp = nn.Sequential(nn.Linear(cfg.embed_dim, cfg.embed_dim), nn.SiLU(),
                                           nn.Linear(cfg.embed_dim, cfg.embed_dim), nn.SiLU())
        self.label_embedding = nn.Embedding(cfg.n_global_labels, cfg.embed_dim)
        self.blocks = nn.ModuleList(
            ResidualBlock(cfg, 2 ** (index % cfg.dilation_cycle)) for index in range(cfg.n_layers))
        self.skip_projection = nn.Conv1d(cfg.channels, cfg.channels, 1)
        self.output_projection = nn.Conv1d(cfg.channels, 1, 1)
        nn.init.zeros_(self.output_projection.weight)
        nn.init.zeros_(self.output_projection.bias)

    def forward(self, audio: torch.Tensor, step: torch.Tensor, noise_level: torch.Tensor,
                mel: Optional[torch.Tensor] = None, label: Optional[torch.Tensor] = None) -> torch.Tensor:
        length = audio.shape[-1]
        x = F.relu(self.input_projection(audio.unsqueeze(1)))
        if self.cfg.flavour == "wavegrad_style":
            embedding = step_embedding(noise_level.to(audio.dtype), self.cfg.embed_dim, scale=1000.0)
        else:
            embedding = step_embedding(step.to(audio.dtype), self.cfg.embed_dim)
        embedding = self.embedding_mlp(embedding)
        if label is not None:
            embedding = embedding + self.label_embedding(label)
        conditioner = F.interpolate(mel, size=length, mode="nearest") if mel is not None else None

        skips = torch.zeros_like(x)
        for block in self.blocks:
            x, skip = block(x, embedding, conditioner)
            skips = skips + skip
        y = F.relu(self.skip_projection(skips / math.sqrt(len(self.blocks))))
        return self.output_projection(y).squeeze(1)


@dataclass
class Conditioning:
    """Batched conditioning: mel [B, n_mels, frames] and global label indices [B]."""

    mel: Optional[torch.Tensor] = None
    label: Optional[torch.Tensor] = None


def _schedule_tensors(schedule: NoiseSchedule, dtype: torch.dtype) -> dict[str, torch.Tensor]:
    return {
        "betas": torch.as_tensor(schedule.betas, dtype=dtype),
        "alphas": torch.as_tensor(schedule.alphas, dtype=dtype),
        "alpha_bars": torch.as_tensor(schedule.alpha_bars, dtype=dtype),
    }


def diffusion_loss(denoiser: nn.Module, x0: torch.Tensor, cond: Optional[Conditioning], schedule: NoiseSchedule,
                   rng: torch.Generator, backward: bool = True) -> torch.Tensor:
    """
    L1 noise-prediction loss at uniformly drawn steps.

    Args:
        denoiser: Callable ``(x_t, step, noise_level, mel, label) -> eps_hat``.
        x0: Clean batch [B, L].
        cond: Conditioning for the batch.
        schedule: Noise schedule.
        rng: Torch generator for steps and noise.
        backward: Populate parameter gradients.

    Returns:
        torch.Tensor: Scalar loss.
    """
    cond = cond or Conditioning()
    x0 = torch.as_tensor(x0)
    if x0.dim() == 1:
        x0 = x0.unsqueeze(0)
    table = _schedule_tensors(schedule, x0.dtype)
    steps = torch.randint(1, schedule.n_steps + 1, (x0.shape[0],), generator=rng)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    alpha_bar = table["alpha_bars"][steps - 1].unsqueeze(-1)
    x_t = q_sample(x0, alpha_bar, eps)
    predicted = denoiser(x_t, steps, alpha_bar.squeeze(-1).sqrt(), cond.mel, cond.label)
    loss = (predicted - eps).abs().mean()
    if not torch.isfinite(loss):
        raise TrainingError("Diffusion loss is not finite",
                            steps=steps.tolist(), x0_max=float(x0.abs().max()),
                            prediction_finite=bool(torch.isfinite(predicted).all()))
    if backward:
        loss.backward()
    return loss


@torch.no_grad()
def sample_batch(denoiser: nn.Module, cond: Optional[Conditioning], schedule: NoiseSchedule, length: int,
                 rng: torch.Generator, batch_size: int = 1, dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0; returns [B, length]."""
    cond = cond or Conditioning()
    dtype = dtype or torch.get_default_dtype()
    table = _schedule_tensors(schedule, dtype)
    x = torch.randn((batch_size, length), generator=rng, dtype=dtype)
    for t in range(schedule.n_steps, 0, -1):
        beta, alpha, alpha_bar = table["betas"][t - 1], table["alphas"][t - 1], table["alpha_bars"][t - 1]
        steps = torch.full((batch_size,), t, dtype=torch.long)
        eps_hat = denoiser(x, steps, alpha_bar.sqrt().expand(batch_size), cond.mel, cond.label)
        x = (x - beta / (1 - alpha_bar).sqrt() * eps_hat) / alpha.sqrt()
        if t > 1:
            x = x + beta.sqrt() * torch.randn((batch_size, length), generator=rng, dtype=dtype)
        if not torch.isfinite(x).all() or x.abs().max() > DIVERGENCE_LIMIT:
            raise SamplingError(f"Sampling diverged at step {t}", step=t)
    return x


def sample(denoiser: nn.Module, cond: Optional[Conditioning], schedule: NoiseSchedule, length: int,
           rng: torch.Generator, fs: float = dsp.GENERATION_FS, modality: Modality = Modality.PCG,
           channel_site: Optional[str] = None) -> Recording:
    """Draw one waveform of ``length`` samples."""
    was_training = denoiser.training
    denoiser.eval()
    try:
        x = sample_batch(denoiser, cond, schedule, length, rng, batch_size=1)
    finally:
        denoiser.train(was_training)
    return Recording(samples=x[0].double().numpy(), fs=fs, modality=modality, channel_site=channel_site,
                     history=("diffusion_sample",))


def shannon_envelope(samples: np.ndarray, fs: float, smooth_s: float = 0.02) -> np.ndarray:
    """Smoothed Shannon energy -x^2 log(x^2) of the peak-normalised signal."""
    peak = np.max(np.abs(samples))
    if peak == 0:
        return np.zeros_like(samples)
    energy = np.square(samples / peak)
    shannon = -energy * np.log(energy + 1e-12)
    return uniform_filter1d(shannon, size=max(1, int(round(smooth_s * fs))))


def detect_cycle_marks(rec: Recording, min_distance_s: float = 0.15) -> np.ndarray:
    """
    Cycle boundaries from a Shannon-energy envelope.

    Heart-sound peaks are picked on the envelope; when the peak intervals
    alternate short/long (S1-S2 / S2-S1) only the long (diastolic) gaps are
    cut. Each mark sits at the envelope minimum inside its gap.
    """
    envelope = shannon_envelope(rec.samples, rec.fs)
    if not np.any(envelope):
        return np.zeros(0, dtype=int)
    peaks, _ = find_peaks(envelope, distance=max(1, int(round(min_distance_s * rec.fs))),
                          prominence=0.3 * envelope.max())
    if peaks.size < 2:
        return np.zeros(0, dtype=int)
    intervals = np.diff(peaks)
    gaps = np.arange(intervals.size)
    if intervals.size >= 3:
        even, odd = np.median(intervals[0::2]), np.median(intervals[1::2])
        if abs(even - odd) > 0.15 * np.median(intervals):
            gaps = gaps[1::2] if even < odd else gaps[0::2]
    return np.array([peaks[g] + int(np.argmin(envelope[peaks[g]:peaks[g + 1]])) for g in gaps], dtype=int)


def plan_rearrangement(n_cycles: int, mode: str, rng: np.random.Generator) -> tuple[list[tuple[int, int]], np.ndarray]:
    """
    Group ``n_cycles`` consecutive cycles into units and draw their new order.

    Returns:
        tuple: (units as [first_cycle, last_cycle + 1) ranges, permutation of unit indices).
    """
    if mode == "single":
        units = [(c, c + 1) for c in range(n_cycles)]
    elif mode == "chunks_1_4":
        units, start = [], 0
        while start < n_cycles:
            size = int(rng.integers(1, 5))
            units.append((start, min(start + size, n_cycles)))
            start += size
    elif mode == "groups":
        n_groups = int(rng.integers(2, min(3, n_cycles) + 1))
        cuts = np.sort(rng.choice(np.arange(1, n_cycles), size=n_groups - 1, replace=False))
        bounds = [0, *cuts.tolist(), n_cycles]
        units = list(zip(bounds[:-1], bounds[1:]))
    else:
        raise ArgumentError(f"Unknown rearrangement mode: {mode}")
    return units, rng.permutation(len(units))


def rearrange(samples: np.ndarray, marks: np.ndarray, units: Sequence[tuple[int, int]], order: Sequence[int],
              fade_len: int, curve: str = "equal_power") -> np.ndarray:
    """
    Reorder cycle units between ``marks[0]`` and ``marks[-1]`` and blend each join.

    Length is preserved. At a join from unit A to unit B the output blends
    A's natural continuation into B's natural predecessor over ``fade_len``
    samples centred on the join.
    """
    samples = np.asarray(samples, dtype=np.float64)
    marks = np.asarray(marks, dtype=int)
    spans = [(marks[first], marks[last]) for first, last in units]
    ordered = [spans[index] for index in order]
    out = np.concatenate([samples[:marks[0]], *(samples[a:b] for a, b in ordered), samples[marks[-1]:]])

    half = fade_len // 2
    position = marks[0]
    boundaries = [(None, ordered[0][0])] + [(ordered[k][1], ordered[k + 1][0]) for k in range(len(ordered) - 1)]
    boundaries.append((ordered[-1][1], None))
    for (a_end, b_start), length in zip(boundaries, [0] + [b - a for a, b in ordered]):
        position += length
        if a_end is None:
            # Head join: previous content is the untouched head
            a_end = marks[0]
        if b_start is None:
            b_start = marks[-1]
        if a_end == b_start:
            continue
        fade = min(half, a_end, b_start, samples.size - a_end, samples.size - b_start, position, out.size - position)
        if fade <= 0:
            continue
        fade_out, fade_in = dsp.fade_curves(2 * fade, curve)
        continuation = samples[a_end - fade:a_end + fade]
        predecessor = samples[b_start - fade:b_start + fade]
        out[position - fade:position + fade] = fade_out * continuation + fade_in * predecessor
    return out


def cycle_rearrange(rec: Recording, cycle_marks: Optional[np.ndarray], mode: str, rng: np.random.Generator,
                    crossfade_s: float = 0.01) -> Recording:
    """
    Shuffle cardiac cycles (single cycles, 1-4 cycle chunks or large groups) with crossfaded joins.

    Fewer than two cycles pass through flagged.
    """
    marks = detect_cycle_marks(rec) if cycle_marks is None else np.asarray(cycle_marks, dtype=int)
    if marks.size < 3:
        logger.warning(f"Cycle rearrangement needs at least 2 cycles, found {max(marks.size - 1, 0)}")
        return rec.flagged(FEW_CYCLES_FLAG)
    units, order = plan_rearrangement(marks.size - 1, mode, rng)
    out = rearrange(rec.samples, marks, units, order, int(round(crossfade_s * rec.fs)))
    return rec.derive(out, step=f"cycle_rearrange_{mode}")


def rearrange_channels(channels: Sequence[np.ndarray], marks: np.ndarray, mode: str, rng: np.random.Generator,
                       fade_len: int) -> list[np.ndarray]:
    """Apply one rearrangement plan to several synchronised channels."""
    units, order = plan_rearrangement(marks.size - 1, mode, rng)
    return [rearrange(channel, marks, units, order, fade_len) for channel in channels]


@dataclass
class TrainingExample:
    """One generator training window: target waveform, optional conditioning waveform, global label."""

    target: np.ndarray
    cond_wave: Optional[np.ndarray]
    label: int
    fs: float


def conditioning_mel(cond_wave: np.ndarray, cfg: DenoiserConfig) -> np.ndarray:
    spec = dsp.MelSpec(window_len=min(cfg.mel_window, cond_wave.size), hop=cfg.mel_hop, n_mels=cfg.n_mels)
    return dsp.mel_spectrogram(Recording(samples=cond_wave, fs=cfg.fs), spec)


def make_training_examples(records: Sequence[MultiRecord], cfg: DenoiserConfig,
                           sites: Optional[Sequence[str]] = None) -> list[TrainingExample]:
    """
    Cut generator training windows from original records.

    Single-channel mode (``sites`` empty): target is the PCG channel,
    conditioning is the ECG channel. Multichannel mode: every ordered pair
    of distinct sites becomes (conditioning, target) with a pair label.
    """
    window = int(round(cfg.segment_s * cfg.fs))
    examples = []
    for mrec in records:
        chained = [dsp.generation_chain(channel) for channel in mrec.channels]
        n = min(len(channel) for channel in chained)
        starts = range(0, n - window + 1, window)
        if sites:
            by_site = {channel.channel_site: channel.samples for channel in chained}
            for source in sites:
                for target in sites:
                    if source == target or source not in by_site or target not in by_site:
                        continue
                    label = CondLabel(mrec.label, (source, target)).index(sites)
                    examples += [TrainingExample(by_site[target][s:s + window], by_site[source][s:s + window],
                                                 label, cfg.fs) for s in starts]
        else:
            pcg = next((c for c in chained if c.modality is Modality.PCG), None)
            ecg = next((c for c in chained if c.modality is Modality.ECG), None)
            if pcg is None:
                continue
            label = CondLabel(mrec.label).index()
            examples += [TrainingExample(pcg.samples[s:s + window],
                                         ecg.samples[s:s + window] if ecg is not None else None,
                                         label, cfg.fs) for s in starts]
    logger.info(f"Prepared {len(examples)} generator training windows")
    return examples


def _batch_conditioning(examples: Sequence[TrainingExample], cfg: DenoiserConfig,
                        dtype: torch.dtype) -> Conditioning:
    mel = None
    if all(example.cond_wave is not None for example in examples):
        mel = torch.as_tensor(np.stack([conditioning_mel(example.cond_wave, cfg) for example in examples]),
                              dtype=dtype)
    label = torch.as_tensor([example.label for example in examples], dtype=torch.long)
    return Conditioning(mel=mel, label=label)


def train_denoiser(denoiser: nn.Module, examples: Sequence[TrainingExample], schedule: NoiseSchedule,
                   steps: int = 200, lr: float = 2e-3, batch_size: int = 4, seed: int = 0,
                   rearrange_prob: float = 0.25, crossfade_s: float = 0.01) -> list[float]:
    """
    Adam training loop on the noise-prediction loss.

    With ``rearrange_prob`` each drawn example has its cardiac cycles
    rearranged (target and conditioning share the plan).

    Returns:
        list[float]: Loss per step.
    """
    if not examples:
        raise ConfigError("Denoiser training needs at least one example")
    cfg: Optional[DenoiserConfig] = getattr(denoiser, "cfg", None)
    dtype = next(denoiser.parameters()).dtype
    optimizer = torch.optim.Adam(denoiser.parameters(), lr=lr)
    np_rng = np.random.default_rng(seed)
    torch_rng = torch.Generator().manual_seed(seed)
    losses = []
    denoiser.train()
    for step in range(steps):
        picked = [examples[i] for i in np_rng.integers(0, len(examples), size=min(batch_size, len(examples)))]
        batch = []
        for example in picked:
            if rearrange_prob > 0 and np_rng.random() < rearrange_prob:
                example = _rearranged(example, np_rng, crossfade_s)
            batch.append(example)
        x0 = torch.as_tensor(np.stack([example.target for example in batch]), dtype=dtype)
        cond = _batch_conditioning(batch, cfg, dtype) if cfg is not None else None
        optimizer.zero_grad()
        loss = diffusion_loss(denoiser, x0, cond, schedule, torch_rng)
        optimizer.step()
        losses.append(loss.item())
        if step % 50 == 0:
            logger.debug(f"Denoiser step {step}: loss {losses[-1]:.4f}")
    logger.info(f"Denoiser trained for {steps} steps, final loss {losses[-1] if losses else float('nan'):.4f}")
    return losses


def _rearranged(example: TrainingExample, rng: np.random.Generator, crossfade_s: float) -> TrainingExample:
    marks = detect_cycle_marks(Recording(samples=example.target, fs=example.fs))
    if marks.size < 3:
        return example
    mode = REARRANGE_MODES[int(rng.integers(len(REARRANGE_MODES)))]
    channels = [example.target] + ([example.cond_wave] if example.cond_wave is not None else [])
    moved = rearrange_channels(channels, marks, mode, rng, int(round(crossfade_s * example.fs)))
    return TrainingExample(moved[0], moved[1] if len(moved) > 1 else None, example.label, example.fs)


def build_synthetic_corpus(generator_tag: str, denoiser: nn.Module, cond_source: Sequence[MultiRecord],
                           n_patients: int, schedule: NoiseSchedule, class_ratio: tuple[float, float] = (3, 1),
                           seed: int = 0, sites: Optional[Sequence[str]] = None) -> list[MultiRecord]:
    """
    Generate synthetic subjects with a trained denoiser.

    Single-channel mode draws ``n_patients`` subjects, normal:abnormal per
    ``class_ratio`` (largest remainder), each a synthetic PCG plus the real
    ECG window that conditioned it. Multichannel mode (``sites`` given)
    emits exactly one subject per conditioning record, generating every
    other site from the record's first site.

    Args:
        generator_tag: ``diffwave_style`` or ``wavegrad_style``.
        denoiser: Trained noise predictor carrying a DenoiserConfig as ``cfg``.
        cond_source: Records providing conditioning signals.
        n_patients: Subjects to generate (single-channel mode).
        schedule: Noise schedule the denoiser was trained with.
        class_ratio: Normal:abnormal ratio.
        seed: Master seed; each subject uses a derived seed.
        sites: Site order for multichannel mode.

    Returns:
        list[MultiRecord]: Records tagged Synthetic(generator_tag).
    """
    if generator_tag not in GENERATOR_TAGS:
        raise ConfigError(f"Unknown generator tag {generator_tag}", generator_tag=generator_tag)
    if sites:
        return _multichannel_corpus(generator_tag, denoiser, cond_source, schedule, seed, sites)
    if n_patients <= 0:
        return []
    if not cond_source:
        raise ConfigError("Synthetic generation needs a conditioning source")

    cfg: DenoiserConfig = denoiser.cfg
    window = int(round(cfg.segment_s * cfg.fs))
    n_normal, n_abnormal = largest_remainder(n_patients, [class_ratio[0], class_ratio[1]])
    labels = [Label.NORMAL] * n_normal + [Label.ABNORMAL] * n_abnormal
    by_label = {label: [m for m in cond_source if m.label is label] for label in Label}
    corpus = []
    for index, label in enumerate(labels):
        pool = by_label[label] or list(cond_source)
        cond_record = pool[index % len(pool)]
        ecg = next((c for c in cond_record.channels if c.modality is Modality.ECG), None)
        if ecg is None:
            raise ConfigError(f"Conditioning record {cond_record.subject_id} has no ECG channel",
                              subject_id=cond_record.subject_id)
        ecg = dsp.generation_chain(ecg)
        subject_seed = derive_seed(seed, generator_tag, index)
        offset_rng = np.random.default_rng(subject_seed)
        start = int(offset_rng.integers(0, max(1, len(ecg) - window + 1)))
        cond_wave = ecg.samples[start:start + window]
        if cond_wave.size < window:
            cond_wave = np.pad(cond_wave, (0, window - cond_wave.size))
        cond = Conditioning(mel=torch.as_tensor(conditioning_mel(cond_wave, cfg)[None], dtype=torch.float32),
                            label=torch.as_tensor([CondLabel(label).index()]))
        pcg = sample(denoiser, cond, schedule, window, torch.Generator().manual_seed(subject_seed), fs=cfg.fs)
        subject_id = f"{generator_tag}_{index:05d}"
        corpus.append(MultiRecord(
            subject_id=subject_id, label=label,
            channels=(pcg, Recording(samples=cond_wave, fs=cfg.fs, modality=Modality.ECG)),
            source=SourceKind.SYNTHETIC, generator_tag=generator_tag, dataset="synthetic",
            provenance={"generator_tag": generator_tag, "cond_subject": cond_record.subject_id,
                        "channel_pair": None, "seed": subject_seed, "record_id": subject_id},
        ))
    logger.info(f"Generated {len(corpus)} {generator_tag} subjects ({n_normal} normal / {n_abnormal} abnormal)")
    return corpus


def _multichannel_corpus(generator_tag: str, denoiser: nn.Module, cond_source: Sequence[MultiRecord],
                         schedule: NoiseSchedule, seed: int, sites: Sequence[str]) -> list[MultiRecord]:
    if not cond_source:
        raise ConfigError("Multichannel generation needs conditioning subjects")
    cfg: DenoiserConfig = denoiser.cfg
    window = int(round(cfg.segment_s * cfg.fs))
    corpus = []
    for cond_record in cond_source:
        source = cond_record.channels[0]
        source_site = source.channel_site or sites[0]
        if source_site not in sites:
            raise ConfigError(f"Conditioning site {source_site} is not one of {list(sites)}")
        chained = dsp.generation_chain(source)
        cond_wave = chained.samples[:window]
        if cond_wave.size < window:
            cond_wave = np.pad(cond_wave, (0, window - cond_wave.size))
        mel = torch.as_tensor(conditioning_mel(cond_wave, cfg)[None], dtype=torch.float32)
        subject_seed = derive_seed(seed, generator_tag, cond_record.subject_id)
        rng = torch.Generator().manual_seed(subject_seed)
        channels = [Recording(samples=cond_wave, fs=cfg.fs, modality=Modality.PCG, channel_site=source_site)]
        pairs = []
        for target in sites:
            if target == source_site:
                continue
            label = CondLabel(cond_record.label, (source_site, target)).index(sites)
            channels.append(sample(denoiser, Conditioning(mel=mel, label=torch.as_tensor([label])), schedule,
                                   window, rng, fs=cfg.fs, channel_site=target))
            pairs.append([source_site, target])
        subject_id = f"{generator_tag}_{cond_record.subject_id}"
        corpus.append(MultiRecord(
            subject_id=subject_id, label=cond_record.label, channels=tuple(channels),
            source=SourceKind.SYNTHETIC, generator_tag=generator_tag, dataset="synthetic",
            provenance={"generator_tag": generator_tag, "cond_subject": cond_record.subject_id,
                        "channel_pair": pairs, "seed": subject_seed, "record_id": subject_id},
        ))
    logger.info(f"Generated {len(corpus)} multichannel {generator_tag} subjects")
    return corpus


def save_denoiser(denoiser: ToyDenoiser, schedule: NoiseSchedule, path: Union[str, Path],
                  extra: Optional[dict[str, Any]] = None) -> Path:
    """Versioned JSON checkpoint with the noise schedule embedded."""
    payload = {
        "format": "cardioforge-denoiser",
        "version": CHECKPOINT_VERSION,
        "config": denoiser.cfg.model_dump(mode="json"),
        "betas": schedule.betas.tolist(),
        "tensors": tensors_to_records(denoiser.state_dict()),
        "extra": extra or {},
    }
    return write_json_checkpoint(payload, path)


def load_denoiser(path: Union[str, Path]) -> tuple[ToyDenoiser, NoiseSchedule, dict[str, Any]]:
    payload = read_json_checkpoint(path, "cardioforge-denoiser")
    denoiser = ToyDenoiser(DenoiserConfig.model_validate(payload["config"]))
    denoiser.load_state_dict(records_to_tensors(payload["tensors"]))
    return denoiser, NoiseSchedule(np.asarray(payload["betas"])), payload.get("extra", {})
