"""Run configuration and the factories that build models from it."""
import logging
from typing import Any, Literal, Optional

import torch
from pydantic import BaseModel, Field, field_validator, model_validator

from cardioforge import dsp
from cardioforge.diffusion import DenoiserConfig, NoiseSchedule, ScheduleConfig, ToyDenoiser
from cardioforge.fixtures import FixtureConfig
from cardioforge.model import EncoderConfig, HeadConfig, HeartSoundClassifier
from cardioforge.router import ModeType, mode_window, n_inputs_for
from cardioforge.train import TrainConfig, TrainingSchedule

logger = logging.getLogger(__name__)

SUPPORTED_TARGET_FS = (4125.0, 16000.0)


class DataConfig(BaseModel):
    manifest: Optional[str] = Field(default=None, description="Original-data manifest; defaults to the run's fixtures")
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    k_folds: int = Field(default=7, ge=2)
    sites: list[str] = Field(default_factory=list, description="Auscultation site order (multichannel mode)")


class SynthConfig(BaseModel):
    generators: list[Literal["diffwave_style", "wavegrad_style"]] = Field(
        default_factory=lambda: ["diffwave_style", "wavegrad_style"])
    # Schedule source name each generator's corpus is registered under
    source_names: dict[str, str] = Field(
        default_factory=lambda: {"diffwave_style": "diffwave", "wavegrad_style": "wavegrad"})
    n_patients: int = Field(default=8, ge=0)
    class_ratio: tuple[float, float] = (3.0, 1.0)
    train_steps: int = Field(default=200, ge=0)
    learning_rate: float = Field(default=2e-3, gt=0)
    batch_size: int = Field(default=4, ge=1)
    rearrange_prob: float = Field(default=0.25, ge=0, le=1)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)


class RunConfig(BaseModel):
    """One run document: dataset mode, rates, seeds, schedule, model presets and stage configs."""
    name: str = "run"
    mode: ModeType = "single_pcg"
    target_fs: float = 4125.0
    window_s: Optional[float] = Field(default=None, gt=0, description="Defaults to 4 s, or 2 s in multichannel mode")
    overlap_s: float = Field(default=0.25, ge=0)
    skip_head_s: float = Field(default=0.3, ge=0)
    seed: int = 0
    runs: int = Field(default=1, ge=1, description="Repeated shuffled runs per report")
    threshold: float = Field(default=0.5, gt=0, lt=1)
    data: DataConfig = Field(default_factory=DataConfig)
    schedule: TrainingSchedule = Field(default_factory=TrainingSchedule)
    schedule_epochs: Optional[list[int]] = None
    encoder_preset: Literal["toy", "full"] = "toy"
    encoder: Optional[EncoderConfig] = None
    head: HeadConfig = Field(default_factory=HeadConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    fixtures: FixtureConfig = Field(default_factory=FixtureConfig)
    hyperparameters: Optional[dict[str, Any]] = None

    @model_validator(mode="before")
    @classmethod
    def _merge_hyperparameters(cls, data: Any) -> Any:
        """Hyperparameter preset values fill in optimizer, lr_schedule and head fields not set explicitly."""
        if not isinstance(data, dict) or not isinstance(data.get("hyperparameters"), dict):
            return data
        preset = data["hyperparameters"]
        data = dict(data)
        train = dict(data.get("train") or {})
        for key in ("optimizer", "lr_schedule"):
            if key in preset:
                train[key] = {**preset[key], **(train.get(key) or {})}
        data["train"] = train
        if "head" in preset:
            data["head"] = {**preset["head"], **(data.get("head") or {})}
        return data

    @field_validator("target_fs")
    @classmethod
    def _supported_rate(cls, value: float) -> float:
        if value not in SUPPORTED_TARGET_FS:
            raise ValueError(f"target_fs must be one of {SUPPORTED_TARGET_FS}, got {value}")
        return value

    @model_validator(mode="after")
    def _check_mode(self):
        if self.mode == "multichannel" and not self.data.sites:
            raise ValueError("multichannel mode needs data.sites")
        if self.schedule_epochs is not None and len(self.schedule_epochs) != len(self.schedule.stages):
            raise ValueError(f"schedule_epochs has {len(self.schedule_epochs)} entries for "
                             f"{len(self.schedule.stages)} stages")
        return self

    @property
    def n_inputs(self) -> int:
        return n_inputs_for(self.mode, self.data.sites)

    def segment_spec(self) -> dsp.SegmentSpec:
        return dsp.SegmentSpec(window_s=mode_window(self.mode, self.window_s), overlap_s=self.overlap_s,
                               skip_head_s=self.skip_head_s)

    def effective_schedule(self) -> TrainingSchedule:
        return self.schedule.scaled(self.schedule_epochs) if self.schedule_epochs else self.schedule

    def train_config(self) -> TrainConfig:
        return self.train.model_copy(update={"segment": self.segment_spec()})

    def encoder_config(self) -> EncoderConfig:
        return self.encoder or EncoderConfig.preset(self.encoder_preset)


def create_classifier(cfg: RunConfig, seed: Optional[int] = None) -> HeartSoundClassifier:
    """
    Build a classifier with one encoder per input of the run's dataset mode.

    Args:
        cfg (RunConfig): Run configuration.
        seed (int, optional): Seed for weight initialisation.

    Returns:
        HeartSoundClassifier: Untrained model.
    """
    encoder_cfg = cfg.encoder_config()
    window = int(round(cfg.segment_spec().window_s * cfg.target_fs))
    frames = encoder_cfg.frames_for(window)
    logger.info(f"Creating {cfg.mode} classifier: {cfg.n_inputs} input(s), {frames} frames per {window}-sample window")
    if seed is not None:
        torch.manual_seed(seed)
    return HeartSoundClassifier(encoder_cfg, cfg.head, n_inputs=cfg.n_inputs)


def create_denoiser(cfg: SynthConfig, generator_tag: str, n_sites: int = 0, seed: Optional[int] = None) -> ToyDenoiser:
    """Denoiser of the given flavour with room for every global label of the run."""
    n_labels = 2 * max(1, n_sites ** 2)
    denoiser_cfg = cfg.denoiser.model_copy(update={"flavour": generator_tag, "n_global_labels": n_labels})
    logger.info(f"Creating {generator_tag} denoiser with {n_labels} global labels")
    if seed is not None:
        torch.manual_seed(seed)
    return ToyDenoiser(denoiser_cfg)


def create_noise_schedule(cfg: SynthConfig) -> NoiseSchedule:
    return NoiseSchedule.from_config(cfg.schedule)
