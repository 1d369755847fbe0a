from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Optional, Sequence, TypedDict

import numpy as np
from pydantic import BaseModel, Field

from cardioforge.errors import SignalValidationError


class Modality(str, Enum):
    PCG = "PCG"
    ECG = "ECG"


class Label(str, Enum):
    NORMAL = "Normal"
    ABNORMAL = "Abnormal"

    @property
    def index(self) -> int:
        """Class index used by the classifier; Abnormal is the positive class."""
        return 1 if self is Label.ABNORMAL else 0


class SourceKind(str, Enum):
    ORIGINAL = "original"
    AUGMENTED = "augmented"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class Recording:
    """One sampled channel: amplitudes, sample rate and modality."""

    # Amplitudes, nominally in [-1, 1]
    samples: np.ndarray
    fs: float
    modality: Modality = Modality.PCG
    channel_site: Optional[str] = None
    # Conditions raised by flagged pass-through operations
    flags: tuple[str, ...] = ()
    # Names of the transformations applied so far
    history: tuple[str, ...] = ()

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise SignalValidationError(f"Recording samples must be 1-D, got shape {samples.shape}")
        if samples.size == 0:
            raise SignalValidationError("Recording samples must be non-empty")
        if not np.all(np.isfinite(samples)):
            raise SignalValidationError("Recording samples must be finite")
        if not (self.fs > 0):
            raise SignalValidationError(f"Sample rate must be positive, got {self.fs}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "modality", Modality(self.modality))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.fs

    def derive(self, samples: np.ndarray, fs: Optional[float] = None, step: Optional[str] = None,
               flag: Optional[str] = None) -> "Recording":
        """Return a copy with new samples (and optionally a new rate), extending history/flags."""
        return replace(
            self,
            samples=samples,
            fs=self.fs if fs is None else fs,
            history=self.history + ((step,) if step else ()),
            flags=self.flags + ((flag,) if flag else ()),
        )

    def flagged(self, flag: str) -> "Recording":
        return replace(self, flags=self.flags + (flag,))


@dataclass(frozen=True)
class MultiRecord:
    """A subject-level record: one or more synchronized channels with a label."""

    subject_id: str
    label: Label
    channels: tuple[Recording, ...]
    source: SourceKind = SourceKind.ORIGINAL
    generator_tag: Optional[str] = None
    dataset: str = "unknown"
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        channels = tuple(self.channels)
        if not channels:
            raise SignalValidationError("MultiRecord needs at least one channel", subject_id=self.subject_id)
        durations = [ch.duration for ch in channels]
        tolerance = 1.0 / min(ch.fs for ch in channels) + 1e-9
        if max(durations) - min(durations) > tolerance:
            raise SignalValidationError(
                f"Channels of {self.subject_id} are not duration-aligned: {durations}",
                subject_id=self.subject_id,
            )
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "label", Label(self.label))
        object.__setattr__(self, "source", SourceKind(self.source))

    @property
    def modalities(self) -> list[Modality]:
        return [ch.modality for ch in self.channels]

    @property
    def sites(self) -> list[Optional[str]]:
        return [ch.channel_site for ch in self.channels]

    @property
    def source_tag(self) -> str:
        """Source name used by training schedules (e.g. ``original``, ``synthetic:diffwave_style``)."""
        if self.source is SourceKind.SYNTHETIC and self.generator_tag:
            return f"synthetic:{self.generator_tag}"
        return self.source.value

    def with_channels(self, channels: Sequence[Recording], **changes) -> "MultiRecord":
        return replace(self, channels=tuple(channels), **changes)


@dataclass(frozen=True)
class Fragment:
    """A fixed-length window cut from a record; ``samples`` is [channels, n]."""

    samples: np.ndarray
    fs: float
    subject_id: str
    label: Label
    offset: int
    source: str = SourceKind.ORIGINAL.value

    def __post_init__(self):
        samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        object.__setattr__(self, "samples", samples)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    def with_samples(self, samples: np.ndarray) -> "Fragment":
        return replace(self, samples=samples)


class FragmentList(list):
    """List of fragments that remembers whether the source record was too short."""

    def __init__(self, fragments=(), short_record: bool = False):
        super().__init__(fragments)
        self.short_record = short_record


class ManifestEntry(BaseModel):
    """One manifest line: a subject recording stored as one WAV per channel."""
    paths: list[str] = Field(description="WAV path per channel, relative to the manifest directory")
    subject_id: str = Field(description="Subject identifier; never split across partitions")
    label: Label = Field(description="Subject-level class")
    dataset: str = Field(default="unknown", description="Dataset tag")
    modalities: list[Modality] = Field(description="Modality per channel")
    sites: list[Optional[str]] = Field(default_factory=list, description="Auscultation site per channel")
    source: SourceKind = Field(default=SourceKind.ORIGINAL, description="Original, augmented or synthetic")
    generator_tag: Optional[str] = Field(default=None, description="Generator for synthetic records")
    provenance: dict[str, Any] = Field(default_factory=dict, description="Seed, applied ops, source subject")


class RunState(TypedDict, total=False):
    """State passed through a CLI command node."""
    command: str
    config: Any
    config_ref: Optional[str]
    out_dir: str
    seed: Optional[int]
    jobs: int
    deterministic: bool
    fold: Optional[int]
    run_id: Optional[str]
    manifest: Optional[str]
    n_subjects: Optional[int]
    artifacts: list[str]
    summary: dict[str, Any]
    error: Optional[dict[str, Any]]
    exit_code: int
