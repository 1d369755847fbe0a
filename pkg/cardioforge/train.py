"""Optimisers, LR schedule, staged training schedules, model selection and random search."""
import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Literal, Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field, model_validator
from torch.utils.data import DataLoader, Dataset

from cardioforge import dsp
from cardioforge.augment import AugmentConfig, NoiseBank, make_augmented_dataset, online_augment
from cardioforge.errors import ConfigError, TrainingError
from cardioforge.evaluate import evaluate_predictions, predict_fragments, predictions_table
from cardioforge.load_cfg import load_config
from cardioforge.model import (HeadConfig, HeartSoundClassifier, LoRALinear, lora_merge, lora_wrap,
                               save_model_checkpoint, svm_fit)
from cardioforge.signal_io import derive_seed
from cardioforge.state import Fragment, Label, MultiRecord

logger = logging.getLogger(__name__)

ORIGINAL_SOURCE = "original"
DATA_SOURCES = ("original", "diffwave", "wavegrad", "training_a_synth", "training_b_synth")


class OptimizerConfig(BaseModel):
    kind: Literal["sgd_momentum", "rmsprop"] = "sgd_momentum"
    learning_rate: float = Field(default=1e-3, gt=0)
    weight_decay: float = Field(default=1e-5, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    # RMSProp smoothing and denominator epsilon
    rho: float = Field(default=0.99, gt=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    batch_size: int = Field(default=64, ge=1)


class LRSchedule(BaseModel):
    gamma: float = Field(default=0.1, gt=0, le=1)
    step_size: int = Field(default=3, ge=1)


class ScheduleStage(BaseModel):
    """One schedule row: data sources with per-source augmented-copy counts per class."""
    sources: list[str] = Field(min_length=1)
    epochs: int = Field(ge=1)
    normal_augments: list[int] = Field(default_factory=list)
    abnormal_augments: list[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _counts_match_sources(self):
        for name in ("normal_augments", "abnormal_augments"):
            counts = getattr(self, name)
            if not counts:
                setattr(self, name, [0] * len(self.sources))
            elif len(counts) != len(self.sources):
                raise ValueError(f"{name} has {len(counts)} entries for {len(self.sources)} sources")
            elif any(count < 0 for count in counts):
                raise ValueError(f"{name} must be non-negative")
        return self

    def rows(self) -> list[tuple[str, int, int]]:
        return list(zip(self.sources, self.normal_augments, self.abnormal_augments))


class TrainingSchedule(BaseModel):
    name: str = "schedule"
    stages: list[ScheduleStage] = Field(default_factory=list)

    @property
    def total_epochs(self) -> int:
        return sum(stage.epochs for stage in self.stages)

    def scaled(self, epochs: Sequence[int]) -> "TrainingSchedule":
        """Same stages with replaced epoch counts (desk-scale runs)."""
        if len(epochs) != len(self.stages):
            raise ConfigError(f"{len(epochs)} epoch counts for {len(self.stages)} stages")
        return self.model_copy(update={"stages": [stage.model_copy(update={"epochs": int(e)})
                                                  for stage, e in zip(self.stages, epochs)]})


class LoRAConfig(BaseModel):
    enabled: bool = False
    rank: int = Field(default=8, ge=1)
    alpha: float = Field(default=16.0, gt=0)
    train_head: bool = True


class SVMConfig(BaseModel):
    enabled: bool = False
    C: float = Field(default=1.0, gt=0)
    gamma: Union[Literal["scale"], float] = "scale"


class TrainConfig(BaseModel):
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    lr_schedule: LRSchedule = Field(default_factory=LRSchedule)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    segment: dsp.SegmentSpec = Field(default_factory=dsp.SegmentSpec)
    # Fragments kept per synthetic recording
    synthetic_cap: int = Field(default=2, ge=0)
    # Multiplies every schedule augment count
    augment_scale: float = Field(default=1.0, ge=0)
    class_weighted: bool = True
    pretrain_encoders: bool = True
    freeze_encoders: bool = False
    lora: LoRAConfig = Field(default_factory=LoRAConfig)
    svm: SVMConfig = Field(default_factory=SVMConfig)
    num_workers: int = Field(default=0, ge=0)


def load_schedule(ref: Union[str, Path]) -> TrainingSchedule:
    return load_config(TrainingSchedule, ref)


def build_optimizer(params, cfg: OptimizerConfig, lr: Optional[float] = None) -> torch.optim.Optimizer:
    """
    torch optimiser for ``cfg.kind`` with weight decay added to the gradient.

    SGD: v <- momentum * v + g + wd * w; w <- w - lr * v.
    RMSProp: s <- rho * s + (1 - rho) * g^2; w <- w - lr * g / (sqrt(s) + eps).
    """
    lr = cfg.learning_rate if lr is None else lr
    if cfg.kind == "sgd_momentum":
        return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return torch.optim.RMSprop(params, lr=lr, alpha=cfg.rho, eps=cfg.eps, momentum=cfg.momentum,
                               weight_decay=cfg.weight_decay)


def check_gradients(params: Sequence[torch.Tensor]) -> None:
    for index, parameter in enumerate(params):
        if parameter.grad is not None and not torch.isfinite(parameter.grad).all():
            raise TrainingError(f"Non-finite gradient in parameter {index}", parameter_index=index,
                                shape=list(parameter.shape))


def _functional_step(params, grads, state: dict[str, Any], cfg: OptimizerConfig,
                     lr: Optional[float]) -> list[torch.Tensor]:
    tensors = [p.detach().clone() if isinstance(p, torch.Tensor) else torch.as_tensor(p, dtype=torch.float64)
               for p in params]
    for tensor, grad in zip(tensors, grads, strict=True):
        tensor.requires_grad_(True)
        tensor.grad = torch.as_tensor(grad, dtype=tensor.dtype).reshape(tensor.shape).clone()
    check_gradients(tensors)
    optimizer = build_optimizer(tensors, cfg, lr)
    if state.get("optimizer"):
        optimizer.load_state_dict(state["optimizer"])
        for group in optimizer.param_groups:
            group["lr"] = cfg.learning_rate if lr is None else lr
    optimizer.step()
    state["optimizer"] = optimizer.state_dict()
    return [tensor.detach() for tensor in tensors]


def sgd_step(params, grads, state: dict[str, Any], cfg: OptimizerConfig, lr: Optional[float] = None
             ) -> list[torch.Tensor]:
    """One SGD-with-momentum update; ``state`` carries the momentum buffers between calls."""
    return _functional_step(params, grads, state, cfg.model_copy(update={"kind": "sgd_momentum"}), lr)


def rmsprop_step(params, grads, state: dict[str, Any], cfg: OptimizerConfig, lr: Optional[float] = None
                 ) -> list[torch.Tensor]:
    """One RMSProp update; ``state`` carries the squared-gradient averages between calls."""
    return _functional_step(params, grads, state, cfg.model_copy(update={"kind": "rmsprop"}), lr)


def lr_at(epoch: int, base_lr: float, sched: LRSchedule) -> float:
    """Step decay: base_lr * gamma ** floor(epoch / step_size)."""
    return base_lr * sched.gamma ** (epoch // sched.step_size)


def class_weights(fragments: Sequence[Fragment]) -> torch.Tensor:
    """Cross-entropy weights inversely proportional to class frequency (1 for an absent class)."""
    counts = np.bincount([Label(frag.label).index for frag in fragments], minlength=2).astype(np.float64)
    weights = np.where(counts > 0, counts.sum() / (2 * np.maximum(counts, 1)), 1.0)
    return torch.as_tensor(weights, dtype=torch.float32)


class FragmentDataset(Dataset):
    """Fragments as (tensor [channels, n], class index) with online augmentation seeded per (seed, epoch, index)."""

    def __init__(self, fragments: Sequence[Fragment], augment: Optional[AugmentConfig] = None, seed: int = 0,
                 epoch: int = 0, dtype: torch.dtype = torch.float32):
        self.fragments = list(fragments)
        self.augment = augment
        self.seed = seed
        self.epoch = epoch
        self.dtype = dtype

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.fragments)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, int]:
        frag = self.fragments[index]
        if self.augment is not None:
            frag = online_augment(frag, self.augment, np.random.default_rng(derive_seed(self.seed, self.epoch, index)))
        return torch.as_tensor(frag.samples, dtype=self.dtype), Label(frag.label).index


@dataclass
class EpochLog:
    stage: int
    epoch: int
    lr: float
    train_loss: float
    n_fragments: int
    val_metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    phase: str = "schedule"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class ScheduleResult:
    model: HeartSoundClassifier
    log: list[EpochLog]
    best_epoch: Optional[int] = None
    best_mcc: Optional[float] = None
    checkpoints: list[Path] = field(default_factory=list)


def select_best(checkpoints: Sequence[Any], val_mcc: Sequence[float]) -> tuple[int, Any]:
    """Index and item with the highest validation MCC; ties go to the later epoch."""
    if not checkpoints or len(checkpoints) != len(val_mcc):
        raise ConfigError(f"select_best needs matching non-empty inputs, got {len(checkpoints)} / {len(val_mcc)}")
    best = 0
    for index, mcc in enumerate(val_mcc):
        if mcc >= val_mcc[best]:
            best = index
    return best, checkpoints[best]


def segment_records(records: Sequence[MultiRecord], spec: dsp.SegmentSpec, cap: Optional[int] = None,
                    seed: int = 0) -> list[Fragment]:
    """Synchronised fragments of every record, optionally capped per record."""
    fragments = []
    for mrec in records:
        pieces = dsp.segment_multi(mrec, spec)
        if cap is not None:
            record_id = mrec.provenance.get("record_id", mrec.subject_id)
            pieces = dsp.cap_fragments(pieces, cap, np.random.default_rng(derive_seed(seed, "cap", record_id)))
        fragments.extend(pieces)
    return fragments


def copy_counts(n_normal: int, n_abnormal: int, augment_scale: float) -> dict[Label, int]:
    """Augmented copies per class for one schedule row after ``augment_scale``."""
    return {Label.NORMAL: int(round(n_normal * augment_scale)),
            Label.ABNORMAL: int(round(n_abnormal * augment_scale))}


def augment_seed(seed: int, source: str) -> int:
    """Master seed of one source's offline augmented copies within a training run."""
    return derive_seed(seed, source)


def build_pool(stage: ScheduleStage, datasets: Mapping[str, Sequence[MultiRecord]], cfg: TrainConfig, seed: int,
               bank: Optional[NoiseBank] = None, cache: Optional[dict] = None,
               prebuilt: Optional[Mapping[tuple[str, int, int], Sequence[MultiRecord]]] = None) -> list[Fragment]:
    """
    Training fragments for one stage: each source's records plus their augmented copies.

    Pools for identical (source, counts) rows are reused through ``cache``.
    Augmented copies listed in ``prebuilt`` under the same (source, normal, abnormal)
    key are used as they are instead of being regenerated.
    Non-original sources are capped at ``cfg.synthetic_cap`` fragments per recording.
    """
    cache = {} if cache is None else cache
    prebuilt = prebuilt or {}
    pool: list[Fragment] = []
    for source, n_normal, n_abnormal in stage.rows():
        if source not in datasets:
            raise ConfigError(f"Schedule references data source {source!r} but no such dataset is loaded",
                              source=source, available=sorted(datasets))
        counts = copy_counts(n_normal, n_abnormal, cfg.augment_scale)
        key = (source, counts[Label.NORMAL], counts[Label.ABNORMAL])
        if key not in cache:
            records = list(datasets[source])
            if key in prebuilt:
                augmented = list(prebuilt[key])
                logger.info(f"Using {len(augmented)} exported augmented records for {source}")
            else:
                augmented = make_augmented_dataset(records, counts, cfg.augment, seed=augment_seed(seed, source),
                                                   bank=bank)
            cap = None if source == ORIGINAL_SOURCE else cfg.synthetic_cap
            cache[key] = segment_records(records + augmented, cfg.segment, cap, seed)
            logger.info(f"Pool for {source} with counts {counts[Label.NORMAL]}/{counts[Label.ABNORMAL]}: "
                        f"{len(cache[key])} fragments")
        pool.extend(cache[key])
    return pool


def _train_epoch(model: torch.nn.Module, optimizer: torch.optim.Optimizer, pool: Sequence[Fragment],
                 cfg: TrainConfig, seed: int, epoch: int, weights: Optional[torch.Tensor]) -> float:
    dataset = FragmentDataset(pool, cfg.augment, seed=seed, epoch=epoch)
    loader = DataLoader(dataset, batch_size=cfg.optimizer.batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(derive_seed(seed, "shuffle", epoch)),
                        num_workers=cfg.num_workers)
    trainable = [p for p in model.parameters() if p.requires_grad]
    model.train()
    total, seen = 0.0, 0
    for inputs, targets in loader:
        optimizer.zero_grad()
        loss = F.cross_entropy(model(inputs), targets, weight=weights)
        if not torch.isfinite(loss):
            raise TrainingError(f"Non-finite training loss at epoch {epoch}", epoch=epoch)
        loss.backward()
        check_gradients(trainable)
        optimizer.step()
        total += loss.item() * targets.shape[0]
        seen += targets.shape[0]
    return total / max(seen, 1)


def validate(model: HeartSoundClassifier, fragments: Sequence[Fragment]) -> dict[str, dict[str, float]]:
    """Fragment- and subject-level metrics on validation fragments (empty dict without data)."""
    if not fragments:
        return {}
    table = predictions_table(fragments, predict_fragments(model, fragments))
    fragment_report, subject_report, _ = evaluate_predictions(table)
    return {report.level: report.as_dict()["metrics"] for report in (fragment_report, subject_report)}


def _fit_epochs(model: HeartSoundClassifier, pool: Sequence[Fragment], epochs: int, cfg: TrainConfig, seed: int,
                stage_index: int, phase: str) -> list[EpochLog]:
    optimizer = build_optimizer([p for p in model.parameters() if p.requires_grad], cfg.optimizer)
    weights = class_weights(pool) if cfg.class_weighted else None
    log = []
    for epoch in range(epochs):
        lr = lr_at(epoch, cfg.optimizer.learning_rate, cfg.lr_schedule)
        for group in optimizer.param_groups:
            group["lr"] = lr
        loss = _train_epoch(model, optimizer, pool, cfg, derive_seed(seed, phase), epoch, weights)
        log.append(EpochLog(stage=stage_index, epoch=epoch, lr=lr, train_loss=loss, n_fragments=len(pool),
                            phase=phase))
        logger.debug(f"{phase} epoch {epoch}: loss {loss:.4f}")
    return log


def pretrain_encoders(model: HeartSoundClassifier, pool: Sequence[Fragment], epochs: int, cfg: TrainConfig,
                      seed: int) -> list[EpochLog]:
    """
    Train one single-input classifier per input channel on the first stage's
    data and copy its encoder into ``model``.
    """
    log = []
    for index in range(model.n_inputs):
        single = HeartSoundClassifier(model.encoder_cfg, model.head_cfg, n_inputs=1)
        channel_pool = [frag.with_samples(frag.samples[index:index + 1]) for frag in pool]
        log += _fit_epochs(single, channel_pool, epochs, cfg, derive_seed(seed, "pretrain", index), 0,
                           phase=f"pretrain_input{index}")
        model.encoders[index].load_state_dict(single.encoders[0].state_dict())
        logger.info(f"Pre-trained encoder for input {index} over {epochs} epochs")
    return log


def _has_lora(model: torch.nn.Module) -> bool:
    return any(isinstance(module, LoRALinear) for module in model.modules())


def _save_epoch(model: HeartSoundClassifier, path: Path, position: dict[str, Any]) -> Path:
    if _has_lora(model):
        model = lora_merge(copy.deepcopy(model))
    return save_model_checkpoint(model, path, position)


def fit_svm_head(model: HeartSoundClassifier, fragments: Sequence[Fragment], cfg: SVMConfig) -> None:
    """Freeze the network and fit the SVM on first-hidden-layer embeddings of ``fragments``."""
    for parameter in model.parameters():
        parameter.requires_grad_(False)
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        embeddings = np.concatenate([
            model.embed(torch.as_tensor(np.stack([f.samples for f in fragments[i:i + 64]]), dtype=dtype))
            .double().numpy()
            for i in range(0, len(fragments), 64)
        ])
    labels = np.array([Label(frag.label).index for frag in fragments])
    model.svm_head = svm_fit(embeddings, labels, gamma=cfg.gamma, C=cfg.C)


def run_schedule(model: HeartSoundClassifier, stages: Sequence[ScheduleStage],
                 datasets: Mapping[str, Sequence[MultiRecord]], cfg: TrainConfig, seed: int = 0,
                 val_records: Sequence[MultiRecord] = (), bank: Optional[NoiseBank] = None,
                 checkpoint_dir: Optional[Union[str, Path]] = None,
                 log_path: Optional[Union[str, Path]] = None,
                 prebuilt: Optional[Mapping[tuple[str, int, int], Sequence[MultiRecord]]] = None) -> ScheduleResult:
    """
    Execute a training schedule stage by stage.

    Multi-input models first get per-input encoders pre-trained on stage 1.
    With LoRA enabled the encoders are adapted through low-rank updates and
    merged afterwards; with the SVM enabled an SVM head is fitted on the
    frozen network's embeddings of the original training data. The epoch
    with the highest validation subject MCC (ties: later epoch) is restored.

    Args:
        model: Classifier to train in place.
        stages: Ordered schedule stages.
        datasets: Records per data source name; every source a stage names must be present.
        cfg: Training configuration.
        seed: Master seed.
        val_records: Original-data validation records.
        bank: Noise bank for offline augmentation.
        checkpoint_dir: Write one JSON checkpoint per epoch here.
        log_path: Append one JSON object per epoch here.
        prebuilt: Exported augmented copies keyed by (source, normal copies, abnormal copies).

    Returns:
        ScheduleResult: The trained model, epoch log and selected epoch.
    """
    if not stages:
        logger.info("Empty schedule; model left unchanged")
        return ScheduleResult(model=model, log=[])
    for stage in stages:
        for source in stage.sources:
            if source not in datasets:
                raise ConfigError(f"Schedule references data source {source!r} but no such dataset is loaded",
                                  source=source, available=sorted(datasets))

    torch.manual_seed(derive_seed(seed, "init"))
    cache: dict = {}
    log: list[EpochLog] = []
    val_fragments = segment_records(val_records, cfg.segment)

    if model.n_inputs > 1 and cfg.pretrain_encoders:
        first_pool = build_pool(stages[0], datasets, cfg, seed, bank, cache, prebuilt)
        log += pretrain_encoders(model, first_pool, stages[0].epochs, cfg, seed)
    if cfg.freeze_encoders:
        model.freeze_encoders(True)
    if cfg.lora.enabled:
        lora_wrap(model.encoders, cfg.lora.rank, cfg.lora.alpha)
        for parameter in model.head.parameters():
            parameter.requires_grad_(cfg.lora.train_head)

    optimizer = build_optimizer([p for p in model.parameters() if p.requires_grad], cfg.optimizer)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    checkpoints: list[Path] = []
    states: list[dict[str, torch.Tensor]] = []
    val_mcc: list[float] = []
    global_epoch = 0
    for stage_index, stage in enumerate(stages):
        pool = build_pool(stage, datasets, cfg, seed, bank, cache, prebuilt)
        if not pool:
            raise ConfigError(f"Stage {stage_index} produced no training fragments", stage=stage_index)
        weights = class_weights(pool) if cfg.class_weighted else None
        logger.info(f"Stage {stage_index}: sources {stage.sources}, {stage.epochs} epochs, {len(pool)} fragments")
        for _ in range(stage.epochs):
            lr = lr_at(global_epoch, cfg.optimizer.learning_rate, cfg.lr_schedule)
            for group in optimizer.param_groups:
                group["lr"] = lr
            loss = _train_epoch(model, optimizer, pool, cfg, seed, global_epoch, weights)
            metrics = validate(model, val_fragments)
            entry = EpochLog(stage=stage_index, epoch=global_epoch, lr=lr, train_loss=loss,
                             n_fragments=len(pool), val_metrics=metrics)
            log.append(entry)
            if log_path is not None:
                with open(log_path, "a", encoding="utf-8") as handle:
                    handle.write(entry.to_json() + "\n")
            states.append({name: tensor.detach().clone() for name, tensor in model.state_dict().items()})
            val_mcc.append(metrics.get("subject", {}).get("mcc", 0.0))
            if checkpoint_dir is not None:
                checkpoints.append(_save_epoch(model, checkpoint_dir / f"epoch_{global_epoch:03d}.json",
                                               {"stage": stage_index, "epoch": global_epoch}))
            logger.info(f"Epoch {global_epoch} (stage {stage_index}): lr {lr:.3g}, loss {loss:.4f}, "
                        f"val subject MCC {val_mcc[-1]:.4f}")
            global_epoch += 1

    best_epoch, best_state = select_best(states, val_mcc) if val_fragments else (len(states) - 1, states[-1])
    model.load_state_dict(best_state)
    if cfg.lora.enabled:
        lora_merge(model)
    if cfg.svm.enabled:
        originals = segment_records(datasets.get(ORIGINAL_SOURCE, ()), cfg.segment)
        fit_svm_head(model, originals, cfg.svm)
    best_mcc = val_mcc[best_epoch] if val_fragments else None
    logger.info(f"Schedule finished after {global_epoch} epochs; selected epoch {best_epoch}")
    return ScheduleResult(model=model, log=log, best_epoch=best_epoch, best_mcc=best_mcc, checkpoints=checkpoints)


class SearchDim(BaseModel):
    kind: Literal["uniform", "log_uniform", "int", "choice"]
    low: Optional[float] = None
    high: Optional[float] = None
    choices: Optional[list[Any]] = None

    @model_validator(mode="after")
    def _check_bounds(self):
        if self.kind == "choice":
            if not self.choices:
                raise ValueError("choice dimension needs at least one choice")
        elif self.low is None or self.high is None or self.low > self.high:
            raise ValueError(f"{self.kind} dimension needs low <= high")
        elif self.kind == "log_uniform" and self.low <= 0:
            raise ValueError("log_uniform dimension needs a positive lower bound")
        return self

    def draw(self, rng: np.random.Generator) -> Any:
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        if self.kind == "log_uniform":
            return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))
        if self.kind == "int":
            return int(rng.integers(int(self.low), int(self.high) + 1))
        return self.choices[int(rng.integers(len(self.choices)))]


def default_search_space() -> dict[str, SearchDim]:
    """Ranges around every tunable in the packaged hyperparameter presets."""
    return {
        "learning_rate": SearchDim(kind="log_uniform", low=1e-6, high=1e-2),
        "weight_decay": SearchDim(kind="log_uniform", low=1e-6, high=1e-3),
        "momentum": SearchDim(kind="uniform", low=0.0, high=0.95),
        "gamma": SearchDim(kind="log_uniform", low=1e-3, high=1.0),
        "step_size": SearchDim(kind="int", low=1, high=8),
        "batch_size": SearchDim(kind="choice", choices=[16, 32, 64]),
        "n_hidden_layers": SearchDim(kind="int", low=1, high=3),
        "hidden_size": SearchDim(kind="choice", choices=[256, 512, 1024]),
    }


def apply_trial(cfg: TrainConfig, head_cfg: HeadConfig, params: Mapping[str, Any]) -> tuple[TrainConfig, HeadConfig]:
    """Copies of the configs with a trial's values substituted."""
    optimizer_keys = set(OptimizerConfig.model_fields)
    schedule_keys = set(LRSchedule.model_fields)
    head_keys = set(HeadConfig.model_fields)
    unknown = set(params) - optimizer_keys - schedule_keys - head_keys
    if unknown:
        raise ConfigError(f"Unknown search dimensions: {sorted(unknown)}")
    optimizer = cfg.optimizer.model_copy(update={k: v for k, v in params.items() if k in optimizer_keys})
    schedule = cfg.lr_schedule.model_copy(update={k: v for k, v in params.items() if k in schedule_keys})
    head = head_cfg.model_copy(update={k: v for k, v in params.items() if k in head_keys})
    return cfg.model_copy(update={"optimizer": optimizer, "lr_schedule": schedule}), head


@dataclass
class Trial:
    index: int
    params: dict[str, Any]
    scores: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))


def random_search(space: Mapping[str, SearchDim], n_trials: int, runs_per_trial: int,
                  objective: Callable[[dict[str, Any], int], float], seed: int = 0
                  ) -> tuple[dict[str, Any], list[Trial]]:
    """
    Uniform / log-uniform random search maximising the mean objective over repeated runs.

    Args:
        space: Search dimensions by parameter name.
        n_trials: Number of sampled configurations.
        runs_per_trial: Objective evaluations per configuration (e.g. validation MCC per run).
        objective: ``objective(params, run_index) -> score``.
        seed: Sampling seed.

    Returns:
        tuple: (best parameters, trial log). Ties keep the earliest trial.
    """
    if not space:
        raise ConfigError("Search space is empty")
    if n_trials < 1 or runs_per_trial < 1:
        raise ConfigError(f"n_trials and runs_per_trial must be >= 1, got {n_trials} / {runs_per_trial}")
    rng = np.random.default_rng(seed)
    trials = []
    best: Optional[Trial] = None
    for index in range(n_trials):
        params = {name: dim.draw(rng) for name, dim in sorted(space.items())}
        trial = Trial(index=index, params=params, scores=[float(objective(params, run)) for run in range(runs_per_trial)])
        trials.append(trial)
        if best is None or trial.mean > best.mean:
            best = trial
        logger.debug(f"Trial {index}: {params} -> {trial.mean:.4f}")
    logger.info(f"Random search: best trial {best.index} with mean objective {best.mean:.4f}")
    return best.params, trials
