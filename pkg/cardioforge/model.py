"""Concatenated-encoder heart-sound classifier with MLP, LoRA and SVM heads."""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field, model_validator
from sklearn.metrics.pairwise import rbf_kernel
from torch import nn

from cardioforge.errors import ArgumentError, ArtifactIOError, ConfigError, ShapeError, SVMFitError
from cardioforge.state import Fragment

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ConvBlockConfig(BaseModel):
    channels: int = Field(ge=1)
    kernel: int = Field(ge=1)
    stride: int = Field(ge=1)


class EncoderConfig(BaseModel):
    """Conv feature extractor + transformer topology."""
    conv_blocks: list[ConvBlockConfig]
    n_layers: int = Field(ge=0)
    d_model: int = Field(ge=1)
    d_mlp: int = Field(ge=1)
    n_heads: int = Field(ge=1)
    dropout: float = Field(default=0.0, ge=0, lt=1)

    @model_validator(mode="after")
    def _check_heads(self):
        if not self.conv_blocks:
            raise ValueError("at least one conv block is required")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        return self

    @classmethod
    def full(cls) -> "EncoderConfig":
        """Full-size preset: 7 conv blocks / 512 channels, stride 320, receptive field 400; 12 x 768 transformer."""
        kernels, strides = (10, 3, 3, 3, 3, 2, 2), (5, 2, 2, 2, 2, 2, 2)
        return cls(conv_blocks=[ConvBlockConfig(channels=512, kernel=k, stride=s) for k, s in zip(kernels, strides)],
                   n_layers=12, d_model=768, d_mlp=3072, n_heads=8)

    @classmethod
    def toy(cls) -> "EncoderConfig":
        """Desk-scale preset: receptive field 64, stride 16; 2 x 64 transformer."""
        kernels, strides = (12, 4, 6), (4, 2, 2)
        return cls(conv_blocks=[ConvBlockConfig(channels=32, kernel=k, stride=s) for k, s in zip(kernels, strides)],
                   n_layers=2, d_model=64, d_mlp=128, n_heads=2)

    @classmethod
    def preset(cls, name: str) -> "EncoderConfig":
        if name == "full":
            return cls.full()
        if name == "toy":
            return cls.toy()
        raise ConfigError(f"Unknown encoder preset: {name}", preset=name)

    @property
    def total_stride(self) -> int:
        return math.prod(block.stride for block in self.conv_blocks)

    @property
    def receptive_field(self) -> int:
        field_, jump = 1, 1
        for block in self.conv_blocks:
            field_ += (block.kernel - 1) * jump
            jump *= block.stride
        return field_

    def frames_for(self, length: int) -> int:
        """Number of encoder frames for ``length`` input samples: floor((len - R) / S) + 1."""
        if length < self.receptive_field:
            raise ShapeError(f"Input of {length} samples is shorter than the receptive field {self.receptive_field}")
        return (length - self.receptive_field) // self.total_stride + 1


class HeadConfig(BaseModel):
    n_hidden_layers: int = Field(default=1, ge=1)
    hidden_size: int = Field(default=64, ge=1)
    n_classes: int = Field(default=2, ge=2)
    dropout: float = Field(default=0.0, ge=0, lt=1)


class ConvBlock(nn.Module):
    """Conv1d (no bias) -> LayerNorm over channels -> GELU."""

    def __init__(self, in_channels: int, cfg: ConvBlockConfig):
        super().__init__()
        self.conv = nn.Conv1d(in_channels, cfg.channels, cfg.kernel, stride=cfg.stride, bias=False)
        self.norm = nn.LayerNorm(cfg.channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.conv(x)
        x = self.norm(x.transpose(1, 2)).transpose(1, 2)
        return F.gelu(x)


class FeatureEncoder(nn.Module):
    """Waveform [B, L] -> frame features [B, frames, d_model]."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        blocks, in_channels = [], 1
        for block_cfg in cfg.conv_blocks:
            blocks.append(ConvBlock(in_channels, block_cfg))
            in_channels = block_cfg.channels
        self.blocks = nn.ModuleList(blocks)
        self.layer_norm = nn.LayerNorm(in_channels)
        self.projection = nn.Linear(in_channels, cfg.d_model)

    def forward(self, waveform: torch.Tensor) -> torch.Tensor:
        self.cfg.frames_for(waveform.shape[-1])
        x = waveform.unsqueeze(1)
        for block in self.blocks:
            x = block(x)
        return self.projection(self.layer_norm(x.transpose(1, 2)))


def sinusoidal_encoding(n_positions: int, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    position = torch.arange(n_positions, dtype=dtype).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=dtype) * (-math.log(10000.0) / dim))
    table = torch.zeros(n_positions, dim, dtype=dtype)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)[:, : dim // 2]
    return table


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        batch, frames, _ = x.shape

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.view(batch, frames, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        context = (self.dropout(weights) @ v).transpose(1, 2).reshape(batch, frames, -1)
        return self.out_proj(context), weights


class TransformerBlock(nn.Module):
    """Pre-norm self-attention and MLP, each with a residual connection."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attn_norm = nn.LayerNorm(cfg.d_model)
        self.attention = MultiHeadSelfAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.mlp_norm = nn.LayerNorm(cfg.d_model)
        self.fc1 = nn.Linear(cfg.d_model, cfg.d_mlp)
        self.fc2 = nn.Linear(cfg.d_mlp, cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        attended, weights = self.attention(self.attn_norm(x))
        x = x + self.dropout(attended)
        x = x + self.dropout(self.fc2(F.gelu(self.fc1(self.mlp_norm(x)))))
        return x, weights


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(cfg.d_model)

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if features.shape[-1] != self.cfg.d_model:
            raise ShapeError(f"Feature dimension {features.shape[-1]} does not match d_model {self.cfg.d_model}")
        if features.shape[1] < 1:
            raise ShapeError("Transformer input has no frames")
        x = features + sinusoidal_encoding(features.shape[1], features.shape[-1], features.dtype).to(features.device)
        maps = []
        for layer in self.layers:
            x, weights = layer(x)
            maps.append(weights)
        return self.final_norm(x), maps


class InputEncoder(nn.Module):
    """Feature encoder followed by the transformer, for one input signal."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.features = FeatureEncoder(cfg)
        self.transformer = TransformerEncoder(cfg)

    def forward(self, waveform: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        return self.transformer(self.features(waveform))


def feature_encoder(waveform: torch.Tensor, encoder: FeatureEncoder) -> torch.Tensor:
    """Frame features [B, frames, d_model]; frames = floor((len - R) / S) + 1."""
    return encoder(waveform)


def transformer_encode(features: torch.Tensor, encoder: TransformerEncoder) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Contextual features plus per-layer attention maps [B, heads, frames, frames]."""
    return encoder(features)


def concat_features(encoded: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean-pool each [B, frames, d] sequence over frames and concatenate in input order."""
    if not encoded:
        raise ShapeError("concat_features needs at least one encoded input")
    dims = {seq.shape[-1] for seq in encoded}
    if len(dims) != 1:
        raise ShapeError(f"Encoded inputs have inconsistent feature sizes {sorted(dims)}")
    return torch.cat([seq.mean(dim=1) for seq in encoded], dim=-1)


class MLPHead(nn.Module):
    def __init__(self, n_features_in: int, cfg: HeadConfig):
        super().__init__()
        self.n_features_in = n_features_in
        sizes = [n_features_in] + [cfg.hidden_size] * cfg.n_hidden_layers
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
        self.output = nn.Linear(cfg.hidden_size, cfg.n_classes)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, fused: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (logits, first hidden layer activations)."""
        if fused.shape[-1] != self.n_features_in:
            raise ShapeError(f"Head expects {self.n_features_in} features, got {fused.shape[-1]}")
        x = fused
        penultimate = None
        for layer in self.hidden:
            x = self.dropout(F.relu(layer(x)))
            if penultimate is None:
                penultimate = x
        return self.output(x), penultimate


def mlp_head(fused: torch.Tensor, head: MLPHead) -> tuple[torch.Tensor, torch.Tensor]:
    """Class probabilities (softmax) and first-hidden-layer activations."""
    logits, penultimate = head(fused)
    return torch.softmax(logits, dim=-1), penultimate


@dataclass
class SVMHead:
    """RBF-kernel SVM: decision(x) = sum_i coef_i K(sv_i, x) + bias."""

    support_vectors: np.ndarray
    dual_coef: np.ndarray
    bias: float
    gamma: float
    C: float

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        kernel = rbf_kernel(np.atleast_2d(X), self.support_vectors, gamma=self.gamma)
        return kernel @ self.dual_coef + self.bias

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.decision_function(X) >= 0).astype(int)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Abnormal-class probability as the logistic function of the decision value."""
        return 1.0 / (1.0 + np.exp(-self.decision_function(X)))

    def to_dict(self) -> dict[str, Any]:
        return {"support_vectors": self.support_vectors.tolist(), "dual_coef": self.dual_coef.tolist(),
                "bias": float(self.bias), "gamma": float(self.gamma), "C": float(self.C)}

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "SVMHead":
        return cls(support_vectors=np.asarray(payload["support_vectors"], dtype=np.float64),
                   dual_coef=np.asarray(payload["dual_coef"], dtype=np.float64),
                   bias=payload["bias"], gamma=payload["gamma"], C=payload["C"])


def scale_gamma(X: np.ndarray) -> float:
    """``1 / (n_features * X.var())``, or 1 for constant features."""
    variance = float(np.var(X))
    return 1.0 / (X.shape[1] * variance) if variance > 0 else 1.0


def svm_fit(X: np.ndarray, labels: np.ndarray, gamma: Union[str, float] = "scale", C: float = 1.0,
            tol: float = 1e-3, max_iter: int = 100_000) -> SVMHead:
    """
    Fit an RBF SVM by sequential minimal optimisation.

    Each iteration updates the maximal-violating pair analytically and stops
    once the KKT violation gap is below ``tol``.

    Args:
        X: Feature matrix [n, d].
        labels: Class indices (0 normal, 1 abnormal) or +/-1.
        gamma: ``"scale"`` or an explicit kernel width.
        C: Box constraint.
        tol: KKT tolerance.
        max_iter: Iteration guard.

    Returns:
        SVMHead: Support vectors with non-zero dual coefficients.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size != 2:
        raise SVMFitError(f"SVM fit needs exactly two classes, got {classes.tolist()}")
    y = np.where(labels == classes.max(), 1.0, -1.0)
    gamma_value = scale_gamma(X) if gamma == "scale" else float(gamma)
    if not C > 0:
        raise SVMFitError(f"C must be positive, got {C}")

    kernel = rbf_kernel(X, X, gamma=gamma_value)
    n = y.size
    alpha = np.zeros(n)
    grad = -np.ones(n)

    for iteration in range(max_iter):
        score = -y * grad
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        i = int(np.flatnonzero(up)[np.argmax(score[up])])
        j = int(np.flatnonzero(low)[np.argmin(score[low])])
        gap = score[i] - score[j]
        if gap < tol:
            break
        eta = max(kernel[i, i] + kernel[j, j] - 2 * kernel[i, j], 1e-12)
        step = gap / eta
        step = min(step, C - alpha[i] if y[i] > 0 else alpha[i])
        step = min(step, alpha[j] if y[j] > 0 else C - alpha[j])
        delta_i, delta_j = y[i] * step, -y[j] * step
        alpha[i] += delta_i
        alpha[j] += delta_j
        grad += y * (y[i] * kernel[:, i] * delta_i + y[j] * kernel[:, j] * delta_j)
    else:
        logger.warning(f"SMO stopped after {max_iter} iterations without reaching tol={tol}")

    score = -y * grad
    free = (alpha > 1e-12) & (alpha < C - 1e-12)
    if np.any(free):
        bias = float(np.mean(score[free]))
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        bias = float((score[up].max() + score[low].min()) / 2)

    support = alpha > 1e-12
    logger.info(f"SVM fitted: {int(support.sum())} support vectors of {n}, gamma={gamma_value:.4g}")
    return SVMHead(support_vectors=X[support], dual_coef=(alpha * y)[support], bias=bias,
                   gamma=gamma_value, C=float(C))


class LoRALinear(nn.Module):
    """
    Frozen linear map plus a trainable low-rank update.

    Implements: y = W x + b + (alpha / r) * B A x, with B zero-initialised so
    a freshly wrapped layer reproduces the base layer exactly.
    """

    def __init__(self, base: nn.Linear, rank: int = 8, alpha: float = 16.0):
        super().__init__()
        if rank < 1:
            raise ArgumentError(f"LoRA rank must be >= 1, got {rank}")
        if rank > min(base.in_features, base.out_features):
            raise ArgumentError(f"LoRA rank {rank} exceeds min(d_in, d_out) of {base}")
        self.base = base
        for parameter in self.base.parameters():
            parameter.requires_grad_(False)
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * (x @ self.lora_A.T @ self.lora_B.T)

    def merged(self) -> nn.Linear:
        """A plain Linear with the low-rank update folded into its weight."""
        linear = nn.Linear(self.in_features, self.out_features, bias=self.base.bias is not None,
                           dtype=self.base.weight.dtype)
        with torch.no_grad():
            linear.weight.copy_(self.base.weight + self.scaling * self.lora_B @ self.lora_A)
            if self.base.bias is not None:
                linear.bias.copy_(self.base.bias)
        return linear


LORA_TARGETS = ("q_proj", "v_proj", "fc1")


def lora_wrap(model: nn.Module, rank: int = 8, alpha: float = 16.0, targets: Sequence[str] = LORA_TARGETS,
              train_head: bool = False) -> list[str]:
    """
    Replace every Linear named in ``targets`` with a LoRALinear and freeze the rest.

    Args:
        model: Module to adapt in place.
        rank: Adapter rank.
        alpha: Adapter scale numerator.
        targets: Attribute names of the linear maps to adapt.
        train_head: Keep a ``head`` submodule trainable as well.

    Returns:
        list[str]: Qualified names of the wrapped maps.
    """
    if rank < 1:
        raise ArgumentError(f"LoRA rank must be >= 1, got {rank}")
    for parameter in model.parameters():
        parameter.requires_grad_(False)
    wrapped = []
    for name, module in list(model.named_modules()):
        for target in targets:
            child = getattr(module, target, None)
            if isinstance(child, nn.Linear):
                setattr(module, target, LoRALinear(child, rank, alpha))
                wrapped.append(f"{name}.{target}" if name else target)
    if train_head and hasattr(model, "head"):
        for parameter in model.head.parameters():
            parameter.requires_grad_(True)
    logger.info(f"LoRA rank {rank} applied to {len(wrapped)} linear maps")
    return wrapped


def lora_merge(model: nn.Module) -> nn.Module:
    """Fold every LoRALinear back into a plain Linear; all parameters become trainable again."""
    for module in list(model.modules()):
        for name, child in list(module.named_children()):
            if isinstance(child, LoRALinear):
                setattr(module, name, child.merged())
    for parameter in model.parameters():
        parameter.requires_grad_(True)
    return model


class HeartSoundClassifier(nn.Module):
    """
    One encoder per input channel, mean-pooled and concatenated, then an MLP
    head. An attached SVM head replaces the MLP layers for prediction.
    """

    def __init__(self, encoder_cfg: EncoderConfig, head_cfg: HeadConfig, n_inputs: int = 1):
        super().__init__()
        if n_inputs < 1:
            raise ShapeError(f"Classifier needs at least one input, got {n_inputs}")
        self.encoder_cfg = encoder_cfg
        self.head_cfg = head_cfg
        self.n_inputs = n_inputs
        self.encoders = nn.ModuleList(InputEncoder(encoder_cfg) for _ in range(n_inputs))
        self.head = MLPHead(n_inputs * encoder_cfg.d_model, head_cfg)
        self.svm_head: Optional[SVMHead] = None

    def _split_inputs(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() == 2:
            x = x.unsqueeze(1)
        if x.shape[1] != self.n_inputs:
            raise ShapeError(f"Classifier expects {self.n_inputs} input channels, got {x.shape[1]}")
        return [x[:, index] for index in range(self.n_inputs)]

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, list[list[torch.Tensor]]]:
        """Fused feature vector [B, n_inputs * d_model] and attention maps per input."""
        outputs = [encoder(channel) for encoder, channel in zip(self.encoders, self._split_inputs(x))]
        return concat_features([features for features, _ in outputs]), [maps for _, maps in outputs]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        fused, _ = self.encode(x)
        logits, _ = self.head(fused)
        return logits

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        fused, _ = self.encode(x)
        _, penultimate = self.head(fused)
        return penultimate

    @torch.no_grad()
    def predict_proba(self, x: torch.Tensor) -> np.ndarray:
        """Abnormal-class probability per example."""
        was_training = self.training
        self.eval()
        try:
            if self.svm_head is not None:
                return self.svm_head.predict_proba(self.embed(x).double().cpu().numpy())
            return torch.softmax(self(x), dim=-1)[:, 1].double().cpu().numpy()
        finally:
            self.train(was_training)

    def freeze_encoders(self, frozen: bool = True) -> None:
        for parameter in self.encoders.parameters():
            parameter.requires_grad_(not frozen)


@torch.no_grad()
def attention_importance(model: HeartSoundClassifier, fragment: Fragment,
                         input_index: Optional[int] = None) -> np.ndarray:
    """
    Per-sample importance from final-layer attention.

    The attention each token receives (column mean, averaged over heads) is
    spread over the samples the token covers, averaged where tokens overlap,
    and min-max normalised to [0, 1]. A flat result becomes all ones.

    Args:
        model: Classifier with at least one transformer layer.
        fragment: Fragment to explain.
        input_index: Input channel to explain; all inputs are averaged when None.

    Returns:
        np.ndarray: Importance curve with one value per fragment sample.
    """
    model.eval()
    x = torch.as_tensor(fragment.samples, dtype=next(model.parameters()).dtype).unsqueeze(0)
    _, maps = model.encode(x)
    indices = range(model.n_inputs) if input_index is None else [input_index]
    cfg = model.encoder_cfg
    n = fragment.length
    curves = []
    for index in indices:
        if not maps[index]:
            raise ShapeError("Attention importance needs at least one transformer layer")
        received = maps[index][-1][0].mean(dim=0).mean(dim=0).double().cpu().numpy()
        total = np.zeros(n)
        count = np.zeros(n)
        for token, value in enumerate(received):
            start = token * cfg.total_stride
            stop = min(start + cfg.receptive_field, n)
            total[start:stop] += value
            count[start:stop] += 1
        covered = count > 0
        curve = np.empty(n)
        curve[covered] = total[covered] / count[covered]
        # Tail samples beyond the last receptive field take the last token's value
        curve[~covered] = received[-1]
        curves.append(curve)
    curve = np.mean(curves, axis=0)
    span = curve.max() - curve.min()
    if span <= 1e-12 * max(1.0, abs(curve.max())):
        return np.ones(n)
    return (curve - curve.min()) / span


def export_attention_csv(curve: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"sample_index": np.arange(curve.size), "importance": curve}).to_csv(path, index=False)
    return path


def tensors_to_records(state: dict[str, torch.Tensor]) -> list[dict[str, Any]]:
    """Named tensors as (name, shape, row-major data) records, in sorted name order."""
    return [
        {"name": name, "shape": list(tensor.shape),
         "data": tensor.detach().cpu().to(torch.float64).reshape(-1).tolist()}
        for name, tensor in sorted(state.items())
    ]


def records_to_tensors(records: list[dict[str, Any]], dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    return {
        record["name"]: torch.tensor(record["data"], dtype=dtype).reshape(record["shape"])
        for record in records
    }


def write_json_checkpoint(payload: dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise ArtifactIOError(f"Cannot write checkpoint {path}: {e}", path=str(path)) from e
    return path


def read_json_checkpoint(path: Union[str, Path], kind: str) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Checkpoint not found: {path}", path=str(path))
    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("format") != kind or payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path} is not a version-{CHECKPOINT_VERSION} {kind} checkpoint", path=str(path))
    return payload


def save_model_checkpoint(model: HeartSoundClassifier, path: Union[str, Path],
                          position: Optional[dict[str, Any]] = None) -> Path:
    """Self-describing JSON checkpoint: configs, named tensors, schedule position and optional SVM head."""
    if any(isinstance(module, LoRALinear) for module in model.modules()):
        raise ConfigError("Merge LoRA adapters before saving a checkpoint")
    payload = {
        "format": "cardioforge-classifier",
        "version": CHECKPOINT_VERSION,
        "encoder": model.encoder_cfg.model_dump(mode="json"),
        "head": model.head_cfg.model_dump(mode="json"),
        "n_inputs": model.n_inputs,
        "tensors": tensors_to_records(model.state_dict()),
        "position": position or {},
        "svm": model.svm_head.to_dict() if model.svm_head is not None else None,
    }
    return write_json_checkpoint(payload, path)


def load_model_checkpoint(path: Union[str, Path]) -> tuple[HeartSoundClassifier, dict[str, Any]]:
    payload = read_json_checkpoint(path, "cardioforge-classifier")
    model = HeartSoundClassifier(EncoderConfig.model_validate(payload["encoder"]),
                                 HeadConfig.model_validate(payload["head"]), payload["n_inputs"])
    model.load_state_dict(records_to_tensors(payload["tensors"]))
    if payload.get("svm"):
        model.svm_head = SVMHead.from_dict(payload["svm"])
    return model, payload.get("position", {})
