"""
Clip aggregation models.

Every model shares the same frame: a position-wise reduction layer (b -> d, affine),
an aggregation stage producing one snippet vector s, and the CLS head
(affine + sigmoid over the g genres). The aggregation stage is either the
4-block transformer encoder with average pooling, a GRU scan or a temporal
convolution. Inputs are (c, b) or batched (batch, c, b) arrays.
"""

import logging
import math
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
import toml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from trailersmith.errors import ConfigError, DimensionError, StorageError, ArgumentError, handle_errors
from trailersmith.genres import NUM_GENRES
from trailersmith import tensor as T
from trailersmith.tensor import ParamStore, Tensor, load_checkpoint, save_checkpoint, uniform_fan_in

logger = logging.getLogger("trailersmith.aggregator")

AggregatorKind = Literal["transformer", "gru", "conv"]


class AggregatorConfig(BaseModel):
    """Shape and regularization of a clip aggregation model."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: AggregatorKind = "transformer"
    b: int = Field(ge=1)
    d: int = Field(default=128, ge=1)
    blocks: int = Field(default=4, ge=1)
    heads: int = Field(default=4, ge=1)
    ffn_multiplier: int = Field(default=4, ge=1)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    positional_encoding: Literal["sinusoidal", "none"] = "sinusoidal"
    gru_hidden: int = Field(default=115, ge=1)
    conv_filters: int = Field(default=128, ge=1)
    conv_width: int = Field(default=3, ge=1)
    layer_norm_eps: float = Field(default=1e-5, gt=0)
    g: int = NUM_GENRES

    @model_validator(mode="after")
    def _check_widths(self) -> "AggregatorConfig":
        if self.d >= self.b:
            raise ConfigError("Reduction width d must be smaller than the feature width b",
                              {"d": self.d, "b": self.b})
        if self.kind == "transformer" and self.d % self.heads:
            raise ConfigError("d must be divisible by the number of heads",
                              {"d": self.d, "heads": self.heads})
        if self.g != NUM_GENRES:
            raise ConfigError("The genre vocabulary has exactly 10 genres", {"g": self.g})
        return self

    @property
    def ffn_width(self) -> int:
        return self.ffn_multiplier * self.d

    @property
    def head_width(self) -> int:
        return self.d // self.heads

    @property
    def snippet_width(self) -> int:
        """Width of the snippet vector s fed to the CLS head."""
        if self.kind == "gru":
            return self.gru_hidden
        if self.kind == "conv":
            return self.conv_filters
        return self.d


class AggregatorModel:
    """Parameters of one aggregation model, created deterministically from (config, seed)."""

    def __init__(self, config: AggregatorConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        self._linear(rng, "reduce", config.b, config.d)
        if config.kind == "transformer":
            for block in range(config.blocks):
                prefix = f"block{block}"
                for proj in ("q", "k", "v", "o"):
                    self._linear(rng, f"{prefix}.attn.{proj}", config.d, config.d)
                self._norm(f"{prefix}.norm1", config.d)
                self._linear(rng, f"{prefix}.ffn.in", config.d, config.ffn_width)
                self._linear(rng, f"{prefix}.ffn.out", config.ffn_width, config.d)
                self._norm(f"{prefix}.norm2", config.d)
        elif config.kind == "gru":
            for gate in ("r", "z", "n"):
                self._linear(rng, f"gru.input.{gate}", config.d, config.gru_hidden)
                self._linear(rng, f"gru.hidden.{gate}", config.gru_hidden, config.gru_hidden)
        else:
            fan_in = config.d * config.conv_width
            self.params.add("conv.weight",
                            uniform_fan_in(rng, fan_in, (config.conv_width, config.d, config.conv_filters)))
            self.params.add("conv.bias", np.zeros(config.conv_filters))
        self._linear(rng, "cls", config.snippet_width, config.g)

    def _linear(self, rng: np.random.Generator, name: str, fan_in: int, fan_out: int) -> None:
        self.params.add(f"{name}.weight", uniform_fan_in(rng, fan_in, (fan_in, fan_out)))
        self.params.add(f"{name}.bias", np.zeros(fan_out))

    def _norm(self, name: str, width: int) -> None:
        self.params.add(f"{name}.scale", np.ones(width))
        self.params.add(f"{name}.shift", np.zeros(width))

    def parameter_count(self) -> int:
        return self.params.parameter_count()

    def logits(self, clips: Union[np.ndarray, Tensor], rng: Optional[np.random.Generator] = None) -> Tensor:
        """Pre-sigmoid genre logits z for one snippet (c, b) or a batch (batch, c, b)."""
        if self.config.kind == "gru":
            s = aggregate_gru(clips, self, rng)
        elif self.config.kind == "conv":
            s = aggregate_conv(clips, self, rng)
        else:
            s = pool(encode(reduce_clips(clips, self), self, rng))
        z, _ = classify(s, self)
        return z

    def predict_proba(self, clips: np.ndarray) -> np.ndarray:
        """Genre probabilities without dropout."""
        return T.sigmoid(self.logits(clips)).data

    def linear(self, x: Tensor, name: str) -> Tensor:
        return x @ self.params[f"{name}.weight"] + self.params[f"{name}.bias"]

    def norm(self, x: Tensor, name: str) -> Tensor:
        normalized = T.layer_norm(x, axis=-1, eps=self.config.layer_norm_eps)
        return normalized * self.params[f"{name}.scale"] + self.params[f"{name}.shift"]

    @handle_errors(error_type=StorageError)
    def save(self, path: Union[str, Path]) -> None:
        """Write `<path>` (DVTM weights) and `<path>.toml` (config and seed) side by side."""
        path = Path(path)
        save_checkpoint(path, self.params)
        meta = {"seed": self.seed, "config": self.config.model_dump()}
        path.with_suffix(".toml").write_text(toml.dumps(meta), encoding="utf-8")

    @classmethod
    @handle_errors(error_type=StorageError)
    def load(cls, path: Union[str, Path]) -> "AggregatorModel":
        path = Path(path)
        meta = toml.loads(path.with_suffix(".toml").read_text(encoding="utf-8"))
        model = cls(AggregatorConfig(**meta["config"]), seed=int(meta.get("seed", 0)))
        model.params.load(load_checkpoint(path))
        return model


def _as_input(clips: Union[np.ndarray, Tensor], width: int) -> Tensor:
    x = T.as_tensor(clips)
    if x.ndim not in (2, 3):
        raise DimensionError("Clip matrix must be (c, b) or (batch, c, b)", {"shape": x.shape})
    if x.shape[-1] != width:
        raise DimensionError("Feature width does not match the model", {"expected": width, "actual": x.shape[-1]})
    if x.shape[-2] < 1:
        raise ArgumentError("Snippet has no clips")
    return x


def reduce_clips(clips: Union[np.ndarray, Tensor], model: AggregatorModel) -> Tensor:
    """Position-wise affine map b -> d, applied to each clip row independently."""
    return model.linear(_as_input(clips, model.config.b), "reduce")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    batch, c, d = x.shape
    return T.transpose(T.reshape(x, (batch, c, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    batch, heads, c, width = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (batch, c, heads * width))


def self_attention(x: Tensor, model: AggregatorModel, prefix: str,
                   attention_out: Optional[List[np.ndarray]] = None) -> Tensor:
    """Multi-head scaled dot-product self-attention over the clip axis of (batch, c, d)."""
    heads = model.config.heads
    q = _split_heads(model.linear(x, f"{prefix}.q"), heads)
    k = _split_heads(model.linear(x, f"{prefix}.k"), heads)
    v = _split_heads(model.linear(x, f"{prefix}.v"), heads)
    scores = T.scale(q @ T.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(model.config.head_width))
    weights = T.softmax(scores, axis=-1)
    if attention_out is not None:
        attention_out.append(weights.data.copy())
    return model.linear(_merge_heads(weights @ v), f"{prefix}.o")


def encode(x: Union[np.ndarray, Tensor], model: AggregatorModel, rng: Optional[np.random.Generator] = None,
           attention_out: Optional[List[np.ndarray]] = None) -> Tensor:
    """Positional encoding plus the post-norm encoder blocks; shape preserved."""
    config = model.config
    x = T.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[-1] != config.d:
        raise DimensionError("Encoder input width must be d", {"expected": config.d, "actual": x.shape[-1]})
    if config.positional_encoding == "sinusoidal":
        x = x + T.sinusoidal_table(x.shape[1], config.d)
    for block in range(config.blocks):
        prefix = f"block{block}"
        attended = T.dropout(self_attention(x, model, f"{prefix}.attn", attention_out), config.dropout, rng)
        x = model.norm(x + attended, f"{prefix}.norm1")
        hidden = T.relu(model.linear(x, f"{prefix}.ffn.in"))
        fed = T.dropout(model.linear(hidden, f"{prefix}.ffn.out"), config.dropout, rng)
        x = model.norm(x + fed, f"{prefix}.norm2")
    if squeeze:
        x = T.reshape(x, x.shape[1:])
    return x


def pool(x: Union[np.ndarray, Tensor]) -> Tensor:
    """Average over the clip (time) axis."""
    x = T.as_tensor(x)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ArgumentError("Cannot pool an empty clip sequence", {"shape": x.shape})
    return T.mean(x, axis=-2)


def classify(s: Union[np.ndarray, Tensor], model: AggregatorModel) -> Tuple[Tensor, Tensor]:
    """CLS head: logits z = affine(s), probabilities p = sigmoid(z)."""
    z = model.linear(T.as_tensor(s), "cls")
    return z, T.sigmoid(z)


def gru_scan(x: Tensor, model: AggregatorModel) -> Tensor:
    """GRU over the clip axis of (batch, c, d); returns the last hidden state."""
    hidden = model.config.gru_hidden
    h = T.Tensor(np.zeros((x.shape[0], hidden)))
    for t in range(x.shape[1]):
        x_t = x[:, t, :]
        r = T.sigmoid(model.linear(x_t, "gru.input.r") + model.linear(h, "gru.hidden.r"))
        z = T.sigmoid(model.linear(x_t, "gru.input.z") + model.linear(h, "gru.hidden.z"))
        n = T.tanh(model.linear(x_t, "gru.input.n") + r * model.linear(h, "gru.hidden.n"))
        h = (1.0 - z) * n + z * h
    return h


def aggregate_gru(clips: Union[np.ndarray, Tensor], model: AggregatorModel,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """Snippet vector from the recurrent baseline: reduction, GRU scan, final hidden state."""
    x = reduce_clips(clips, model)
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    s = T.dropout(gru_scan(x, model), model.config.dropout, rng)
    return T.reshape(s, s.shape[1:]) if squeeze else s


def temporal_conv(x: Tensor, model: AggregatorModel) -> Tensor:
    """Zero-padded 'same' Conv1D over the clip axis of (batch, c, d), then relu."""
    width = model.config.conv_width
    batch, c, d = x.shape
    left = (width - 1) // 2
    right = width - 1 - left
    parts = []
    if left:
        parts.append(np.zeros((batch, left, d)))
    parts.append(x)
    if right:
        parts.append(np.zeros((batch, right, d)))
    padded = T.concat(parts, axis=1) if len(parts) > 1 else x
    weight = model.params["conv.weight"]
    out = model.params["conv.bias"]
    for k in range(width):
        out = out + padded[:, k:k + c, :] @ weight[k]
    return T.relu(out)


def aggregate_conv(clips: Union[np.ndarray, Tensor], model: AggregatorModel,
                   rng: Optional[np.random.Generator] = None) -> Tensor:
    """Snippet vector from the convolutional baseline: reduction, Conv1D, mean over time."""
    x = reduce_clips(clips, model)
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    s = T.dropout(pool(temporal_conv(x, model)), model.config.dropout, rng)
    return T.reshape(s, s.shape[1:]) if squeeze else s


def fuse_logits(z_a: np.ndarray, z_b: np.ndarray) -> np.ndarray:
    """Late fusion: elementwise mean of two streams' logits."""
    z_a, z_b = np.asarray(z_a, dtype=np.float64), np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape:
        raise DimensionError("Fused logits must have equal shapes", {"left": z_a.shape, "right": z_b.shape})
    return (z_a + z_b) / 2.0
