"""The ELTransformer seq2point regressor.

Input window (l,) -> two parallel convolutions concatenated to (l, d_model)
-> + learned positional embeddings -> L2 pooling to (l_p, d_model) -> linear
-> n_layers transformer blocks (mixed global/local heads, GELU feed-forward,
post-norm residuals) -> + symmetric relative embeddings -> LayerNorm -> 2-layer
ReLU MLP per position -> mean over positions -> one scalar.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Optional

import numpy as np

from eltnilm.attention import AttentionConfig, init_attention_params, multi_head
from eltnilm.errors import ConfigError, DimensionError
from eltnilm.tensor import (
    Tensor,
    as_tensor,
    concat,
    conv1d,
    gather,
    gelu,
    layer_norm,
    lp_pool2,
    matmul,
    no_grad,
    relu,
    reshape,
    tmean,
)


@dataclass
class ModelConfig:
    input_len: int = 599
    d_model: int = 256
    n_heads: int = 4
    n_local: int = 2
    l_win: int = 20
    n_layers: int = 2
    conv_kernels: tuple = (5, 11)
    pool_kernel: int = 2
    pool_stride: int = 2
    regressor_hidden: Optional[int] = None

    def __post_init__(self):
        self.conv_kernels = tuple(int(k) for k in self.conv_kernels)

    @property
    def hidden(self) -> int:
        return self.regressor_hidden or self.d_model

    @property
    def pooled_len(self) -> int:
        return -(-self.input_len // self.pool_stride) if self.pool_stride > 0 else 0

    @property
    def conv_channels(self) -> int:
        return self.d_model // 2

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.n_heads, self.n_local, self.l_win)

    def errors(self) -> list:
        found = []
        if self.input_len < 1 or self.input_len % 2 == 0:
            found.append("input_len must be odd")
        if self.d_model < 2 or self.d_model % 2:
            found.append("d_model must be even and >= 2")
        if len(self.conv_kernels) != 2:
            found.append("conv_kernels must list exactly two kernel sizes")
        elif any(k < 1 or k % 2 == 0 for k in self.conv_kernels):
            found.append("conv_kernels must be odd and >= 1")
        if self.pool_kernel < 1:
            found.append("pool_kernel must be >= 1")
        if self.pool_stride < 1:
            found.append("pool_stride must be >= 1")
        if self.n_layers < 0:
            found.append("n_layers must be >= 0")
        if self.regressor_hidden is not None and self.regressor_hidden < 1:
            found.append("regressor_hidden must be >= 1")
        found.extend(self.attention.errors())
        return found

    def validate(self) -> "ModelConfig":
        found = self.errors()
        if found:
            raise ConfigError("; ".join(found), found)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_kernels"] = list(self.conv_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


class ParameterStore(Mapping):
    """Named trainable tensors, in a fixed insertion order."""

    def __init__(self, tensors: Optional[dict] = None):
        self._tensors = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def add(self, name: str, data) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = data if isinstance(data, Tensor) else Tensor(data, requires_grad=True)
        t.name = name
        self._tensors[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def count(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_arrays(self, arrays: Mapping) -> None:
        missing = set(self._tensors) - set(arrays)
        extra = set(arrays) - set(self._tensors)
        if missing or extra:
            raise ConfigError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in self._tensors.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: expected shape {t.shape}, got {arr.shape}")
            t.data[...] = arr


def relative_index(pooled_len: int) -> np.ndarray:
    """Row of the tied relative embedding used at each pooled position.

    Positions equally far from the midpoint share a row, so the expanded
    table is symmetric about the centre.
    """
    i = np.arange(pooled_len)
    return np.minimum(i, pooled_len - 1 - i)


def relative_rows(pooled_len: int) -> int:
    return (pooled_len + 1) // 2


def init_params(cfg: ModelConfig, seed: int = 0) -> ParameterStore:
    cfg.validate()
    rng = np.random.default_rng(seed)
    d, c, h = cfg.d_model, cfg.conv_channels, cfg.hidden
    p = ParameterStore()
    for i, k in enumerate(cfg.conv_kernels, start=1):
        p.add(f"conv{i}.w", rng.normal(0.0, 1.0 / math.sqrt(k), (k, 1, c)))
        p.add(f"conv{i}.b", np.zeros(c))
    p.add("pos_emb", rng.normal(0.0, 0.02, (cfg.input_len, d)))
    p.add("extract.w", rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)))
    p.add("extract.b", np.zeros(d))
    for layer in range(cfg.n_layers):
        pre = f"layer{layer}."
        for name, t in init_attention_params(cfg.attention, rng, pre + "attn.").items():
            p.add(name, t)
        p.add(pre + "ln1.gain", np.ones(d))
        p.add(pre + "ln1.shift", np.zeros(d))
        p.add(pre + "ffn.w1", rng.normal(0.0, 1.0 / math.sqrt(d), (d, 4 * d)))
        p.add(pre + "ffn.b1", np.zeros(4 * d))
        p.add(pre + "ffn.w2", rng.normal(0.0, 1.0 / math.sqrt(4 * d), (4 * d, d)))
        p.add(pre + "ffn.b2", np.zeros(d))
        p.add(pre + "ln2.gain", np.ones(d))
        p.add(pre + "ln2.shift", np.zeros(d))
    p.add("rel_emb", rng.normal(0.0, 0.02, (relative_rows(cfg.pooled_len), d)))
    p.add("head.ln.gain", np.ones(d))
    p.add("head.ln.shift", np.zeros(d))
    p.add("head.w1", rng.normal(0.0, 1.0 / math.sqrt(d), (d, h)))
    p.add("head.b1", np.zeros(h))
    p.add("head.w2", rng.normal(0.0, 1.0 / math.sqrt(h), (h, 1)))
    p.add("head.b2", np.zeros(1))
    return p


def layer_param_count(cfg: ModelConfig) -> int:
    d = cfg.d_model
    return 4 * d * d + (d * 4 * d + 4 * d) + (4 * d * d + d) + 4 * d


def feature_extract(x: Tensor, params: Mapping, cfg: ModelConfig) -> Tensor:
    """(batch, l) mains windows -> (batch, l_p, d_model) hidden sequence."""
    if x.shape[-1] != cfg.input_len:
        raise DimensionError(f"input length {x.shape[-1]} != configured {cfg.input_len}")
    x3 = reshape(x, x.shape + (1,))
    feats = concat([conv1d(x3, params["conv1.w"], params["conv1.b"]),
                    conv1d(x3, params["conv2.w"], params["conv2.b"])], axis=-1)
    pooled = lp_pool2(feats + params["pos_emb"], cfg.pool_kernel, cfg.pool_stride)
    return matmul(pooled, params["extract.w"]) + params["extract.b"]


def transformer_block(x: Tensor, params: Mapping, cfg: ModelConfig, layer: int) -> Tensor:
    pre = f"layer{layer}."
    attended = multi_head(x, cfg.attention, params, pre + "attn.")
    x1 = layer_norm(x + attended, params[pre + "ln1.gain"], params[pre + "ln1.shift"])
    inner = gelu(matmul(x1, params[pre + "ffn.w1"]) + params[pre + "ffn.b1"])
    ffn = matmul(inner, params[pre + "ffn.w2"]) + params[pre + "ffn.b2"]
    return layer_norm(x1 + ffn, params[pre + "ln2.gain"], params[pre + "ln2.shift"])


def regress(x: Tensor, params: Mapping, cfg: ModelConfig) -> Tensor:
    """(batch, l_p, d_model) -> (batch,) by averaging per-position MLP outputs."""
    rel = gather(params["rel_emb"], relative_index(x.shape[-2]), axis=0)
    normed = layer_norm(x + rel, params["head.ln.gain"], params["head.ln.shift"])
    hidden = relu(matmul(normed, params["head.w1"]) + params["head.b1"])
    per_position = matmul(hidden, params["head.w2"]) + params["head.b2"]
    return tmean(reshape(per_position, per_position.shape[:-1]), axis=-1)


def forward(x, params: Mapping, cfg: ModelConfig) -> Tensor:
    """Predict the normalised appliance power at each window's midpoint.

    ``x`` is one window ``(l,)`` (returns a 0-d tensor) or a batch ``(b, l)``.
    """
    x = as_tensor(x)
    single = x.ndim == 1
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 2:
        raise DimensionError(f"forward expects (l,) or (batch, l), got {x.shape}")
    h = feature_extract(x, params, cfg)
    for layer in range(cfg.n_layers):
        h = transformer_block(h, params, cfg, layer)
    out = regress(h, params, cfg)
    return reshape(out, ()) if single else out


def param_count(params: ParameterStore) -> int:
    return params.count()


@dataclass
class ELTransformer:
    """A model configuration bound to its parameters."""

    cfg: ModelConfig
    params: ParameterStore = field(default=None)
    seed: int = 0

    def __post_init__(self):
        self.cfg.validate()
        if self.params is None:
            self.params = init_params(self.cfg, self.seed)

    def __call__(self, x) -> Tensor:
        return forward(x, self.params, self.cfg)

    def param_count(self) -> int:
        return self.params.count()

    def predict(self, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
        inputs = np.asarray(inputs, dtype=np.float64)
        out = np.empty(len(inputs))
        with no_grad():
            for start in range(0, len(inputs), batch_size):
                chunk = inputs[start:start + batch_size]
                out[start:start + len(chunk)] = forward(chunk, self.params, self.cfg).data
        return out

    def predict_windows(self, windows, batch_size: int = 256) -> np.ndarray:
        """Normalised predictions for every window of a :class:`WindowSet`."""
        out = np.empty(len(windows))
        with no_grad():
            for start in range(0, len(windows), batch_size):
                idx = np.arange(start, min(start + batch_size, len(windows)))
                out[idx] = forward(windows.inputs(idx), self.params, self.cfg).data
        return out


def with_overrides(cfg: ModelConfig, **changes) -> ModelConfig:
    d = cfg.to_dict()
    d.update(changes)
    return ModelConfig.from_dict(d).validate()

