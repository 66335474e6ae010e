"""Encoder-decoder transformer blocks on the autodiff tensor core.

Pre-norm residual blocks, sinusoidal positions, and one embedding table
shared between source, target and the (tied) output projection. The stacks
are parameterized by `ModelConfig`; the desk-scale defaults train in
minutes on a CPU while the full-size configuration stays expressible.
"""

import hashlib
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .errors import DataError
from .rng import name_key, stream

NEG_INF = -1e9


@dataclass
class ModelConfig:
    """Architecture and objective hyperparameters.

    det_weight scales the whole disentangling term in the joint loss,
    recons_weight scales the reconstruction part inside it, and
    negative_weight balances negative samples in both contrastive losses.
    """

    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    ffn_dim: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_ling_layers: int = 2
    max_len: int = 64
    dropout_p: float = 0.1
    label_smoothing: float = 0.1
    use_disentangler: bool = True
    use_det_loss: bool = True
    use_ling_encoder: bool = True
    det_weight: float = 0.05
    recons_weight: float = 0.2
    negative_weight: float = 0.2
    dtype: str = "float32"

    def __post_init__(self):
        dims = {
            "vocab_size": self.vocab_size, "d_model": self.d_model, "n_heads": self.n_heads,
            "ffn_dim": self.ffn_dim, "n_enc_layers": self.n_enc_layers,
            "n_dec_layers": self.n_dec_layers, "n_ling_layers": self.n_ling_layers,
            "max_len": self.max_len,
        }
        for name, value in dims.items():
            if int(value) < 1:
                raise DataError(f"config: {name} must be >= 1, got {value}")
        if self.d_model % self.n_heads != 0:
            raise DataError(f"config: d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("det_weight", "recons_weight", "negative_weight"):
            if getattr(self, name) < 0:
                raise DataError(f"config: {name} must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise DataError(f"config: dropout_p must be in [0, 1), got {self.dropout_p}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise DataError(f"config: label_smoothing must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise DataError(f"config: dtype must be float32 or float64, got {self.dtype}")
        if self.use_det_loss and not self.use_disentangler:
            raise DataError("config: the disentangling objective requires the disentangler")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def digest(self):
        """Hex digest over the canonical key=value form; pins checkpoints to configs."""
        lines = [f"{f.name}={getattr(self, f.name)!r}" for f in fields(self)]
        return hashlib.sha256("\n".join(sorted(lines)).encode("utf-8")).hexdigest()

    def with_toggles(self, use_disentangler=None, use_det_loss=None, use_ling_encoder=None):
        kwargs = {}
        if use_disentangler is not None:
            kwargs["use_disentangler"] = use_disentangler
        if use_det_loss is not None:
            kwargs["use_det_loss"] = use_det_loss
        if use_ling_encoder is not None:
            kwargs["use_ling_encoder"] = use_ling_encoder
        return replace(self, **kwargs)


@dataclass
class EncoderOutput:
    states: ad.Tensor  # [batch, src_len, d_model]
    mask: np.ndarray   # [batch, src_len] 1.0 at real tokens


class DropoutState:
    """Per-forward dropout: draws come from one seeded stream in call order."""

    def __init__(self, p, rng):
        self.p = float(p)
        self.rng = rng

    def __call__(self, x):
        if self.p == 0.0:
            return x
        return ad.dropout(x, self.p, self.rng, training=True)


def _apply_drop(drop, x):
    return x if drop is None else drop(x)


# ---------------------------------------------------------------------------
# parameterized blocks


class Linear:
    def __init__(self, name, d_in, d_out, seed, dtype):
        self.name = name
        bound = 1.0 / math.sqrt(d_in)
        w = stream(seed, "init", name_key(name + ".weight")).uniform(-bound, bound, (d_in, d_out))
        b = stream(seed, "init", name_key(name + ".bias")).uniform(-bound, bound, d_out)
        self.weight = ad.Tensor(w.astype(dtype), tracked=True)
        self.bias = ad.Tensor(b.astype(dtype), tracked=True)

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def named_parameters(self):
        yield self.name + ".weight", self.weight
        yield self.name + ".bias", self.bias


class LayerNorm:
    def __init__(self, name, d, dtype):
        self.name = name
        self.gain = ad.Tensor(np.ones(d, dtype=dtype), tracked=True)
        self.bias = ad.Tensor(np.zeros(d, dtype=dtype), tracked=True)

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)

    def named_parameters(self):
        yield self.name + ".gain", self.gain
        yield self.name + ".bias", self.bias


class Embedding:
    def __init__(self, name, vocab_size, d, seed, dtype):
        self.name = name
        w = stream(seed, "init", name_key(name + ".weight")).normal(0.0, d ** -0.5, (vocab_size, d))
        self.weight = ad.Tensor(w.astype(dtype), tracked=True)

    def __call__(self, ids):
        return ad.embedding(self.weight, ids)

    def named_parameters(self):
        yield self.name + ".weight", self.weight


class FeedForward:
    """Linear -> ReLU -> Linear, the position-wise block used everywhere."""

    def __init__(self, name, d_in, d_hidden, d_out, seed, dtype):
        self.inner = Linear(name + ".inner", d_in, d_hidden, seed, dtype)
        self.outer = Linear(name + ".outer", d_hidden, d_out, seed, dtype)

    def __call__(self, x):
        return self.outer(ad.relu(self.inner(x)))

    def named_parameters(self):
        yield from self.inner.named_parameters()
        yield from self.outer.named_parameters()


class MultiHeadAttention:
    def __init__(self, name, d_model, n_heads, seed, dtype):
        self.name = name
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.d_model = d_model
        self.wq = Linear(name + ".wq", d_model, d_model, seed, dtype)
        self.wk = Linear(name + ".wk", d_model, d_model, seed, dtype)
        self.wv = Linear(name + ".wv", d_model, d_model, seed, dtype)
        self.wo = Linear(name + ".wo", d_model, d_model, seed, dtype)

    def _split(self, x):
        b, t, _ = x.shape
        return ad.transpose(ad.reshape(x, (b, t, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def _merge(self, x):
        b, h, t, dk = x.shape
        return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dk))

    def _attend(self, q, k, v, bias, drop):
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.d_head))
        if bias is not None:
            scores = ad.add(scores, ad.Tensor(bias))
        weights = ad.softmax(scores, axis=-1)
        weights = _apply_drop(drop, weights)
        return self.wo(self._merge(ad.matmul(weights, v)))

    def __call__(self, query, keys_values, bias, drop=None):
        q = self._split(self.wq(query))
        k = self._split(self.wk(keys_values))
        v = self._split(self.wv(keys_values))
        return self._attend(q, k, v, bias, drop)

    def project_kv(self, keys_values):
        """Precompute split K/V arrays for incremental decoding."""
        k = self._split(self.wk(keys_values))
        v = self._split(self.wv(keys_values))
        return k.data, v.data

    def step(self, query, k_data, v_data, bias):
        """One-position attention against precomputed K/V arrays."""
        q = self._split(self.wq(query))
        return self._attend(q, ad.Tensor(k_data), ad.Tensor(v_data), bias, None)

    def named_parameters(self):
        for part in (self.wq, self.wk, self.wv, self.wo):
            yield from part.named_parameters()


class EncoderLayer:
    def __init__(self, name, config, seed):
        d, dtype = config.d_model, config.np_dtype
        self.attn_norm = LayerNorm(name + ".attn_norm", d, dtype)
        self.attn = MultiHeadAttention(name + ".attn", d, config.n_heads, seed, dtype)
        self.ffn_norm = LayerNorm(name + ".ffn_norm", d, dtype)
        self.ffn = FeedForward(name + ".ffn", d, config.ffn_dim, d, seed, dtype)

    def __call__(self, x, bias, drop=None):
        normed = self.attn_norm(x)
        x = ad.add(x, _apply_drop(drop, self.attn(normed, normed, bias, drop)))
        x = ad.add(x, _apply_drop(drop, self.ffn(self.ffn_norm(x))))
        return x

    def named_parameters(self):
        for part in (self.attn_norm, self.attn, self.ffn_norm, self.ffn):
            yield from part.named_parameters()


class DecoderLayer:
    def __init__(self, name, config, seed):
        d, dtype = config.d_model, config.np_dtype
        self.self_norm = LayerNorm(name + ".self_norm", d, dtype)
        self.self_attn = MultiHeadAttention(name + ".self_attn", d, config.n_heads, seed, dtype)
        self.cross_norm = LayerNorm(name + ".cross_norm", d, dtype)
        self.cross_attn = MultiHeadAttention(name + ".cross_attn", d, config.n_heads, seed, dtype)
        self.ffn_norm = LayerNorm(name + ".ffn_norm", d, dtype)
        self.ffn = FeedForward(name + ".ffn", d, config.ffn_dim, d, seed, dtype)

    def __call__(self, x, memory, self_bias, cross_bias, drop=None):
        normed = self.self_norm(x)
        x = ad.add(x, _apply_drop(drop, self.self_attn(normed, normed, self_bias, drop)))
        x = ad.add(x, _apply_drop(drop, self.cross_attn(self.cross_norm(x), memory, cross_bias, drop)))
        x = ad.add(x, _apply_drop(drop, self.ffn(self.ffn_norm(x))))
        return x

    def named_parameters(self):
        for part in (self.self_norm, self.self_attn, self.cross_norm,
                     self.cross_attn, self.ffn_norm, self.ffn):
            yield from part.named_parameters()


# ---------------------------------------------------------------------------
# positions and masks


def sinusoidal_positions(max_len, d_model, dtype):
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    idx = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, idx / d_model)
    table = np.zeros((max_len, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : table[:, 1::2].shape[1]])
    return table.astype(dtype)


def padding_bias(mask, dtype):
    """[b, t] keep-mask -> additive [b, 1, 1, t] bias for attention keys."""
    return ((1.0 - np.asarray(mask, dtype=np.float64)) * NEG_INF).astype(dtype)[:, None, None, :]


def causal_bias(t, dtype):
    """[1, 1, t, t] additive bias hiding future positions."""
    upper = np.triu(np.full((t, t), NEG_INF, dtype=np.float64), k=1)
    return upper.astype(dtype)[None, None, :, :]


def validate_ids(ids, vocab_size, max_len, what):
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise DataError(f"{what}: ids must be a [batch, len] matrix, got shape {ids.shape}")
    if ids.shape[1] == 0:
        raise DataError(f"{what}: zero-length sequence")
    if ids.shape[1] > max_len:
        raise DataError(f"{what}: length {ids.shape[1]} exceeds max_len {max_len}")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise DataError(f"{what}: token id out of range [0, {vocab_size})")
    return ids


# ---------------------------------------------------------------------------
# stacks


class EncoderStack:
    """Self-attention encoder; also reused (with a causal bias) as the
    decoder-side language-feature encoder."""

    def __init__(self, name, config, n_layers, seed):
        self.name = name
        self.layers = [EncoderLayer(f"{name}.{i}", config, seed) for i in range(n_layers)]
        self.final_norm = LayerNorm(name + ".final_norm", config.d_model, config.np_dtype)

    def __call__(self, x, bias, drop=None):
        for layer in self.layers:
            x = layer(x, bias, drop)
        return self.final_norm(x)

    def named_parameters(self):
        for layer in self.layers:
            yield from layer.named_parameters()
        yield from self.final_norm.named_parameters()


class DecoderStack:
    def __init__(self, name, config, seed):
        self.name = name
        self.layers = [DecoderLayer(f"{name}.{i}", config, seed) for i in range(config.n_dec_layers)]
        self.final_norm = LayerNorm(name + ".final_norm", config.d_model, config.np_dtype)

    def __call__(self, x, memory, self_bias, cross_bias, drop=None):
        for layer in self.layers:
            x = layer(x, memory, self_bias, cross_bias, drop)
        return self.final_norm(x)

    def named_parameters(self):
        for layer in self.layers:
            yield from layer.named_parameters()
        yield from self.final_norm.named_parameters()


def parameter_count(config):
    """Exact parameter count as a pure function of the configuration."""
    d, f, v = config.d_model, config.ffn_dim, config.vocab_size
    linear = lambda din, dout: din * dout + dout
    norm = 2 * d
    attn = 4 * linear(d, d)
    ffn = linear(d, f) + linear(f, d)
    enc_layer = attn + ffn + 2 * norm
    dec_layer = 2 * attn + ffn + 3 * norm
    total = v * d
    total += config.n_enc_layers * enc_layer + norm
    total += config.n_dec_layers * dec_layer + norm
    if config.use_disentangler:
        total += 2 * (linear(d, f) + linear(f, d))
    if config.use_ling_encoder:
        total += config.n_ling_layers * enc_layer + norm
        total += linear(2 * d, f) + linear(f, d)
    return total
