"""Encoder-decoder transducer over spectrogram-like inputs.

The encoder front end is two blocks of (3x3 conv, ReLU, 2x2 max pool), which
reduces time and frequency by 4x each, followed by a linear projection to the
model width.  Encoder and decoder stacks are post-norm transformer layers:
multi-head scaled dot-product attention and a two-layer ReLU feed-forward,
each wrapped in residual + layer norm, with dropout applied to sublayer
outputs before the residual add.

Three variants differ only in how position information enters:

- ``conv-context``: causal 1D convolutions over decoder embeddings, no
  positional encodings anywhere (the 2D front end covers the encoder side).
- ``proposed``: neither convolutions nor positional encodings.
- ``proposed-pe``: sinusoidal positional encodings added to the encoder
  projection and the scaled decoder embeddings.

Every forward accepts an optional ``hook`` with ``weight(name, tensor)`` and
``act(name, tensor)`` methods.  Hooks see each parameter and each
requantization point under a stable site name, which is how the quantization
pipeline instruments training, calibration, and the integer inference audit.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

VARIANTS = ("conv-context", "proposed", "proposed-pe")

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
N_SPECIAL = 3

MASK_FILL = -1e30


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; ``variant`` selects the position scheme."""

    d_model: int = 512
    n_heads: int = 8
    d_ff: int = 2048
    enc_layers: int = 6
    dec_layers: int = 6
    vocab_size: int = 5000
    feature_dim: int = 80
    dropout: float = 0.1
    variant: str = "proposed"
    dec_conv_blocks: int = 3
    dec_conv_width: int = 3
    frontend_channels: int = 64

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.vocab_size < N_SPECIAL + 1:
            raise ContractError(f"vocab_size must be at least {N_SPECIAL + 1}")
        if min(self.enc_layers, self.dec_layers) < 1:
            raise ContractError("need at least one encoder and one decoder layer")
        if self.feature_dim < 1:
            raise ContractError("feature_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must be in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def frontend_out_dim(self) -> int:
        """Flattened channels x frequency width after the two pooled conv blocks."""
        return self.frontend_channels * ((self.feature_dim // 2) // 2)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape table for every trainable parameter.

    Drives initialization, counting, checkpointing, and the quantization site
    audit without allocating any arrays.
    """
    if config.frontend_out_dim < config.frontend_channels:
        raise ContractError(
            f"feature_dim {config.feature_dim} collapses to zero width after pooling")
    d, ff, ch = config.d_model, config.d_ff, config.frontend_channels
    shapes: dict[str, tuple[int, ...]] = {}
    shapes["frontend.conv0.w"] = (ch, 1, 3, 3)
    shapes["frontend.conv0.b"] = (ch,)
    shapes["frontend.conv1.w"] = (ch, ch, 3, 3)
    shapes["frontend.conv1.b"] = (ch,)
    shapes["frontend.proj.w"] = (config.frontend_out_dim, d)
    shapes["frontend.proj.b"] = (d,)
    shapes["embed.w"] = (config.vocab_size, d)
    if config.variant == "conv-context":
        for i in range(config.dec_conv_blocks):
            shapes[f"dec_conv{i}.w"] = (config.dec_conv_width, d, d)
            shapes[f"dec_conv{i}.b"] = (d,)
    for i in range(config.enc_layers):
        p = f"enc{i}"
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.self.{name}"] = (d, d)
        shapes[f"{p}.norm1.gamma"] = (d,)
        shapes[f"{p}.norm1.beta"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, ff)
        shapes[f"{p}.ffn.b1"] = (ff,)
        shapes[f"{p}.ffn.w2"] = (ff, d)
        shapes[f"{p}.ffn.b2"] = (d,)
        shapes[f"{p}.norm2.gamma"] = (d,)
        shapes[f"{p}.norm2.beta"] = (d,)
    for i in range(config.dec_layers):
        p = f"dec{i}"
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.self.{name}"] = (d, d)
        shapes[f"{p}.norm1.gamma"] = (d,)
        shapes[f"{p}.norm1.beta"] = (d,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.cross.{name}"] = (d, d)
        shapes[f"{p}.norm2.gamma"] = (d,)
        shapes[f"{p}.norm2.beta"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, ff)
        shapes[f"{p}.ffn.b1"] = (ff,)
        shapes[f"{p}.ffn.w2"] = (ff, d)
        shapes[f"{p}.ffn.b2"] = (d,)
        shapes[f"{p}.norm3.gamma"] = (d,)
        shapes[f"{p}.norm3.beta"] = (d,)
    shapes["output.w"] = (d, config.vocab_size)
    shapes["output.b"] = (config.vocab_size,)
    return shapes


def count_params(config: ModelConfig) -> int:
    """Total trainable scalar count, computed from shapes without allocating."""
    return sum(math.prod(s) for s in param_shapes(config).values())


def is_matrix_param(name: str) -> bool:
    """True for the weight matrices/kernels that the 8-bit pipeline quantizes.

    Biases and layer-norm affine parameters stay in float32.
    """
    leaf = name.rsplit(".", 1)[-1]
    return leaf not in ("b", "b1", "b2", "gamma", "beta")


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameters: uniform fan-balanced matrices, zero biases, unit norms."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("b", "b1", "b2", "beta"):
            data = np.zeros(shape)
        elif leaf == "gamma":
            data = np.ones(shape)
        elif name == "embed.w":
            data = rng.normal(0.0, config.d_model ** -0.5, size=shape)
        else:
            if len(shape) == 2:
                fan_in, fan_out = shape
            elif len(shape) == 4:            # (out_ch, in_ch, kh, kw)
                fan_in = shape[1] * shape[2] * shape[3]
                fan_out = shape[0] * shape[2] * shape[3]
            else:                            # (width, d_in, d_out)
                fan_in = shape[0] * shape[1]
                fan_out = shape[0] * shape[2]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-limit, limit, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def sinusoidal_pe(length: int, d_model: int) -> np.ndarray:
    """Fixed sin/cos position table: sin on even columns, cos on odd."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(0, d_model, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, idx / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return pe


def causal_mask(length: int) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, a large negative above."""
    return np.triu(np.full((length, length), MASK_FILL), k=1)


class Model:
    """Bundles a config with parameters and runs hooked forward passes."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        expected = param_shapes(config)
        if set(self.params) != set(expected):
            missing = set(expected) - set(self.params)
            extra = set(self.params) - set(expected)
            raise ContractError(f"parameter set mismatch: missing={sorted(missing)}, "
                                f"unexpected={sorted(extra)}")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise ContractError(
                    f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    # -- hook plumbing ---------------------------------------------------------

    @staticmethod
    def _w(hook, name: str, t: Tensor) -> Tensor:
        return hook.weight(name, t) if hook is not None else t

    @staticmethod
    def _a(hook, name: str, t: Tensor) -> Tensor:
        return hook.act(name, t) if hook is not None else t

    def _drop(self, x: Tensor, train: bool, rng) -> Tensor:
        if not train or self.config.dropout == 0.0:
            return x
        if rng is None:
            raise ContractError("training forward needs an rng for dropout")
        return T.dropout(x, self.config.dropout, rng)

    # -- attention ---------------------------------------------------------------

    def _attention(self, x_q: Tensor, x_kv: Tensor, prefix: str,
                   mask: np.ndarray | None, hook, attn_sink=None) -> Tensor:
        cfg = self.config
        p = self.params
        q = self._a(hook, f"{prefix}.q", T.matmul(x_q, self._w(hook, f"{prefix}.wq", p[f"{prefix}.wq"])))
        k = self._a(hook, f"{prefix}.k", T.matmul(x_kv, self._w(hook, f"{prefix}.wk", p[f"{prefix}.wk"])))
        v = self._a(hook, f"{prefix}.v", T.matmul(x_kv, self._w(hook, f"{prefix}.wv", p[f"{prefix}.wv"])))
        scale = 1.0 / math.sqrt(cfg.d_head)
        mask_t = Tensor(mask) if mask is not None else None
        heads = []
        for h in range(cfg.n_heads):
            lo = h * cfg.d_head
            qh = T.narrow(q, 1, lo, cfg.d_head)
            kh = T.narrow(k, 1, lo, cfg.d_head)
            vh = T.narrow(v, 1, lo, cfg.d_head)
            scores = self._a(hook, f"{prefix}.scores",
                             T.matmul(qh, T.transpose(kh)) * Tensor(scale))
            if mask_t is not None:
                scores = scores + mask_t
            weights = self._a(hook, f"{prefix}.weights", T.softmax(scores, axis=-1))
            if attn_sink is not None:
                attn_sink.append((f"{prefix}.h{h}", weights.data.copy()))
            heads.append(T.matmul(weights, vh))
        context = self._a(hook, f"{prefix}.context", T.concat(heads, axis=1))
        out = T.matmul(context, self._w(hook, f"{prefix}.wo", p[f"{prefix}.wo"]))
        return self._a(hook, f"{prefix}.out", out)

    def _ffn(self, x: Tensor, prefix: str, hook) -> Tensor:
        p = self.params
        h = T.matmul(x, self._w(hook, f"{prefix}.w1", p[f"{prefix}.w1"])) + p[f"{prefix}.b1"]
        h = self._a(hook, f"{prefix}.act", T.relu(h))
        out = T.matmul(h, self._w(hook, f"{prefix}.w2", p[f"{prefix}.w2"])) + p[f"{prefix}.b2"]
        return self._a(hook, f"{prefix}.out", out)

    def _norm(self, x: Tensor, prefix: str, hook) -> Tensor:
        p = self.params
        return self._a(hook, f"{prefix}.out",
                       T.layer_norm(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"]))

    # -- encoder -----------------------------------------------------------------

    def encode(self, features: np.ndarray, train: bool = False, rng=None,
               hook=None, attn_sink=None) -> Tensor:
        """Map (T, feature_dim) input frames to (T//4, d_model) memory."""
        cfg = self.config
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != cfg.feature_dim:
            raise ContractError(
                f"expected features of shape (T, {cfg.feature_dim}), got {feats.shape}")
        if feats.shape[0] < 4:
            raise ContractError(
                f"input too short: {feats.shape[0]} frames, the front end needs at least 4")
        x = self._a(hook, "input_features", Tensor(feats))
        p = self.params

        img = T.reshape(x, (1,) + feats.shape)
        img = self._a(hook, "frontend.conv0.act", T.relu(
            T.conv2d(img, self._w(hook, "frontend.conv0.w", p["frontend.conv0.w"]),
                     p["frontend.conv0.b"], stride=1, padding=1)))
        img = T.max_pool2d(img, 2, 2)
        img = self._a(hook, "frontend.conv1.act", T.relu(
            T.conv2d(img, self._w(hook, "frontend.conv1.w", p["frontend.conv1.w"]),
                     p["frontend.conv1.b"], stride=1, padding=1)))
        img = T.max_pool2d(img, 2, 2)

        # (ch, T', F') -> (T', ch * F'): time-major rows for the stack.
        ch, t_out, f_out = img.shape
        x = T.reshape(T.transpose(T.reshape(img, (ch, t_out * f_out))), (t_out, ch * f_out))
        x = T.matmul(x, self._w(hook, "frontend.proj.w", p["frontend.proj.w"]))
        x = x + p["frontend.proj.b"]
        if cfg.variant == "proposed-pe":
            x = x + Tensor(sinusoidal_pe(t_out, cfg.d_model))
        x = self._a(hook, "frontend.proj.out", x)

        for i in range(cfg.enc_layers):
            attn = self._drop(self._attention(x, x, f"enc{i}.self", None, hook, attn_sink),
                              train, rng)
            x = self._norm(x + attn, f"enc{i}.norm1", hook)
            ffn = self._drop(self._ffn(x, f"enc{i}.ffn", hook), train, rng)
            x = self._norm(x + ffn, f"enc{i}.norm2", hook)
        return x

    # -- decoder -----------------------------------------------------------------

    def decode(self, memory: Tensor, token_ids: np.ndarray, train: bool = False,
               rng=None, hook=None, attn_sink=None) -> Tensor:
        """Map decoder input ids (BOS-led) and memory to (L, vocab) logits."""
        cfg = self.config
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ContractError(f"decoder ids must be a non-empty 1D array, got shape {ids.shape}")
        p = self.params

        table = self._w(hook, "embed.w", p["embed.w"])
        x = T.embedding(table, ids) * Tensor(math.sqrt(cfg.d_model))
        if cfg.variant == "proposed-pe":
            x = x + Tensor(sinusoidal_pe(ids.size, cfg.d_model))
        x = self._a(hook, "embed.out", x)

        if cfg.variant == "conv-context":
            for i in range(cfg.dec_conv_blocks):
                x = self._a(hook, f"dec_conv{i}.act", T.relu(T.causal_conv1d(
                    x, self._w(hook, f"dec_conv{i}.w", p[f"dec_conv{i}.w"]),
                    p[f"dec_conv{i}.b"])))

        mask = causal_mask(ids.size)
        for i in range(cfg.dec_layers):
            attn = self._drop(self._attention(x, x, f"dec{i}.self", mask, hook, attn_sink),
                              train, rng)
            x = self._norm(x + attn, f"dec{i}.norm1", hook)
            cross = self._drop(self._attention(x, memory, f"dec{i}.cross", None, hook, attn_sink),
                               train, rng)
            x = self._norm(x + cross, f"dec{i}.norm2", hook)
            ffn = self._drop(self._ffn(x, f"dec{i}.ffn", hook), train, rng)
            x = self._norm(x + ffn, f"dec{i}.norm3", hook)

        logits = T.matmul(x, self._w(hook, "output.w", p["output.w"])) + p["output.b"]
        return self._a(hook, "output.logits", logits)

    def forward(self, features: np.ndarray, token_ids: np.ndarray, train: bool = False,
                rng=None, hook=None, attn_sink=None) -> Tensor:
        memory = self.encode(features, train, rng, hook, attn_sink)
        return self.decode(memory, token_ids, train, rng, hook, attn_sink)

    def predict_logits(self, features: np.ndarray, token_ids: np.ndarray) -> np.ndarray:
        """Inference logits as a plain array (decoding entry point)."""
        with T.no_grad():
            return self.forward(features, token_ids).data
