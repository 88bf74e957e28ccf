"""Small networks built from INT8 linear layers with hand-written backward."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .linalg import matmul
from .quant import QuantSpec, QuantizedTensor, dequantize, quantize

__all__ = [
    "Architecture",
    "ModelConfig",
    "ModelError",
    "NonFiniteLossError",
    "Int8Linear",
    "MLPRegressor",
    "TinyCharLM",
    "build_model",
    "model_forward_backward",
]

GradCallback = Callable[[str, np.ndarray], None]


class ModelError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, loss: float, layer_norms: dict[str, float]):
        norms = ", ".join(f"{k}={v:.3g}" for k, v in layer_norms.items())
        super().__init__(f"non-finite loss {loss} (weight norms: {norms})")
        self.loss = loss
        self.layer_norms = layer_norms


class Architecture(str, enum.Enum):
    MLP_REGRESSOR = "mlp"
    TINY_CHAR_LM = "charlm"


@dataclass(frozen=True)
class ModelConfig:
    architecture: Architecture = Architecture.MLP_REGRESSOR
    # regressor
    n_features: int = 16
    n_outputs: int = 16
    hidden: tuple[int, ...] = ()
    # char LM
    vocab_size: int = 64
    embed_dim: int = 16
    context: int = 32
    lm_hidden: int = 64
    n_blocks: int = 2
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture(self.architecture))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = [self.n_features, self.n_outputs, self.vocab_size, self.embed_dim,
                self.context, self.lm_hidden, *self.hidden]
        if any(d < 1 for d in dims) or self.n_blocks < 0:
            raise ModelError("all model dimensions must be positive")
        if self.architecture is Architecture.TINY_CHAR_LM and self.param_count() > 2_000_000:
            raise ModelError(f"TinyCharLM has {self.param_count()} parameters, limit is 2M")

    def matrix_shapes(self) -> dict[str, tuple[int, int]]:
        """Shapes (out, in) of every Int8Linear weight, keyed by layer name."""
        if self.architecture is Architecture.MLP_REGRESSOR:
            widths = [self.n_features, *self.hidden, self.n_outputs]
            return {f"fc{i}": (widths[i + 1], widths[i]) for i in range(len(widths) - 1)}
        shapes = {}
        width = self.context * self.embed_dim
        for i in range(self.n_blocks):
            shapes[f"block{i}"] = (self.lm_hidden, width)
            width = self.lm_hidden
        shapes["head"] = (self.vocab_size, width)
        return shapes

    def vector_shapes(self) -> dict[str, tuple[int, ...]]:
        """Float parameters that bypass projection: biases and the embedding."""
        shapes = {f"{name}.bias": (out,) for name, (out, _) in self.matrix_shapes().items()}
        if self.architecture is Architecture.TINY_CHAR_LM:
            shapes["embed"] = (self.vocab_size, self.embed_dim)
        return shapes

    def param_count(self) -> int:
        n = sum(o * i for o, i in self.matrix_shapes().values())
        return n + sum(math.prod(s) for s in self.vector_shapes().values())


@dataclass(eq=False)
class Int8Linear:
    """``y = x @ W.T + b`` with W held block-quantized."""

    W_q: QuantizedTensor
    bias: np.ndarray | None = None
    cached_input: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def init(cls, out_dim: int, in_dim: int, rng: np.random.Generator,
             weight_bits: int | None = 8, block_size: int = 256, bias: bool = True) -> "Int8Linear":
        W = rng.standard_normal((out_dim, in_dim)) / math.sqrt(in_dim)
        W_q = quantize(W.astype(np.float32), QuantSpec(weight_bits, block_size))
        b = np.zeros(out_dim, np.float32) if bias else None
        return cls(W_q, b)

    @property
    def shape(self) -> tuple[int, int]:
        return self.W_q.shape

    def weight(self) -> np.ndarray:
        return dequantize(self.W_q)

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.shape[1]:
            raise ModelError(f"input {x.shape} incompatible with layer {self.shape}")
        y = matmul(x, self.weight().T)
        if self.bias is not None:
            y += self.bias
        if cache:
            self.cached_input = x
        return y

    def backward(self, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.cached_input is None:
            raise ModelError("backward called without a matching forward")
        if grad_out.shape != (self.cached_input.shape[0], self.shape[0]):
            raise ModelError(f"grad_out {grad_out.shape} incompatible with layer {self.shape}")
        grad_in = matmul(grad_out, self.weight())
        grad_W = matmul(grad_out.T, self.cached_input)
        self.cached_input = None
        return grad_in, grad_W


class _Model:
    config: ModelConfig
    layers: dict[str, Int8Linear]

    def vectors(self) -> dict[str, np.ndarray]:
        out = {f"{n}.bias": l.bias for n, l in self.layers.items() if l.bias is not None}
        return out

    def layer_norms(self) -> dict[str, float]:
        return {n: float(np.linalg.norm(l.weight())) for n, l in self.layers.items()}

    def named_tensors(self) -> Iterator[tuple[str, object]]:
        for name, layer in self.layers.items():
            yield f"{name}.weight", layer.W_q
        yield from self.vectors().items()


class MLPRegressor(_Model):
    def __init__(self, config: ModelConfig, weight_bits: int | None = 8, block_size: int = 256):
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        self.layers = {
            name: Int8Linear.init(o, i, rng, weight_bits, block_size)
            for name, (o, i) in config.matrix_shapes().items()
        }
        self._acts: list[np.ndarray] = []

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        acts = []
        h = np.asarray(x, np.float32)
        names = list(self.layers)
        for k, name in enumerate(names):
            h = self.layers[name].forward(h, cache)
            if k < len(names) - 1:
                h = np.tanh(h)
                acts.append(h)
        if cache:
            self._acts = acts
        return h

    def loss(self, batch, cache: bool = False) -> float:
        x, y = batch
        pred = self.forward(x, cache)
        return float(np.mean((pred.astype(np.float64) - y) ** 2))

    def forward_backward(self, batch, callback: GradCallback) -> float:
        x, y = batch
        pred = self.forward(x).astype(np.float64)
        diff = pred - y
        loss = float(np.mean(diff * diff))
        _check_loss(loss, self)
        grad = (2.0 * diff / diff.size).astype(np.float32)
        names = list(self.layers)
        for k in range(len(names) - 1, -1, -1):
            layer = self.layers[names[k]]
            grad_b = grad.sum(axis=0)
            grad_in, grad_W = layer.backward(grad)
            callback(f"{names[k]}.weight", grad_W)
            callback(f"{names[k]}.bias", grad_b)
            del grad_W
            if k > 0:
                a = self._acts[k - 1]
                grad = grad_in * (1.0 - a * a)
        self._acts = []
        return loss


class TinyCharLM(_Model):
    """Embeddings of the last ``context`` bytes -> tanh blocks (residual after the first) -> logits."""

    def __init__(self, config: ModelConfig, weight_bits: int | None = 8, block_size: int = 256):
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        self.embed = (rng.standard_normal((config.vocab_size, config.embed_dim)) * 0.5).astype(np.float32)
        self.layers = {
            name: Int8Linear.init(o, i, rng, weight_bits, block_size)
            for name, (o, i) in config.matrix_shapes().items()
        }
        self._cache: dict = {}

    def vectors(self) -> dict[str, np.ndarray]:
        out = super().vectors()
        out["embed"] = self.embed
        return out

    def _logits(self, ctx: np.ndarray, cache: bool) -> np.ndarray:
        cfg = self.config
        ctx = np.asarray(ctx)
        if ctx.ndim != 2 or ctx.shape[1] != cfg.context:
            raise ModelError(f"context batch {ctx.shape} incompatible with context {cfg.context}")
        h = self.embed[ctx].reshape(ctx.shape[0], -1)
        acts = []
        for i in range(cfg.n_blocks):
            a = np.tanh(self.layers[f"block{i}"].forward(h, cache))
            acts.append(a)
            h = a if i == 0 else h + a
        if cache:
            self._cache = {"ctx": ctx, "acts": acts}
        return self.layers["head"].forward(h, cache)

    def loss(self, batch, cache: bool = False) -> float:
        ctx, targets = batch
        logits = self._logits(ctx, cache).astype(np.float64)
        return float(_cross_entropy(logits, targets)[0])

    def forward_backward(self, batch, callback: GradCallback) -> float:
        cfg = self.config
        ctx, targets = batch
        logits = self._logits(ctx, True).astype(np.float64)
        loss, grad = _cross_entropy(logits, targets)
        _check_loss(loss, self)
        grad = grad.astype(np.float32)

        head = self.layers["head"]
        grad_b = grad.sum(axis=0)
        grad_h, grad_W = head.backward(grad)
        callback("head.weight", grad_W)
        callback("head.bias", grad_b)
        del grad_W

        acts = self._cache["acts"]
        for i in range(cfg.n_blocks - 1, -1, -1):
            a = acts[i]
            g_pre = grad_h * (1.0 - a * a)
            layer = self.layers[f"block{i}"]
            grad_b = g_pre.sum(axis=0)
            grad_in, grad_W = layer.backward(g_pre)
            callback(f"block{i}.weight", grad_W)
            callback(f"block{i}.bias", grad_b)
            del grad_W
            # residual blocks pass the incoming gradient straight through
            grad_h = grad_in if i == 0 else grad_h + grad_in

        ctx = self._cache["ctx"]
        grad_embed = np.zeros_like(self.embed)
        np.add.at(grad_embed, ctx.reshape(-1), grad_h.reshape(-1, cfg.embed_dim))
        callback("embed", grad_embed)
        self._cache = {}
        return loss


def _cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -float(np.mean(logp[rows, targets]))
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    return loss, grad / n


def _check_loss(loss: float, model: _Model) -> None:
    if not math.isfinite(loss):
        raise NonFiniteLossError(loss, model.layer_norms())


def build_model(config: ModelConfig, weight_bits: int | None = 8, block_size: int = 256):
    if config.architecture is Architecture.MLP_REGRESSOR:
        return MLPRegressor(config, weight_bits, block_size)
    return TinyCharLM(config, weight_bits, block_size)


def model_forward_backward(model, batch, callback: GradCallback) -> float:
    """Loss for ``batch``; each parameter gradient goes to ``callback`` as soon as it exists."""
    return model.forward_backward(batch, callback)
