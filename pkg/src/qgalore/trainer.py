"""Training loop, run configuration, memory estimation and metrics."""
from __future__ import annotations

import dataclasses
import enum
import json
import math
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .data import RegressionData, TextData, ingest_synthetic, ingest_text
from .model import Architecture, ModelConfig, NonFiniteLossError, build_model
from .optimizer import (
    AdamConfig,
    AdamState,
    dense_param_step,
    full_rank_step,
    layer_step,
    lr_schedule,
)
from .quant import QuantizationError, QuantizedTensor, QuantSpec, Rounding, dequantize, substream
from .subspace import ProjectionState, Side, default_rank

__all__ = [
    "Method",
    "SubspaceConfig",
    "DataConfig",
    "RunConfig",
    "ConfigError",
    "DivergenceError",
    "MetricsRecord",
    "Trainer",
    "TrainResult",
    "estimate_memory",
    "run_training",
    "load_data",
]

_SR_KEY = 201
FLOAT_BITS = (16, 32)


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message: str, record: "MetricsRecord"):
        super().__init__(message)
        self.record = record


class Method(str, enum.Enum):
    FULL_ADAM = "full_adam"
    GALORE = "galore"
    QGALORE = "qgalore"


def _qbits(bits: int) -> int | None:
    """Storage bits -> quantizer bits; 16/32 mean float passthrough."""
    return None if bits in FLOAT_BITS else bits


@dataclass(frozen=True)
class SubspaceConfig:
    rank: int | None = None          # None: a quarter of each layer's smaller dim
    base_interval: int = 50
    window: int = 3
    threshold: float = 0.4
    adaptive: bool = True
    proj_bits: int = 4
    interval_cap: int | None = None
    similarity: str = "flat"
    reset_moments_on_update: bool = False
    full_rank_layers: tuple[str, ...] = ()   # matrix layers left unprojected

    def __post_init__(self):
        object.__setattr__(self, "full_rank_layers", tuple(self.full_rank_layers))


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"          # "synthetic" | "text"
    path: str | None = None
    n_features: int = 16
    n_outputs: int = 16
    noise: float = 0.01              # variance of the target noise
    n_val: int = 1024


@dataclass(frozen=True)
class RunConfig:
    method: Method = Method.QGALORE
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    subspace: SubspaceConfig = field(default_factory=SubspaceConfig)
    data: DataConfig = field(default_factory=DataConfig)
    rounding: Rounding = Rounding.STOCHASTIC
    weight_bits: int = 8
    state_bits: int | None = None    # None: 8 for qgalore, 32 otherwise
    block_size: int = 256
    total_steps: int = 1000
    batch_size: int = 32
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "rounding", Rounding(self.rounding))
        if self.weight_bits not in (8, 16, 32):
            raise ConfigError(f"weight_bits must be 8, 16 or 32, got {self.weight_bits}")
        if self.state_bits not in (None, 8, 16, 32):
            raise ConfigError(f"state_bits must be 8, 16 or 32, got {self.state_bits}")
        if self.subspace.proj_bits not in (4, 8, 16, 32):
            raise ConfigError(f"proj_bits must be 4, 8, 16 or 32, got {self.subspace.proj_bits}")
        if self.total_steps < 0 or self.batch_size < 1 or self.eval_every < 1 or self.block_size < 1:
            raise ConfigError("total_steps >= 0, batch_size, eval_every, block_size >= 1 required")
        if self.subspace.base_interval < 1 or self.subspace.window < 1:
            raise ConfigError("base_interval and window must be positive")
        if self.subspace.threshold < 0:
            raise ConfigError("threshold must be non-negative (values above 1 disable doubling)")
        if self.data.kind not in ("synthetic", "text"):
            raise ConfigError(f"unknown data kind {self.data.kind!r}")
        if self.data.kind == "text" and not self.data.path:
            raise ConfigError("text data needs a path")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def normalized(self) -> "RunConfig":
        """Apply method constraints: baselines carry no quantization."""
        cfg = self
        if cfg.state_bits is None:
            cfg = dataclasses.replace(cfg, state_bits=8 if cfg.method is Method.QGALORE else 32)
        if cfg.method is Method.GALORE:
            cfg = dataclasses.replace(
                cfg,
                weight_bits=max(cfg.weight_bits, 16),
                subspace=dataclasses.replace(
                    cfg.subspace, proj_bits=max(cfg.subspace.proj_bits, 16), adaptive=False
                ),
            )
        elif cfg.method is Method.FULL_ADAM:
            cfg = dataclasses.replace(cfg, weight_bits=max(cfg.weight_bits, 16))
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return json.loads(json.dumps(d, default=lambda o: o.value if isinstance(o, enum.Enum) else str(o)))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        model = dict(d.pop("model", {}))
        if "hidden" in model:
            model["hidden"] = tuple(model["hidden"])
        try:
            return cls(
                model=ModelConfig(**model),
                optimizer=AdamConfig(**d.pop("optimizer", {})),
                subspace=SubspaceConfig(**d.pop("subspace", {})),
                data=DataConfig(**d.pop("data", {})),
                **d,
            )
        except TypeError as e:
            raise ConfigError(str(e)) from e


@dataclass
class MetricsRecord:
    step: int
    train_loss: float | None
    val_loss: float
    lr: float
    svd_calls_total: int
    per_layer: list[dict]
    wallclock_ms: float
    estimated_memory_bytes: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    def deterministic_view(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("wallclock_ms")
        return d


def _blocks(numel: int, block: int) -> int:
    return -(-numel // block)


def estimate_memory(model: ModelConfig, run: RunConfig) -> dict[str, int]:
    """Analytic byte counts for weights, optimizer states, projections and metadata.

    Bits of 16/32 are counted at their nominal width even though arithmetic
    runs in float32. Metadata is two float32 per quantization block.
    """
    run = run.normalized()
    bs = run.block_size
    sub = run.subspace
    wbits, sbits, pbits = run.weight_bits, run.state_bits, sub.proj_bits
    out = dict(weights=0, other_params=0, optimizer_states=0, projections=0, quant_metadata=0)

    def states(numel: int) -> None:
        out["optimizer_states"] += 2 * numel * sbits // 8
        if sbits == 8:
            out["quant_metadata"] += 2 * _blocks(numel, bs) * 8

    for name, shape in model.matrix_shapes().items():
        numel = shape[0] * shape[1]
        out["weights"] += numel * wbits // 8
        if wbits == 8:
            out["quant_metadata"] += _blocks(numel, bs) * 8
        if run.method is Method.FULL_ADAM or name in sub.full_rank_layers:
            states(numel)
            continue
        r = min(sub.rank or default_rank(shape), *shape)
        states(r * max(shape))
        proj_numel = min(shape) * r
        out["projections"] += proj_numel * pbits // 8
        if pbits < 16:
            out["quant_metadata"] += _blocks(proj_numel, bs) * 8
    for shape in model.vector_shapes().values():
        numel = math.prod(shape)
        out["other_params"] += numel * 4
        states(numel)
    out["total"] = out["weights"] + out["other_params"] + out["optimizer_states"] + out["projections"]
    out["total_with_metadata"] = out["total"] + out["quant_metadata"]
    return out


def load_data(cfg: RunConfig) -> TextData | RegressionData:
    if cfg.data.kind == "text":
        return ingest_text(cfg.data.path)
    d = cfg.data
    return ingest_synthetic(d.n_features, d.n_outputs, d.noise, cfg.seed, d.n_val)


def _model_config(cfg: RunConfig, data) -> ModelConfig:
    if isinstance(data, TextData):
        return dataclasses.replace(
            cfg.model, architecture=Architecture.TINY_CHAR_LM, vocab_size=data.vocab_size
        )
    return dataclasses.replace(
        cfg.model,
        architecture=Architecture.MLP_REGRESSOR,
        n_features=data.n_features,
        n_outputs=data.n_outputs,
    )


class Trainer:
    """Owns the model and all optimizer state for one run."""

    def __init__(self, cfg: RunConfig, data=None):
        self.cfg = cfg.normalized()
        self.data = data if data is not None else load_data(self.cfg)
        self.model_cfg = _model_config(self.cfg, self.data)
        cfg = self.cfg
        self.weight_spec = QuantSpec(_qbits(cfg.weight_bits), cfg.block_size)
        self.model = build_model(self.model_cfg, self.weight_spec.bits, cfg.block_size)
        self.matrix_names = list(self.model.layers)
        state_bits = _qbits(cfg.state_bits)
        self.adam: dict[str, AdamState] = {}
        for name in self.matrix_names:
            self.adam[f"{name}.weight"] = AdamState(state_bits, cfg.block_size)
        for name in self.model.vectors():
            self.adam[name] = AdamState(state_bits, cfg.block_size)
        self.proj: dict[str, ProjectionState] = {}
        if cfg.method is not Method.FULL_ADAM:
            sub = cfg.subspace
            for name in self.matrix_names:
                if name in sub.full_rank_layers:
                    continue
                shape = self.model.layers[name].shape
                self.proj[name] = ProjectionState(
                    rank=min(sub.rank or default_rank(shape), *shape),
                    base_interval=sub.base_interval,
                    window=sub.window,
                    threshold=sub.threshold,
                    proj_bits=_qbits(sub.proj_bits),
                    block_size=cfg.block_size,
                    adaptive=sub.adaptive,
                    interval_cap=sub.interval_cap,
                    similarity=sub.similarity,
                )
        self.memory = estimate_memory(self.model_cfg, cfg)
        self.step = 0
        self.loss_sum = 0.0
        self.loss_count = 0
        self.records: list[MetricsRecord] = []
        self._t0 = time.perf_counter()
        self._val = None

    # -- evaluation and metrics -------------------------------------------

    def _context(self) -> int | None:
        return self.model_cfg.context if isinstance(self.data, TextData) else None

    def evaluate(self) -> float:
        if self._val is None:
            self._val = self.data.val_batch(self._context())
        return self.model.loss(self._val)

    def svd_calls_total(self) -> int:
        return sum(p.svd_count for p in self.proj.values())

    def make_record(self, lr: float) -> MetricsRecord:
        train_loss = self.loss_sum / self.loss_count if self.loss_count else None
        self.loss_sum, self.loss_count = 0.0, 0
        per_layer = [
            {
                "layer_id": name,
                "interval": p.interval,
                "last_similarity": p.last_similarity,
                "svd_count": p.svd_count,
            }
            for name, p in self.proj.items()
        ]
        return MetricsRecord(
            step=self.step,
            train_loss=train_loss,
            val_loss=self.evaluate(),
            lr=lr,
            svd_calls_total=self.svd_calls_total(),
            per_layer=per_layer,
            wallclock_ms=(time.perf_counter() - self._t0) * 1e3,
            estimated_memory_bytes=self.memory["total_with_metadata"],
        )

    # -- one optimization step ---------------------------------------------

    def train_step(self) -> float:
        cfg = self.cfg
        step = self.step + 1
        lr = lr_schedule(step, cfg.total_steps, cfg.optimizer)
        batch = self.data.train_batch(cfg.seed, step, cfg.batch_size, self._context())
        use_sr = cfg.rounding is Rounding.STOCHASTIC and not self.weight_spec.passthrough
        layers = self.model.layers
        vectors = self.model.vectors()

        def update(name: str, grad: np.ndarray) -> None:
            if name.endswith(".weight"):
                layer_name = name[: -len(".weight")]
                W_q = layers[layer_name].W_q
                rng = substream(cfg.seed, _SR_KEY, self.matrix_names.index(layer_name), step) if use_sr else None
                if layer_name not in self.proj:
                    full_rank_step(W_q, grad, self.adam[name], cfg.optimizer, rng, lr, cfg.rounding)
                else:
                    layer_step(
                        W_q, grad, self.proj[layer_name], self.adam[name], cfg.optimizer, step, rng,
                        lr=lr, rounding=cfg.rounding,
                        reset_moments_on_update=cfg.subspace.reset_moments_on_update,
                    )
            else:
                dense_param_step(vectors[name], grad, self.adam[name], cfg.optimizer, lr)

        loss = self.model.forward_backward(batch, update)
        self.step = step
        self.loss_sum += loss
        self.loss_count += 1
        return lr

    # -- checkpointing -------------------------------------------------------

    def state_tensors(self) -> dict:
        tensors: dict[str, Any] = {}
        for name, layer in self.model.layers.items():
            tensors[f"{name}.weight"] = layer.W_q
        for name, arr in self.model.vectors().items():
            tensors[name] = arr
        for name, st in self.adam.items():
            if st.m_q is not None:
                tensors[f"adam/{name}/m"] = st.m_q
                tensors[f"adam/{name}/v"] = st.v_q
        for name, p in self.proj.items():
            if p.initialized:
                tensors[f"proj/{name}/P"] = p.P_q
                tensors[f"proj/{name}/P_prev"] = p.P_prev_dense
        return tensors

    def meta(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "step": self.step,
            "loss_sum": self.loss_sum,
            "loss_count": self.loss_count,
            "adam_steps": {k: s.step_count for k, s in self.adam.items()},
            "proj": {
                k: {
                    "interval": p.interval,
                    "history": list(p.history),
                    "svd_count": p.svd_count,
                    "last_update_step": p.last_update_step,
                    "last_similarity": p.last_similarity,
                    "side": p.side.value if p.side else None,
                }
                for k, p in self.proj.items()
            },
        }

    def save(self, path) -> None:
        write_checkpoint(path, self.state_tensors(), self.meta())

    def load(self, path) -> None:
        tensors, meta = read_checkpoint(path)
        if not meta:
            raise CheckpointError(f"{path} carries no run metadata")
        if RunConfig.from_dict(meta["config"]).normalized() != self.cfg:
            raise CheckpointError("checkpoint was written by a different run configuration")

        def as_qt(t, spec: QuantSpec) -> QuantizedTensor:
            if isinstance(t, QuantizedTensor):
                return QuantizedTensor(t.payload, t.scales, t.zeros, t.shape, spec)
            arr = np.asarray(t, np.float32)
            return QuantizedTensor(arr.reshape(-1).copy(), np.zeros(0, np.float32),
                                   np.zeros(0, np.float32), arr.shape, spec)

        try:
            for name, layer in self.model.layers.items():
                layer.W_q = as_qt(tensors[f"{name}.weight"], self.weight_spec)
            for name, arr in self.model.vectors().items():
                arr[...] = tensors[name]
            for name, st in self.adam.items():
                st.step_count = int(meta["adam_steps"][name])
                if f"adam/{name}/m" in tensors:
                    st.m_q = as_qt(tensors[f"adam/{name}/m"], st.spec)
                    st.v_q = as_qt(tensors[f"adam/{name}/v"], st.spec)
                else:
                    st.m_q = st.v_q = None
            for name, p in self.proj.items():
                pm = meta["proj"][name]
                p.interval = int(pm["interval"])
                p.history.clear()
                p.history.extend(pm["history"])
                p.svd_count = int(pm["svd_count"])
                p.last_update_step = int(pm["last_update_step"])
                p.last_similarity = pm["last_similarity"]
                if f"proj/{name}/P" in tensors:
                    p.P_q = as_qt(tensors[f"proj/{name}/P"], p.quant_spec)
                    p._P = dequantize(p.P_q)
                    p.P_prev_dense = np.asarray(tensors[f"proj/{name}/P_prev"], np.float32)
                    p.side = Side(pm["side"])
        except KeyError as e:
            raise CheckpointError(f"checkpoint is missing {e}") from e
        self.step = int(meta["step"])
        self.loss_sum = float(meta["loss_sum"])
        self.loss_count = int(meta["loss_count"])


@dataclass
class TrainResult:
    records: list[MetricsRecord]
    trainer: Trainer

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]


def _format_path(path, step: int) -> str:
    return str(path).format(step=step)


def run_training(
    cfg: RunConfig,
    metrics_out=None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
    resume_from=None,
    data=None,
) -> TrainResult:
    """Train ``cfg`` to completion; records are emitted at step 0, every
    ``eval_every`` steps and at the last step.

    ``checkpoint_path`` may contain ``{step}``; a checkpoint is written every
    ``checkpoint_every`` steps (if non-zero) and at the end.
    """
    trainer = Trainer(cfg, data)
    cfg = trainer.cfg
    if resume_from is not None:
        trainer.load(resume_from)
    sink = open(metrics_out, "a" if resume_from is not None else "w") if metrics_out else None

    def emit(lr: float) -> MetricsRecord:
        rec = trainer.make_record(lr)
        trainer.records.append(rec)
        if sink:
            sink.write(rec.to_json() + "\n")
            sink.flush()
        return rec

    try:
        if trainer.step == 0:
            emit(lr_schedule(0, cfg.total_steps, cfg.optimizer))
        while trainer.step < cfg.total_steps:
            try:
                lr = trainer.train_step()
            except (NonFiniteLossError, QuantizationError) as e:
                rec = MetricsRecord(
                    step=trainer.step + 1, train_loss=math.nan, val_loss=math.nan, lr=math.nan,
                    svd_calls_total=trainer.svd_calls_total(),
                    per_layer=[{"layer_id": k, "weight_norm": v} for k, v in trainer.model.layer_norms().items()],
                    wallclock_ms=(time.perf_counter() - trainer._t0) * 1e3,
                    estimated_memory_bytes=trainer.memory["total_with_metadata"],
                )
                if sink:
                    sink.write(rec.to_json() + "\n")
                raise DivergenceError(f"diverged at step {trainer.step + 1}: {e}", rec) from e
            if trainer.step % cfg.eval_every == 0 or trainer.step == cfg.total_steps:
                emit(lr)
            if checkpoint_path and checkpoint_every and trainer.step % checkpoint_every == 0:
                trainer.save(_format_path(checkpoint_path, trainer.step))
        if checkpoint_path:
            trainer.save(_format_path(checkpoint_path, trainer.step))
    finally:
        if sink:
            sink.close()
    return TrainResult(trainer.records, trainer)
