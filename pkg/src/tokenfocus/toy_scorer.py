"""A miniature differentiable first-token scorer.

tokens -> embedding rows -> single-query attention pooling -> tanh layer ->
vocabulary logits. Gradients are derived by hand (no autodiff), so that the
token-focus loss chain from :mod:`tokenfocus.score_core` can be trained end
to end with AdamW, a warmup + cosine schedule and two learning-rate groups.

Checkpoint byte layout (all integers little-endian)::

    offset 0   8 bytes   magic b"TFTOYCK1"
    offset 8   8 bytes   uint64 header length N
    offset 16  N bytes   UTF-8 JSON header (sorted keys): dims, config,
                         score space, and "tensors": [[name, shape], ...]
    offset 16+N          float64 little-endian values of each tensor in the
                         header's order, row-major (C order), no padding
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError, NumericError
from .score_core import (
    ProjectionMode,
    ScoreSpace,
    TokenDistribution,
    cross_entropy_grad,
    predict_from_logits,
    tokenfocus_loss,
    tokenfocus_loss_grad,
)

BASE_TENSORS = ("embedding", "query", "W1", "b1", "W2", "b2")
ENCODER_GROUP = ("embedding", "query")
ADAPTABLE = ("W1", "W2")
INIT_SCALE = 0.08
CHECKPOINT_MAGIC = b"TFTOYCK1"


@dataclass
class ToyModelParams:
    vocab_size: int
    embed_dim: int
    hidden_dim: int
    embedding: np.ndarray
    query: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        V, d, h = self.vocab_size, self.embed_dim, self.hidden_dim
        if min(V, d, h) < 1:
            raise InputError("model dimensions must be positive")
        shapes = self.shapes()
        for name in BASE_TENSORS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shapes[name]:
                raise InputError(f"{name} has shape {arr.shape}, expected {shapes[name]}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"{name} contains non-finite values")
            setattr(self, name, arr)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        V, d, h = self.vocab_size, self.embed_dim, self.hidden_dim
        return {"embedding": (V, d), "query": (d,), "W1": (d, h), "b1": (h,),
                "W2": (h, V), "b2": (V,)}

    @classmethod
    def init(cls, vocab_size, embed_dim, hidden_dim, seed) -> "ToyModelParams":
        rng = np.random.default_rng(seed)
        shapes = {"embedding": (vocab_size, embed_dim), "query": (embed_dim,),
                  "W1": (embed_dim, hidden_dim), "b1": (hidden_dim,),
                  "W2": (hidden_dim, vocab_size), "b2": (vocab_size,)}
        arrays = {n: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shapes[n])
                  for n in BASE_TENSORS}
        return cls(vocab_size, embed_dim, hidden_dim, **arrays)

    @classmethod
    def zeros(cls, vocab_size, embed_dim, hidden_dim) -> "ToyModelParams":
        p = cls.init(vocab_size, embed_dim, hidden_dim, 0)
        for n in BASE_TENSORS:
            getattr(p, n)[...] = 0.0
        return p

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in BASE_TENSORS}

    def copy(self) -> "ToyModelParams":
        return replace(self, **{n: getattr(self, n).copy() for n in BASE_TENSORS})


@dataclass
class LowRankAdapter:
    """Additive weight delta ``(alpha / rank) * B @ A`` with A (r x n), B (m x r)."""

    A: np.ndarray
    B: np.ndarray
    alpha: float

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.A.ndim != 2 or self.B.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise InputError(f"incompatible adapter shapes A{self.A.shape} B{self.B.shape}")
        m, n = self.B.shape[0], self.A.shape[1]
        if self.rank < 1 or self.rank > min(m, n):
            raise InputError(f"rank {self.rank} outside [1, {min(m, n)}]")
        if not self.alpha > 0:
            raise InputError("alpha must be positive")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B @ self.A)

    @classmethod
    def init(cls, shape, rank, alpha, seed) -> "LowRankAdapter":
        """Random A, zero B: the adapter starts as an exact no-op."""
        m, n = shape
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-INIT_SCALE, INIT_SCALE, size=(rank, n)),
                   np.zeros((m, rank)), alpha)

    def copy(self) -> "LowRankAdapter":
        return LowRankAdapter(self.A.copy(), self.B.copy(), self.alpha)


def apply_adapter(W, adapter: LowRankAdapter) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    expected = (adapter.B.shape[0], adapter.A.shape[1])
    if W.shape != expected:
        raise InputError(f"weight shape {W.shape} does not match adapter {expected}")
    return W + adapter.delta()


@dataclass
class ToyModel:
    params: ToyModelParams
    adapters: dict[str, LowRankAdapter] = field(default_factory=dict)

    def __post_init__(self):
        for name, ad in self.adapters.items():
            if name not in ADAPTABLE:
                raise InputError(f"adapters may target {ADAPTABLE}, not {name!r}")
            apply_adapter(getattr(self.params, name), ad)

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.params.tensors())
        for name in sorted(self.adapters):
            out[f"{name}.A"] = self.adapters[name].A
            out[f"{name}.B"] = self.adapters[name].B
        return out

    def copy(self) -> "ToyModel":
        return ToyModel(self.params.copy(), {k: a.copy() for k, a in self.adapters.items()})

    def effective(self, name: str) -> np.ndarray:
        W = getattr(self.params, name)
        ad = self.adapters.get(name)
        return W if ad is None else apply_adapter(W, ad)

    def merged(self) -> ToyModelParams:
        """Base parameters with every adapter folded into its weight."""
        p = self.params.copy()
        for name in self.adapters:
            setattr(p, name, self.effective(name))
        return p


def _as_model(model, adapters=None) -> ToyModel:
    if isinstance(model, ToyModel):
        if adapters:
            raise InputError("pass adapters either on the model or separately, not both")
        return model
    return ToyModel(model, dict(adapters or {}))


def _check_tokens(tokens, vocab_size) -> np.ndarray:
    t = np.asarray(tokens)
    if t.ndim != 1 or t.size == 0:
        raise InputError("token sequence must be a non-empty 1-d sequence")
    if not np.issubdtype(t.dtype, np.integer):
        raise InputError("tokens must be integer vocabulary indices")
    if t.min() < 0 or t.max() >= vocab_size:
        raise InputError(f"token index out of range for vocab of {vocab_size}")
    return t.astype(np.int64)


def _forward(model: ToyModel, tokens: np.ndarray):
    p = model.params
    W1 = model.effective("W1")
    W2 = model.effective("W2")
    X = p.embedding[tokens]
    a = X @ p.query
    alpha = np.exp(a - a.max())
    alpha /= alpha.sum()
    h = alpha @ X
    u = np.tanh(h @ W1 + p.b1)
    z = u @ W2 + p.b2
    return z, (tokens, X, alpha, h, u, W1, W2)


def forward(model, adapters=None, tokens=None) -> TokenDistribution:
    """Logits for the first generated token.

    ``model`` is a :class:`ToyModel` or bare :class:`ToyModelParams` (then
    ``adapters`` maps weight names to :class:`LowRankAdapter`).
    """
    m = _as_model(model, adapters)
    t = _check_tokens(tokens, m.params.vocab_size)
    z, _ = _forward(m, t)
    return TokenDistribution(m.params.vocab_size, logits=z)


def _backward(model: ToyModel, cache, dz, grads, freeze_base):
    tokens, X, alpha, h, u, W1, W2 = cache
    p = model.params
    dW2 = np.outer(u, dz)
    du = W2 @ dz
    dpre = du * (1.0 - u * u)
    dW1 = np.outer(h, dpre)
    dh = W1 @ dpre
    dalpha = X @ dh
    da = alpha * (dalpha - alpha @ dalpha)
    dX = np.outer(alpha, dh) + np.outer(da, p.query)
    for name, dW in (("W1", dW1), ("W2", dW2)):
        ad = model.adapters.get(name)
        if ad is not None:
            grads[f"{name}.B"] += ad.scaling * (dW @ ad.A.T)
            grads[f"{name}.A"] += ad.scaling * (ad.B.T @ dW)
        if not freeze_base:
            grads[name] += dW
    if not freeze_base:
        grads["b2"] += dz
        grads["b1"] += dpre
        grads["query"] += X.T @ da
        np.add.at(grads["embedding"], tokens, dX)


def loss_and_grads(model, batch, space: ScoreSpace, mode=ProjectionMode.LITERAL,
                   objective="tokenfocus", freeze_base=False):
    """Mean loss over ``batch`` of (tokens, target) pairs and its gradient per tensor."""
    m = _as_model(model)
    mode = ProjectionMode.parse(mode)
    grads = {n: np.zeros_like(a) for n, a in m.tensors().items()}
    total = 0.0
    for tokens, target in batch:
        t = _check_tokens(tokens, m.params.vocab_size)
        z, cache = _forward(m, t)
        if objective == "tokenfocus":
            y_hat = predict_from_logits(z, space, mode)
            total += tokenfocus_loss(y_hat, float(target))
            dz = tokenfocus_loss_grad(TokenDistribution(z.size, logits=z), space, mode,
                                      float(target))
        elif objective == "cross_entropy":
            loss, dz = cross_entropy_grad(z, space, float(target))
            total += loss
        else:
            raise InputError(f"unknown objective {objective!r}")
        _backward(m, cache, dz, grads, freeze_base)
    n = len(batch)
    for g in grads.values():
        g /= n
    if freeze_base:
        for name in BASE_TENSORS:
            grads.pop(name)
    return total / n, grads


def predict(model, tokens, space: ScoreSpace, mode=ProjectionMode.LITERAL) -> float:
    m = _as_model(model)
    z, _ = _forward(m, _check_tokens(tokens, m.params.vocab_size))
    return predict_from_logits(z, space, mode)


def predict_many(model, token_lists, space, mode=ProjectionMode.LITERAL) -> np.ndarray:
    return np.array([predict(model, t, space, mode) for t in token_lists])


def mean_loss(model, samples, space, mode=ProjectionMode.LITERAL) -> float:
    preds = predict_many(model, [t for t, _ in samples], space, mode)
    targets = np.array([y for _, y in samples], dtype=np.float64)
    return float(np.mean((preds - targets) ** 2))


# ---------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class TrainingConfig:
    """Optimiser and schedule settings; defaults are the full-scale LVLM recipe."""

    base_lr: float = 1e-4
    encoder_lr: float = 1e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    batch_size: int = 64
    warmup_steps: int = 200
    total_steps: int | None = None
    epochs: int = 3
    seed: int = 1234
    projection_mode: ProjectionMode = ProjectionMode.LITERAL
    objective: str = "tokenfocus"
    freeze_base: bool = False

    def __post_init__(self):
        object.__setattr__(self, "projection_mode", ProjectionMode.parse(self.projection_mode))
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InputError("betas must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise InputError("batch_size and epochs must be positive")
        if self.warmup_steps < 0:
            raise InputError("warmup_steps must be non-negative")
        if min(self.base_lr, self.encoder_lr, self.weight_decay) < 0:
            raise InputError("learning rates and weight decay must be non-negative")
        if self.total_steps is not None:
            if self.total_steps < 1:
                raise InputError("total_steps must be positive")
            if self.warmup_steps > self.total_steps:
                raise InputError("warmup_steps exceeds total_steps")
        if self.objective not in ("tokenfocus", "cross_entropy"):
            raise InputError(f"unknown objective {self.objective!r}")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainingConfig":
        """Settings for the miniature runs.

        AdamW betas, weight decay, seed, epoch count and the 10:1 head/encoder
        learning-rate ratio follow the full recipe; step size, batch and warmup
        are scaled to a few hundred optimiser steps.
        """
        base = dict(base_lr=2e-2, encoder_lr=2e-3, batch_size=16, warmup_steps=30)
        base.update(overrides)
        return cls(**base)

    def resolve(self, n_samples: int) -> "TrainingConfig":
        """Fill ``total_steps`` from epochs x ceil(n / batch_size) when unset."""
        if self.total_steps is not None:
            return self
        steps = self.epochs * math.ceil(n_samples / self.batch_size)
        if self.warmup_steps > steps:
            raise InputError(f"warmup_steps {self.warmup_steps} exceeds the {steps} training steps")
        return replace(self, total_steps=steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["projection_mode"] = self.projection_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        return cls(**d)


def cosine_lr(step: int, group_base: float, cfg: TrainingConfig) -> float:
    """Linear warmup from ``(step+1)/warmup`` then half-cosine decay to 0 at ``total_steps``."""
    total = cfg.total_steps
    if total is None:
        raise InputError("cosine_lr needs a resolved total_steps")
    if not (0 <= step <= total):
        raise InputError(f"step {step} outside [0, {total}]")
    warm = cfg.warmup_steps
    if step < warm:
        return group_base * (step + 1) / warm
    span = total - warm
    if span == 0:
        return 0.0
    return group_base * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({n: np.zeros_like(a) for n, a in params.items()},
                   {n: np.zeros_like(a) for n, a in params.items()}, 0)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, lr, cfg: TrainingConfig):
    """One bias-corrected AdamW update with decoupled weight decay.

    ``lr`` is a float or a per-tensor mapping. Tensors without a gradient
    entry are left untouched. Returns new ``(params, state)``; inputs are not
    mutated.
    """
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    new_params = {}
    new_m, new_v = dict(state.m), dict(state.v)
    for name, p in params.items():
        if name not in grads:
            new_params[name] = p
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise InputError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        step_lr = lr[name] if isinstance(lr, dict) else lr
        if step_lr < 0:
            raise InputError("learning rate must be non-negative")
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        decayed = p - step_lr * cfg.weight_decay * p
        new_params[name] = decayed - step_lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        new_m[name], new_v[name] = m, v
    return new_params, OptimizerState(new_m, new_v, t)


def _set_tensors(model: ToyModel, tensors: dict[str, np.ndarray]) -> None:
    for name, arr in tensors.items():
        if "." in name:
            base, part = name.split(".")
            setattr(model.adapters[base], part, arr)
        else:
            setattr(model.params, name, arr)


@dataclass
class TrainResult:
    model: ToyModel
    losses: list[float]
    head_lrs: list[float]
    encoder_lrs: list[float]
    epochs: list[int]
    config: TrainingConfig


def train(model, dataset: Sequence, space: ScoreSpace, cfg: TrainingConfig) -> TrainResult:
    """Minibatch AdamW on (tokens, target) pairs; returns the trained copy and per-step logs.

    The logged loss of a step is the batch mean before that step's update.
    """
    if not dataset:
        raise InputError("training set is empty")
    for _, y in dataset:
        if not (space.low <= y <= space.high):
            raise InputError(f"target {y} outside score range [{space.low}, {space.high}]")
    cfg = cfg.resolve(len(dataset))
    m = _as_model(model).copy()
    mode = cfg.projection_mode
    trainable = {n: a for n, a in m.tensors().items()
                 if not (cfg.freeze_base and n in BASE_TENSORS)}
    state = OptimizerState.fresh(trainable)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(m, [], [], [], [], cfg)
    step = 0
    n = len(dataset)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            if step >= cfg.total_steps:
                break
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            loss, grads = loss_and_grads(m, batch, space, mode, cfg.objective, cfg.freeze_base)
            head_lr = cosine_lr(step, cfg.base_lr, cfg)
            enc_lr = cosine_lr(step, cfg.encoder_lr, cfg)
            lrs = {k: (enc_lr if k in ENCODER_GROUP else head_lr) for k in grads}
            current = {k: a for k, a in m.tensors().items() if k in grads}
            updated, state = adamw_step(current, grads, state, lrs, cfg)
            _set_tensors(m, updated)
            result.losses.append(loss)
            result.head_lrs.append(head_lr)
            result.encoder_lrs.append(enc_lr)
            result.epochs.append(epoch)
            step += 1
    return result


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: ToyModel, header: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, header))


def checkpoint_bytes(model: ToyModel, header: dict | None = None) -> bytes:
    m = _as_model(model)
    tensors = m.tensors()
    meta = dict(header or {})
    meta.update({
        "vocab_size": m.params.vocab_size,
        "embed_dim": m.params.embed_dim,
        "hidden_dim": m.params.hidden_dim,
        "adapters": {k: {"rank": a.rank, "alpha": a.alpha} for k, a in sorted(m.adapters.items())},
        "tensors": [[n, list(a.shape)] for n, a in tensors.items()],
    })
    head = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in tensors.values())
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + blob


def load_checkpoint(path) -> tuple[ToyModel, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a toy-scorer checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    meta = json.loads(data[16:16 + n].decode("utf-8"))
    offset = 16 + n
    arrays = {}
    for name, shape in meta["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count,
                                     offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise InputError(f"{path}: trailing or missing parameter bytes")
    params = ToyModelParams(meta["vocab_size"], meta["embed_dim"], meta["hidden_dim"],
                            **{k: arrays[k] for k in BASE_TENSORS})
    adapters = {k: LowRankAdapter(arrays[f"{k}.A"], arrays[f"{k}.B"], v["alpha"])
                for k, v in meta["adapters"].items()}
    return ToyModel(params, adapters), meta
