"""Loss, Adam, seeded initialisation and the single-trial training loop."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .metrics import f1_at_threshold
from .models import BatchNorm2d, Model, ModelConfig, build_model
from .scenes import FragmentScene
from .tensor import Parameter, Tensor

PRED_EPS = 1e-7
MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_threshold: float = 0.5
    steps_per_epoch: int = 1
    seed: int = 0

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        if not 0.0 < self.eval_threshold < 1.0:
            raise ValueError(f"eval_threshold must lie in (0, 1), got {self.eval_threshold}")


# --------------------------------------------------------------------------
# loss


def bce_loss(pred: Tensor, target, eps: float = PRED_EPS) -> Tensor:
    """Mean binary cross entropy of probabilities against a {0,1} target.

    Probabilities are clamped to [eps, 1-eps] before the log.  The clamp is
    straight-through in the backward pass, so saturated pixels still pull
    on the logits.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise T.ShapeError(f"bce_loss: pred {pred.shape} vs target {t.shape}")
    p = np.clip(pred.data, eps, 1.0 - eps)
    n = p.size
    value = -np.sum(t * np.log(p) + (1.0 - t) * np.log1p(-p)) / n

    def bw(g):
        pred._accumulate(float(g) * (p - t) / (p * (1.0 - p)) / n)

    return Tensor(value, (pred,), bw, "bce")


def bce_with_logits(z: Tensor, target, eps: float = PRED_EPS) -> Tensor:
    """bce_loss(sigmoid(z)) with the fused gradient (sigmoid(z) - t) / n."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if z.shape != t.shape:
        raise T.ShapeError(f"bce_with_logits: logits {z.shape} vs target {t.shape}")
    s = T._stable_sigmoid(z.data)
    p = np.clip(s, eps, 1.0 - eps)
    n = p.size
    value = -np.sum(t * np.log(p) + (1.0 - t) * np.log1p(-p)) / n
    return Tensor(value, (z,), lambda g: z._accumulate(float(g) * (s - t) / n), "bce_logits")


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[Parameter]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Parameter], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# --------------------------------------------------------------------------
# seeding and init


def splitmix64(x: int) -> int:
    x = (x + GOLDEN_GAMMA) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(base_seed: int, index: int) -> int:
    """Seed of trial ``index``: output ``index`` of a SplitMix64 stream started at base_seed."""
    return splitmix64((base_seed + index * GOLDEN_GAMMA) & MASK64)


def init_weights(model: Model, seed: int) -> None:
    """Fan-in uniform conv weights, zero biases, identity BN, from PCG64(seed).

    Parameters are filled in ``model.parameters()`` order so the same seed
    gives the same draws for a given architecture.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    for p in model.parameters():
        if p.name.endswith(".weight"):
            bound = 1.0 / np.sqrt(np.prod(p.shape[1:]))
            p.data[...] = rng.uniform(-bound, bound, size=p.shape)
        elif p.name.endswith(".gamma"):
            p.data[...] = 1.0
        else:
            p.data[...] = 0.0
        p.zero_grad()
    for m in model.modules():
        stats = getattr(m, "stats", None)
        if stats is not None:
            stats.mean[...] = 0.0
            stats.var[...] = 1.0


# --------------------------------------------------------------------------
# trial loop


@dataclass
class EpochSeries:
    kind: str
    seed: int
    loss: list[float] = field(default_factory=list)
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)
    f1: list[float] = field(default_factory=list)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    diverged_epoch: int | None = None
    wall_time: float = 0.0

    def __len__(self):
        return len(self.f1)

    @property
    def diverged(self) -> bool:
        return self.diverged_epoch is not None


SERIES_COLUMNS = ("trial_seed", "model_kind", "epoch", "loss", "precision", "recall", "f1")


def fmt(x: float) -> str:
    return f"{x:.6f}"


def series_to_csv(series: EpochSeries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SERIES_COLUMNS)
    for e in range(len(series)):
        w.writerow([series.seed, series.kind, e + 1, fmt(series.loss[e]),
                    fmt(series.precision[e]), fmt(series.recall[e]), fmt(series.f1[e])])
    return buf.getvalue()


def train_one_trial(kind: str, scene: FragmentScene, cfg: TrainConfig,
                    model_cfg: ModelConfig | None = None,
                    snapshot_epochs=(), model: Model | None = None) -> EpochSeries:
    """Fit one freshly initialised model to the scene.

    Each epoch runs ``steps_per_epoch`` forward/BCE/backward/Adam steps on
    the full image, then scores the updated model on the same target.
    BCE is taken on the logits (fused with the sigmoid head) so the
    gradient does not vanish once the sigmoid saturates.
    A non-finite loss stops the trial and records the epoch.
    """
    cfg.validate()
    if model is None:
        if model_cfg is None:
            model_cfg = ModelConfig(kind=kind, in_channels=scene.n_fragments,
                                    image_size=scene.config.size)
        model = build_model(model_cfg)
        init_weights(model, cfg.seed)
    series = EpochSeries(kind=model.kind, seed=cfg.seed)
    x = Tensor(scene.fragments)
    target = scene.target
    params = model.parameters()
    state = AdamState.for_params(params)
    wanted = set(snapshot_epochs)
    # without batch-norm the post-step evaluation forward is also the next
    # epoch's training forward, so it is computed once and reused
    has_bn = any(isinstance(m, BatchNorm2d) for m in model.modules())
    reuse = cfg.steps_per_epoch == 1 and not has_bn
    logits = None
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        for _ in range(cfg.steps_per_epoch):
            model.zero_grad()
            if logits is None:
                logits = model.logits(x)
            loss = bce_with_logits(logits, target)
            logits = None
            lval = loss.item()
            if not np.isfinite(lval):
                series.diverged_epoch = epoch
                break
            loss.backward()
            adam_step(params, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
        if series.diverged:
            break
        if reuse and epoch < cfg.epochs:
            logits = model.logits(x)
            scores = T._stable_sigmoid(logits.data)
        else:
            model.eval()
            with T.no_grad():
                scores = model(x).data
        if not np.all(np.isfinite(scores)):
            series.diverged_epoch = epoch
            break
        p, r, f = f1_at_threshold(scores, target, cfg.eval_threshold)
        series.loss.append(lval)
        series.precision.append(p)
        series.recall.append(r)
        series.f1.append(f)
        if epoch in wanted:
            series.snapshots[epoch] = scores[0].copy()
    series.wall_time = time.perf_counter() - t0
    return series

