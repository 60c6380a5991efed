"""Finite-difference audit of every parameter group of a built model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import ModelConfig, build_model
from .scenes import SceneConfig, downscale_config, make_scene
from .tensor import Tensor, finite_diff_check
from .training import bce_with_logits, init_weights

MAX_SIZE = 16
TOLERANCE = 1e-4


@dataclass
class GroupResult:
    name: str
    checked: int
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def check_model(kind: str, size: int = 8, seed: int = 0, samples: int = 6,
                step: float = 1e-5, model_cfg: ModelConfig | None = None) -> list[GroupResult]:
    """Compare backprop against central differences of the training loss.

    ``samples`` random coordinates are probed per parameter tensor; the
    input is the default scene scaled down to ``size`` x ``size``.
    """
    if size > MAX_SIZE:
        raise ValueError(f"gradcheck size {size} exceeds {MAX_SIZE} (finite differences "
                         f"cost two forward passes per probed coordinate)")
    scene = make_scene(downscale_config(SceneConfig(), size))
    cfg = model_cfg or ModelConfig(kind=kind, in_channels=scene.n_fragments, image_size=size)
    model = build_model(cfg)
    init_weights(model, seed)
    rng = np.random.default_rng(seed)
    x = Tensor(scene.fragments)

    def loss():
        return bce_with_logits(model.logits(x), scene.target)

    results = []
    for p in model.parameters():
        n = min(samples, p.data.size)
        idx = rng.choice(p.data.size, size=n, replace=False)
        err = finite_diff_check(loss, p, step=step, indices=idx)
        results.append(GroupResult(p.name, n, err))
    return results


def format_table(kind: str, results: list[GroupResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{kind}:"]
    for r in results:
        flag = "ok" if r.ok else "FAIL"
        lines.append(f"  {r.name:<{width}}  n={r.checked:<3d} max_rel_err={r.max_rel_error:.3e}  {flag}")
    return "\n".join(lines)
