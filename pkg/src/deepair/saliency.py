"""Gradient-based input attribution.

The importance of an input feature is the dataset-average absolute
gradient of the model output with respect to that input. Per-pixel,
per-frame gradients are reduced to one value per channel by the mean of
absolute values over all window-by-space positions, keeping scores
comparable across channels and window lengths. Multi-output forecast
models are scalarized as the mean of their horizon outputs before
differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import ChannelSchema
from .tensor import Tape, Tensor, backward, mean_all

TABLE_FORMAT = 1


def input_gradient(model, patch_values: np.ndarray) -> np.ndarray:
    """Exact gradient of the (scalarized) output w.r.t. every input value.

    The model runs in eval mode, so batch-norm applies its running
    statistics; [W, C, N, N] in, same-shape gradient out.
    """
    x = Tensor(np.asarray(patch_values, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        out = model.forward(x, "eval")
        scalar = mean_all(out)
    backward(scalar, tape)
    if x.grad is None:
        return np.zeros_like(x.data)
    return x.grad


@dataclass
class SaliencyScores:
    scores: dict                 # channel name -> non-negative float
    groups: dict                 # channel name -> schema group
    sample_count: int
    model_ref: str = ""
    dataset_ref: str = ""

    def normalized(self) -> dict:
        peak = max(self.scores.values()) if self.scores else 0.0
        if peak <= 0.0:
            return {k: 0.0 for k in self.scores}
        return {k: v / peak for k, v in self.scores.items()}

    def grouped(self) -> dict:
        """Channel scores bucketed by schema group (bar-chart groupings)."""
        out: dict = {}
        for name, score in self.scores.items():
            out.setdefault(self.groups[name], {})[name] = score
        return out


def saliency_scores(model, patches, schema: ChannelSchema,
                    model_ref: str = "", dataset_ref: str = "") -> SaliencyScores:
    """Average absolute input gradient per channel over a sample set.

    `patches` is the training-set inputs, one [W, C, N, N] array each.
    """
    total = None
    count = 0
    for patch in patches:
        grad = input_gradient(model, patch)
        per_channel = np.abs(grad).mean(axis=(0, 2, 3))
        total = per_channel if total is None else total + per_channel
        count += 1
    if count == 0:
        raise ValueError("saliency_scores needs at least one sample")
    mean_scores = total / count
    names = schema.names()
    if len(names) != mean_scores.size:
        raise ValueError(
            f"schema has {len(names)} channels but patches have "
            f"{mean_scores.size}"
        )
    return SaliencyScores(
        scores={n: float(s) for n, s in zip(names, mean_scores)},
        groups={n: schema.group_of(n) for n in names},
        sample_count=count,
        model_ref=model_ref,
        dataset_ref=dataset_ref,
    )


def save_saliency(path, scores: SaliencyScores) -> None:
    norm = scores.normalized()
    with open(path, "w") as fh:
        fh.write(f"# table-format: {TABLE_FORMAT}\n")
        fh.write(f"# samples: {scores.sample_count}\n")
        fh.write("channel,group,score,score_normalized\n")
        for name in scores.scores:
            fh.write(f"{name},{scores.groups[name]},{scores.scores[name]!r},"
                     f"{norm[name]!r}\n")


def load_saliency(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("channel,"):
                continue
            name, group, score, norm = line.split(",")
            out[name] = {"group": group, "score": float(score),
                         "normalized": float(norm)}
    return out
