"""Soft-voting fusion: combine members' per-class probabilities by sum or mean.

Note that argmax of the two modes is identical (mean = sum / n), so they can
only differ in reported scores, never in predictions.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import FedFusionError, ShapeError


class FusionMode(Enum):
    Sum = "sum"
    Average = "average"


def _combine(vectors, mode: FusionMode):
    stacked = np.stack([np.asarray(v, dtype=np.float64) for v in vectors])
    return stacked.sum(axis=0) if mode is FusionMode.Sum else stacked.mean(axis=0)


def fuse(probability_vectors, mode: FusionMode) -> np.ndarray:
    """Elementwise sum (unnormalized scores) or mean (a probability vector)."""
    if len(probability_vectors) == 0:
        raise ShapeError("fuse needs at least one probability vector")
    lengths = {np.asarray(v).shape[-1] for v in probability_vectors}
    if len(lengths) != 1:
        raise ShapeError(f"mismatched class counts among members: {sorted(lengths)}")
    for i, v in enumerate(probability_vectors):
        s = float(np.asarray(v, dtype=np.float64).sum(axis=-1).max())
        lo = float(np.asarray(v, dtype=np.float64).sum(axis=-1).min())
        if abs(s - 1.0) > 1e-6 or abs(lo - 1.0) > 1e-6:
            raise ShapeError(f"member {i} scores do not sum to 1 (got {s})")
    return _combine(probability_vectors, mode)


@dataclass
class EnsembleModel:
    """Ordered members plus their instantiated models, fused by one mode."""

    members: list  # [(ArchitectureId, ModelArtifact)]
    mode: FusionMode
    models: list = None  # parallel list of Model instances

    def __post_init__(self):
        if len(self.members) < 2:
            raise FedFusionError(f"ensemble needs at least 2 members, got {len(self.members)}")
        if self.models is not None:
            classes = {m.num_classes for m in self.models}
            if len(classes) != 1:
                raise FedFusionError(f"members disagree on num_classes: {sorted(classes)}")


def ensemble_from_artifacts(artifacts, mode: FusionMode) -> EnsembleModel:
    from .wire import model_from_artifact  # deferred: wire depends on models

    models = [model_from_artifact(a) for a in artifacts]
    return EnsembleModel([(a.arch, a) for a in artifacts], mode, models)


def ensemble_scores(ensemble: EnsembleModel, images, use_logits=False) -> np.ndarray:
    """Fused score matrix [n, k] for a batch of images."""
    if use_logits:
        per_member = [m.predict_logits(images) for m in ensemble.models]
        return _combine(per_member, ensemble.mode)
    per_member = [m.predict_proba(images) for m in ensemble.models]
    return _combine(per_member, ensemble.mode)


def ensemble_predict(ensemble: EnsembleModel, image, use_logits=False):
    """Run every member on one image, fuse, argmax (ties -> lowest class index)."""
    image = np.asarray(image, dtype=np.float64)
    scores = []
    for (arch, _), model in zip(ensemble.members, ensemble.models):
        try:
            if use_logits:
                scores.append(model.predict_logits(image))
            else:
                scores.append(model.predict_proba(image))
        except Exception as exc:
            raise FedFusionError(f"member {arch!r} failed during inference: {exc}") from exc
    fused = _combine(scores, ensemble.mode) if use_logits else fuse(scores, ensemble.mode)
    return int(np.argmax(fused)), fused
