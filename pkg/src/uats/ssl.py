"""Temporal ensemble of predictions, pseudo labels and confidence masks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .unet import UNet, mc_forward, predict_batched


@dataclass
class EnsembleBuffer:
    """Moving average ``E`` of probability maps for every training sample.

    ``E`` has shape (N, C, H, W).  ``best_val`` holds the best per-class
    validation loss seen so far; ``enabled`` marks the classes updated in the
    current epoch.
    """
    E: np.ndarray
    alpha: float
    best_val: np.ndarray
    ids: list = field(default_factory=list)
    enabled: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        self.best_val = np.asarray(self.best_val, dtype=np.float64)
        if self.enabled is None:
            self.enabled = np.zeros(self.E.shape[1], dtype=bool)

    @property
    def num_classes(self) -> int:
        return self.E.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"ensemble/E": self.E, "ensemble/best_val": self.best_val,
                "ensemble/enabled": self.enabled.astype(np.float64)}

    @classmethod
    def from_arrays(cls, arrays, alpha, ids):
        return cls(np.array(arrays["ensemble/E"]), alpha, np.array(arrays["ensemble/best_val"]),
                   list(ids), np.array(arrays["ensemble/enabled"]).astype(bool))


def init_ensemble(model: UNet, images: np.ndarray, val_loss_per_class, alpha: float = 0.6,
                  ids=None) -> EnsembleBuffer:
    """Seed the ensemble with the deterministic prediction of the pretrained model."""
    E = predict_batched(model, images)
    if E.shape[0] != len(images) or E.shape[2:] != images.shape[2:]:
        raise ValueError(f"prediction shape {E.shape} does not match images {images.shape}")
    val = np.asarray(val_loss_per_class, dtype=np.float64)
    if val.shape != (E.shape[1],):
        raise ValueError(f"need one validation loss per class ({E.shape[1]}), got shape {val.shape}")
    return EnsembleBuffer(E, alpha, val.copy(), list(ids) if ids is not None else list(range(len(images))))


def gate_classes(buffer: EnsembleBuffer, val_loss_per_class) -> set[int]:
    """Classes whose validation loss strictly beats their record; records are updated."""
    val = np.asarray(val_loss_per_class, dtype=np.float64)
    improved = val < buffer.best_val
    buffer.best_val = np.where(improved, val, buffer.best_val)
    buffer.enabled = improved
    return {int(s) for s in np.flatnonzero(improved)}


def update_ensemble(buffer: EnsembleBuffer, Y_hat: np.ndarray, improved, tol: float = 1e-6) -> EnsembleBuffer:
    """``E_s <- alpha E_s + (1 - alpha) Y_hat_s`` for every class ``s`` in ``improved``."""
    classes = sorted(int(s) for s in improved)
    if not classes:
        return buffer
    if Y_hat.shape != buffer.E.shape:
        raise ValueError(f"prediction shape {Y_hat.shape} != ensemble shape {buffer.E.shape}")
    if classes[0] < 0 or classes[-1] >= buffer.num_classes:
        raise ValueError(f"class ids {classes} outside 0..{buffer.num_classes - 1}")
    a = buffer.alpha
    E = buffer.E
    E[:, classes] = a * E[:, classes] + (1.0 - a) * Y_hat[:, classes]
    total = E.sum(axis=1, keepdims=True)
    drift = np.abs(total - 1.0) > tol
    if np.any(drift):
        E[:] = np.where(drift, E / total, E)
    return buffer


def extract_pseudo_labels(probs: np.ndarray) -> np.ndarray:
    """Hard labels (N, H, W) by argmax over channels; ties go to the lower class index."""
    return np.argmax(probs, axis=1)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(N, H, W) integer labels to (N, C, H, W) float one-hot."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:])
    np.put_along_axis(out, labels[:, None].astype(np.intp), 1.0, axis=1)
    return out


def softmax_confidence(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Probability assigned to each voxel's pseudo class."""
    return np.take_along_axis(probs, labels[:, None].astype(np.intp), axis=1)[:, 0]


def entropy(mean_probs: np.ndarray) -> np.ndarray:
    """Channel entropy with ``0 log 0 = 0``."""
    p = np.asarray(mean_probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=1)


def mc_entropy_from_passes(passes) -> np.ndarray:
    return entropy(np.mean(np.stack(passes), axis=0))


def mc_entropy_confidence(model: UNet, images: np.ndarray, passes: int = 10, seed: int = 0,
                          batch_size: int = 16) -> np.ndarray:
    """Negative entropy of the mean over ``passes`` dropout predictions, per voxel."""
    if passes < 2:
        raise ValueError(f"MC entropy needs at least 2 passes, got {passes}")
    out = []
    for i in range(0, len(images), batch_size):
        out.append(-mc_entropy_from_passes(mc_forward(model, images[i:i + batch_size], passes, seed=seed + i)))
    return np.concatenate(out, axis=0)


@dataclass
class ConfidenceConfig:
    measure: str = "softmax"
    fractions: tuple = (0.5, 0.5, 0.5, 0.1, 0.1)
    passes: int = 10

    def __post_init__(self):
        if self.measure not in ("softmax", "mc_entropy"):
            raise ValueError(f"unknown confidence measure {self.measure!r}")
        if any(not 0.0 < f <= 1.0 for f in self.fractions):
            raise ValueError(f"fractions must lie in (0, 1], got {self.fractions}")
        if self.measure == "mc_entropy" and self.passes < 2:
            raise ValueError("mc_entropy needs at least 2 passes")


def selection_count(fraction: float, count: int) -> int:
    if fraction >= 1.0:
        return count
    return int(math.floor(fraction * count + 1e-9))


def build_confidence_mask(confidence: np.ndarray, labels: np.ndarray, labeled, fractions):
    """Voxel mask (N, H, W) selecting labeled voxels and the most confident pseudo labels.

    ``labeled`` flags whole samples (shape (N,)) or voxels (shape (N, H, W)).
    For each class ``s`` the ``floor(fractions[s] * n_s)`` most confident
    unlabeled voxels pseudo-labelled ``s`` are kept, ranked across all
    samples; ties at the cut go to the lower flat voxel index.  Returns the
    mask and the per-class selected counts.
    """
    confidence = np.asarray(confidence, dtype=np.float64)
    labels = np.asarray(labels)
    labeled = np.asarray(labeled, dtype=bool)
    if labeled.ndim == 1:
        labeled = np.broadcast_to(labeled[:, None, None], labels.shape)
    mask = labeled.copy()
    flat_conf = confidence.ravel()
    flat_lab = labels.ravel()
    unl = ~labeled.ravel()
    flat_mask = mask.ravel()
    counts = {}
    for s, frac in enumerate(fractions):
        idx = np.flatnonzero(unl & (flat_lab == s))
        k = selection_count(frac, idx.size)
        counts[s] = k
        if k == 0:
            continue
        order = np.argsort(-flat_conf[idx], kind="stable")
        flat_mask[idx[order[:k]]] = True
    return flat_mask.reshape(labels.shape), counts
