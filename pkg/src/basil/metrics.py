"""Accuracy bookkeeping and the normalized streaming metric Omega_all.

Omega_all is the mean over testing events of streaming accuracy divided
by the accuracy of a deterministic head trained offline on all data for
the classes observed by that event. Offline references are cached to disk
keyed by their full inputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bnn
from .bnn import NetworkArch


@dataclass
class EvalRecord:
    """One testing event: streaming accuracy paired with its offline reference."""

    event_index: int
    alpha: float
    alpha_offline: float

    def __post_init__(self):
        if not np.isfinite(self.alpha) or not np.isfinite(self.alpha_offline):
            raise ValueError("accuracies must be finite")
        if self.alpha_offline <= 0.0:
            raise ValueError(f"alpha_offline must be > 0, got {self.alpha_offline}")


def omega_all(records) -> float:
    """Mean of alpha_t / alpha_offline_t over testing events; may exceed 1."""
    records = list(records)
    if not records:
        raise ValueError("omega_all needs at least one record")
    return float(np.mean([r.alpha / r.alpha_offline for r in records]))


def train_offline_head(arch: NetworkArch, train_z: np.ndarray, train_y: np.ndarray,
                       epochs: int, seed: int, learning_rate: float = 0.05,
                       batch_size: int = 64) -> np.ndarray:
    """Multi-epoch minibatch SGD on a deterministic (point-estimate) head."""
    rng = np.random.default_rng(seed)
    theta = bnn.he_init(arch, rng)
    n = len(train_y)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            _, grads = bnn.point_loss_and_grads(arch, theta, train_z[idx], train_y[idx])
            theta -= learning_rate * grads
    return theta


def point_accuracy(arch: NetworkArch, theta: np.ndarray, test_z: np.ndarray,
                   test_y: np.ndarray, allowed_classes=None) -> float:
    """Argmax accuracy of a deterministic head, optionally class-restricted."""
    logits = bnn.point_forward(arch, theta, test_z)
    if allowed_classes is not None:
        mask = np.full(arch.num_classes, -np.inf)
        mask[sorted(allowed_classes)] = 0.0
        logits = logits + mask
    return float((logits.argmax(axis=1) == np.asarray(test_y)).mean())


def _cache_key(train_z, train_y, test_z, test_y, arch, events_classes,
               epochs, seed, learning_rate, batch_size) -> str:
    h = hashlib.sha256()
    for arr in (np.ascontiguousarray(train_z, dtype="<f8"),
                np.ascontiguousarray(train_y, dtype="<i8"),
                np.ascontiguousarray(test_z, dtype="<f8"),
                np.ascontiguousarray(test_y, dtype="<i8")):
        h.update(arr.tobytes())
    h.update(json.dumps({
        "arch": [arch.input_dim, list(arch.hidden_dims), arch.num_classes],
        "events": [sorted(ev) for ev in events_classes],
        "epochs": epochs, "seed": seed,
        "lr": learning_rate, "batch": batch_size,
    }, sort_keys=True).encode())
    return h.hexdigest()


def offline_reference(train_z: np.ndarray, train_y: np.ndarray,
                      test_z: np.ndarray, test_y: np.ndarray,
                      arch: NetworkArch, events_classes,
                      epochs: int = 15, seed: int = 0,
                      learning_rate: float = 0.05, batch_size: int = 64,
                      cache_dir=None) -> list:
    """Per-event offline accuracies for a run's testing-event class coverage.

    For each event, a fresh deterministic head is trained on all training
    samples of the classes observed by that event and evaluated on the
    matching test subset. Results are cached by a hash of every input.
    """
    train_z = np.asarray(train_z, dtype=np.float64)
    train_y = np.asarray(train_y)
    test_z = np.asarray(test_z, dtype=np.float64)
    test_y = np.asarray(test_y)
    events_classes = [set(ev) for ev in events_classes]

    cache_path = None
    if cache_dir is not None:
        key = _cache_key(train_z, train_y, test_z, test_y, arch, events_classes,
                         epochs, seed, learning_rate, batch_size)
        cache_path = Path(cache_dir) / f"offline_{key}.json"
        if cache_path.exists():
            try:
                cached = json.loads(cache_path.read_text())
                if (isinstance(cached, list) and len(cached) == len(events_classes)
                        and all(isinstance(v, float) for v in cached)):
                    return cached
            except (json.JSONDecodeError, OSError):
                pass  # corrupt cache: fall through and recompute

    results = []
    for t, classes in enumerate(events_classes):
        if not classes:
            raise ValueError(f"event {t} has an empty class set")
        train_mask = np.isin(train_y, sorted(classes))
        test_mask = np.isin(test_y, sorted(classes))
        if not train_mask.any() or not test_mask.any():
            raise ValueError(f"event {t}: no samples for classes {sorted(classes)}")
        theta = train_offline_head(arch, train_z[train_mask], train_y[train_mask],
                                   epochs, seed + t, learning_rate, batch_size)
        results.append(point_accuracy(arch, theta, test_z[test_mask],
                                      test_y[test_mask], allowed_classes=classes))

    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        cache_path.write_text(json.dumps(results))
    return results
