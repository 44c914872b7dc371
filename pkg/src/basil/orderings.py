"""Stream construction over dataset manifests, plus a synthetic
temporally-coherent embedding generator for desk-scale experiments.

Four ordering schemes are supported: iid (uniform shuffle), class-iid
(random class groups, shuffled within), instance (temporally ordered
object-instance blocks in random order), and class-instance (random class
groups of temporally ordered instance blocks).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

EMBEDDING_MAGIC = b"BSLEMB1"


class OrderingKind(str, Enum):
    IID = "iid"
    CLASS_IID = "class-iid"
    INSTANCE = "instance"
    CLASS_INSTANCE = "class-instance"


TEMPORAL_KINDS = (OrderingKind.INSTANCE, OrderingKind.CLASS_INSTANCE)
CLASS_GROUPED_KINDS = (OrderingKind.CLASS_IID, OrderingKind.CLASS_INSTANCE)


@dataclass
class SampleRecord:
    sample_id: int
    class_id: int
    instance_id: int
    temporal_index: int | None
    embedding_ref: int


@dataclass
class DatasetManifest:
    samples: list
    num_classes: int
    embedding_dim: int
    split: str

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        keys = set()
        for rec in self.samples:
            key = (rec.class_id, rec.instance_id, rec.temporal_index)
            if key in keys:
                raise ValueError(f"duplicate (class, instance, temporal) key {key}")
            keys.add(key)

    def by_id(self) -> dict:
        return {rec.sample_id: rec for rec in self.samples}

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "embedding_dim": self.embedding_dim,
            "split": self.split,
            "samples": [
                {
                    "sample_id": r.sample_id,
                    "class_id": r.class_id,
                    "instance_id": r.instance_id,
                    "temporal_index": r.temporal_index,
                    "embedding_ref": r.embedding_ref,
                }
                for r in self.samples
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            samples=[SampleRecord(**rec) for rec in d["samples"]],
            num_classes=d["num_classes"],
            embedding_dim=d["embedding_dim"],
            split=d["split"],
        )


def save_manifest(manifest: DatasetManifest, path):
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True))


def load_manifest(path) -> DatasetManifest:
    return DatasetManifest.from_dict(json.loads(Path(path).read_text()))


def save_embeddings(arr: np.ndarray, path):
    """Write a (count, dim) embedding matrix: magic, u32 count, u32 dim, f32 LE rows."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("embeddings must be a 2-D array")
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_embeddings(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[: len(EMBEDDING_MAGIC)] != EMBEDDING_MAGIC:
        raise ValueError(f"{path}: bad embedding-file magic")
    off = len(EMBEDDING_MAGIC)
    count, dim = struct.unpack_from("<II", data, off)
    off += 8
    expected = count * dim * 4
    if len(data) - off != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, got {len(data) - off}")
    return np.frombuffer(data, dtype="<f4", count=count * dim, offset=off) \
        .astype(np.float64).reshape(count, dim)


def order_stream(manifest: DatasetManifest, kind: OrderingKind, seed: int,
                 classes_per_increment: int = 2, num_events: int = 10):
    """Build a stream permutation and its testing-event boundaries.

    Returns (sample_ids, boundaries): boundaries are stream positions
    (1-based counts) after which an evaluation happens. For class-grouped
    kinds there is one event per class group; otherwise num_events evenly
    spaced events.
    """
    kind = OrderingKind(kind)
    if not manifest.samples:
        raise ValueError("manifest has no samples")
    if classes_per_increment < 1:
        raise ValueError("classes_per_increment must be >= 1")
    if kind in TEMPORAL_KINDS and any(r.temporal_index is None for r in manifest.samples):
        raise ValueError(f"{kind.value} ordering requires temporal_index on every sample")
    rng = np.random.default_rng(seed)
    n = len(manifest.samples)

    if kind is OrderingKind.IID:
        ids = [manifest.samples[i].sample_id for i in rng.permutation(n)]
        return ids, _even_boundaries(n, num_events)

    if kind is OrderingKind.INSTANCE:
        blocks = _instance_blocks(manifest)
        order = []
        for bi in rng.permutation(len(blocks)):
            order.extend(blocks[bi])
        return order, _even_boundaries(n, num_events)

    # class-grouped kinds
    classes = sorted({r.class_id for r in manifest.samples})
    class_order = [classes[i] for i in rng.permutation(len(classes))]
    groups = [class_order[i:i + classes_per_increment]
              for i in range(0, len(class_order), classes_per_increment)]
    order = []
    boundaries = []
    for group in groups:
        if kind is OrderingKind.CLASS_IID:
            members = [r.sample_id for r in manifest.samples if r.class_id in group]
            chunk = [members[i] for i in rng.permutation(len(members))]
        else:  # CLASS_INSTANCE
            blocks = _instance_blocks(manifest, classes=set(group))
            chunk = []
            for bi in rng.permutation(len(blocks)):
                chunk.extend(blocks[bi])
        order.extend(chunk)
        boundaries.append(len(order))
    return order, boundaries


def _even_boundaries(n: int, num_events: int) -> list:
    if num_events < 1:
        raise ValueError("num_events must be >= 1")
    bounds = sorted({max(1, round(n * (i + 1) / num_events)) for i in range(num_events)})
    if bounds[-1] != n:
        bounds.append(n)
    return bounds


def _instance_blocks(manifest: DatasetManifest, classes=None) -> list:
    """Sample ids grouped by (class, instance), temporally ascending within."""
    grouped: dict = {}
    for r in manifest.samples:
        if classes is not None and r.class_id not in classes:
            continue
        grouped.setdefault((r.class_id, r.instance_id), []).append(r)
    blocks = []
    for key in sorted(grouped):
        recs = sorted(grouped[key], key=lambda r: r.temporal_index)
        blocks.append([r.sample_id for r in recs])
    return blocks


def synth_dataset(num_classes: int, instances_per_class: int,
                  frames_per_instance: int, d: int, drift: float,
                  noise: float, seed: int,
                  test_frames_per_instance: int | None = None,
                  class_sep: float = 2.0, instance_spread: float = 0.5,
                  walk_momentum: float = 0.9):
    """Temporally coherent synthetic embedding streams.

    Class centers are Gaussian at scale ``class_sep``; instance centers are
    perturbed from them; frames follow a momentum random walk of step
    ``drift`` around the instance center plus isotropic ``noise``. The test
    split continues each instance's walk with held-out frames.

    Returns (train_manifest, train_embeddings, test_manifest, test_embeddings).
    """
    if num_classes < 1 or instances_per_class < 1 or frames_per_instance < 1:
        raise ValueError("all counts must be >= 1")
    if d < 2:
        raise ValueError("embedding dimension must be >= 2")
    if drift < 0 or noise < 0:
        raise ValueError("drift and noise must be >= 0")
    if test_frames_per_instance is None:
        test_frames_per_instance = max(1, frames_per_instance // 4)

    rng = np.random.default_rng(seed)
    class_centers = rng.normal(0.0, class_sep, size=(num_classes, d))

    train_rows, test_rows = [], []
    train_recs, test_recs = [], []
    for c in range(num_classes):
        for inst in range(instances_per_class):
            center = class_centers[c] + rng.normal(0.0, instance_spread, size=d)
            walk = np.zeros(d)
            for k in range(frames_per_instance + test_frames_per_instance):
                walk = walk_momentum * walk + drift * rng.normal(size=d)
                frame = center + walk + noise * rng.normal(size=d)
                if k < frames_per_instance:
                    train_recs.append((c, inst, k))
                    train_rows.append(frame)
                else:
                    test_recs.append((c, inst, k - frames_per_instance))
                    test_rows.append(frame)

    def build(recs, rows, split):
        samples = [
            SampleRecord(sample_id=i, class_id=c, instance_id=inst,
                         temporal_index=t, embedding_ref=i)
            for i, (c, inst, t) in enumerate(recs)
        ]
        manifest = DatasetManifest(samples=samples, num_classes=num_classes,
                                   embedding_dim=d, split=split)
        return manifest, np.asarray(rows, dtype=np.float64)

    train_manifest, train_emb = build(train_recs, train_rows, "train")
    test_manifest, test_emb = build(test_recs, test_rows, "test")
    return train_manifest, train_emb, test_manifest, test_emb
