"""Experiment orchestration: stream a dataset through the trainer for
every seed, evaluate at testing events, normalize against the cached
offline reference, and aggregate results into CSV files.

Every output byte is determined by (config, seeds); wall-clock metadata
goes to a separate sidecar file.
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bnn import NetworkArch
from .metrics import EvalRecord, offline_reference, omega_all
from .orderings import (DatasetManifest, OrderingKind, load_embeddings,
                        load_manifest, order_stream, synth_dataset)
from .trainer import StreamTrainer, TrainerConfig

RESULT_COLUMNS = ("run_id", "seed", "mode", "ordering", "event_index",
                  "alpha", "alpha_offline", "omega_all_running")


@dataclass
class SynthSpec:
    classes: int = 10
    instances: int = 3
    frames: int = 200
    dim: int = 32
    drift: float = 0.2
    noise: float = 0.5
    seed: int = 0
    test_frames: int | None = None
    class_sep: float = 2.0
    instance_spread: float = 0.5
    walk_momentum: float = 0.9


@dataclass
class ExperimentConfig:
    run_id: str
    ordering: OrderingKind = OrderingKind.CLASS_INSTANCE
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    seeds: list = field(default_factory=lambda: [0])
    hidden_dims: tuple = (256, 256)
    classes_per_increment: int = 2
    num_events: int = 10
    data_dir: str | None = None
    synth: SynthSpec | None = None
    offline_epochs: int = 15
    offline_lr: float = 0.05
    offline_batch: int = 64
    eval_seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        self.ordering = OrderingKind(self.ordering)
        self.hidden_dims = tuple(self.hidden_dims)
        if (self.data_dir is None) == (self.synth is None):
            raise ValueError("exactly one of data_dir or synth must be set")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ordering"] = self.ordering.value
        d["trainer"] = self.trainer.to_dict()
        d["hidden_dims"] = list(self.hidden_dims)
        return d


@dataclass
class Dataset:
    train_manifest: DatasetManifest
    train_emb: np.ndarray
    test_manifest: DatasetManifest
    test_emb: np.ndarray

    @property
    def test_labels(self) -> np.ndarray:
        return np.array([r.class_id for r in self.test_manifest.samples])

    def test_rows(self) -> np.ndarray:
        refs = [r.embedding_ref for r in self.test_manifest.samples]
        return self.test_emb[refs]

    def train_labels(self) -> np.ndarray:
        return np.array([r.class_id for r in self.train_manifest.samples])

    def train_rows(self) -> np.ndarray:
        refs = [r.embedding_ref for r in self.train_manifest.samples]
        return self.train_emb[refs]


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.synth is not None:
        s = cfg.synth
        tm, te, sm, se = synth_dataset(
            s.classes, s.instances, s.frames, s.dim, s.drift, s.noise, s.seed,
            test_frames_per_instance=s.test_frames, class_sep=s.class_sep,
            instance_spread=s.instance_spread, walk_momentum=s.walk_momentum)
        return Dataset(tm, te, sm, se)
    root = Path(cfg.data_dir)
    return Dataset(
        load_manifest(root / "train_manifest.json"),
        load_embeddings(root / "train_embeddings.bin"),
        load_manifest(root / "test_manifest.json"),
        load_embeddings(root / "test_embeddings.bin"),
    )


def _events_classes(order, boundaries, by_id) -> list:
    """Classes observed by each testing event, from the stream prefix."""
    out = []
    seen: set = set()
    pos = 0
    for b in boundaries:
        for sid in order[pos:b]:
            seen.add(by_id[sid].class_id)
        pos = b
        out.append(set(seen))
    return out


def run_seed(cfg: ExperimentConfig, dataset: Dataset, seed: int,
             cache_dir=None, checkpoint_path=None, resume: bool = False,
             extra_eval_every: int | None = None):
    """Stream one seed's ordering through a fresh trainer.

    Returns (rows, omega) where rows are result-CSV dicts, one per testing
    event. If checkpoint_path is given, the trainer state and event rows
    are saved there after every event; with resume=True an existing
    checkpoint continues instead of restarting.
    """
    arch = NetworkArch(dataset.train_manifest.embedding_dim,
                       dataset.train_manifest.num_classes, cfg.hidden_dims)
    order, boundaries = order_stream(dataset.train_manifest, cfg.ordering, seed,
                                     cfg.classes_per_increment, cfg.num_events)
    by_id = dataset.train_manifest.by_id()
    events_classes = _events_classes(order, boundaries, by_id)

    alpha_offline = offline_reference(
        dataset.train_rows(), dataset.train_labels(),
        dataset.test_rows(), dataset.test_labels,
        arch, events_classes, epochs=cfg.offline_epochs, seed=seed,
        learning_rate=cfg.offline_lr, batch_size=cfg.offline_batch,
        cache_dir=cache_dir)

    test_z = dataset.test_rows()
    test_y = dataset.test_labels

    start = 0
    rows: list = []
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        trainer = StreamTrainer.restore(Path(checkpoint_path).read_bytes())
        sidecar = json.loads(Path(str(checkpoint_path) + ".events.json").read_text())
        start = sidecar["position"]
        rows = sidecar["rows"]
    else:
        trainer = StreamTrainer(arch, cfg.trainer, seed)

    records = [EvalRecord(r["event_index"], r["alpha"], r["alpha_offline"])
               for r in rows]
    next_event = len(rows)
    for i in range(start, len(order)):
        rec = by_id[order[i]]
        trainer.observe(dataset.train_emb[rec.embedding_ref], rec.class_id)
        pos = i + 1
        if extra_eval_every and pos % extra_eval_every == 0 and trainer.observed_classes:
            # probe evaluation; any-time inference must not change the run
            trainer.evaluate(test_z[:32], test_y[:32], eval_seed=cfg.eval_seed)
        if next_event < len(boundaries) and pos == boundaries[next_event]:
            classes = sorted(events_classes[next_event])
            mask = np.isin(test_y, classes)
            alpha = trainer.evaluate(test_z[mask], test_y[mask],
                                     eval_seed=cfg.eval_seed)
            records.append(EvalRecord(next_event, alpha, alpha_offline[next_event]))
            rows.append({
                "run_id": cfg.run_id, "seed": seed,
                "mode": cfg.trainer.mode.value, "ordering": cfg.ordering.value,
                "event_index": next_event, "alpha": alpha,
                "alpha_offline": alpha_offline[next_event],
                "omega_all_running": omega_all(records),
            })
            next_event += 1
            if checkpoint_path is not None:
                Path(checkpoint_path).parent.mkdir(parents=True, exist_ok=True)
                Path(checkpoint_path).write_bytes(trainer.checkpoint())
                Path(str(checkpoint_path) + ".events.json").write_text(
                    json.dumps({"position": pos, "rows": rows}))
    return rows, omega_all(records)


def _seed_worker(args):
    cfg, seed, cache_dir, checkpoint_path, resume, extra_eval_every = args
    dataset = load_dataset(cfg)
    return seed, run_seed(cfg, dataset, seed, cache_dir=cache_dir,
                          checkpoint_path=checkpoint_path, resume=resume,
                          extra_eval_every=extra_eval_every)


def format_float(v: float) -> str:
    return f"{v:.12g}"


def write_results_csv(path, cfg: ExperimentConfig, rows):
    lines = ["# config: " + json.dumps(cfg.to_dict(), sort_keys=True),
             ",".join(RESULT_COLUMNS)]
    for r in rows:
        lines.append(",".join([
            r["run_id"], str(r["seed"]), r["mode"], r["ordering"],
            str(r["event_index"]), format_float(r["alpha"]),
            format_float(r["alpha_offline"]), format_float(r["omega_all_running"]),
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir, resume: bool = False,
                   extra_eval_every: int | None = None) -> dict:
    """Run all seeds, write results.csv / summary.csv, return the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache_dir = out / "offline_cache"
    cache_dir.mkdir(exist_ok=True)
    ckpt_dir = out / "checkpoints"

    tasks = [(cfg, seed, str(cache_dir),
              str(ckpt_dir / f"{cfg.run_id}_seed{seed}.ckpt"),
              resume, extra_eval_every) for seed in cfg.seeds]
    started = time.time()
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            outcomes = list(pool.map(_seed_worker, tasks))
    else:
        dataset = load_dataset(cfg)
        outcomes = []
        for cfg_, seed, cache, ckpt, res, probe in tasks:
            outcomes.append((seed, run_seed(cfg_, dataset, seed, cache_dir=cache,
                                            checkpoint_path=ckpt, resume=res,
                                            extra_eval_every=probe)))
    outcomes.sort(key=lambda item: item[0])

    all_rows = []
    omegas = []
    for seed, (rows, omega) in outcomes:
        all_rows.extend(rows)
        omegas.append(omega)
    write_results_csv(out / f"results_{cfg.run_id}.csv", cfg, all_rows)

    summary = {
        "run_id": cfg.run_id,
        "mode": cfg.trainer.mode.value,
        "ordering": cfg.ordering.value,
        "num_seeds": len(cfg.seeds),
        "omega_mean": float(np.mean(omegas)),
        "omega_std": float(np.std(omegas)),
        "omega_per_seed": {str(seed): om for seed, (_, om) in outcomes},
    }
    (out / f"summary_{cfg.run_id}.json").write_text(
        json.dumps(summary, sort_keys=True, indent=1))
    (out / f"meta_{cfg.run_id}.json").write_text(json.dumps({
        "wall_time_s": time.time() - started,
        "finished_unix": time.time(),
    }))
    return summary
