"""Per-arrival training loop: joint-likelihood ELBO step, snapshot
distillation, buffer maintenance, prior tracking, and any-time evaluation.

One labeled embedding goes in per call to :meth:`StreamTrainer.observe`;
the posterior takes one (or a few) gradient steps, the slots used for
rehearsal get their cached metadata refreshed, and the new sample is
offered to the buffer. Evaluation never mutates state.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, asdict
from enum import Enum

import numpy as np

from . import bnn
from .bnn import MeanFieldPosterior, NetworkArch
from .buffer import MemorySlot, ReplayBuffer, ReplacementPolicy, ReplayStrategy

CHECKPOINT_MAGIC = b"BSLCKPT1"
CHECKPOINT_VERSION = 1

# Lower bound on rho after an update: sigma >= ~1e-6 so the analytic KL and
# its gradients stay finite even when the likelihood keeps shrinking sigma.
RHO_FLOOR = float(bnn.inv_softplus(1e-6))


class Mode(str, Enum):
    BASIL = "basil"
    FINE_TUNE = "finetune"
    PLAIN_ER = "plain-er"


class NumericalFault(RuntimeError):
    """Raised when a training step produces a non-finite loss or gradient."""

    def __init__(self, step: int, message: str):
        super().__init__(f"{message} (at step {step})")
        self.step = step


class CheckpointError(ValueError):
    """Raised on corrupt or version-mismatched checkpoint images."""


@dataclass
class TrainerConfig:
    lambda1: float = 1.0
    lambda2: float = 0.3
    n_replay: int = 16
    n_kd: int = 16
    replay_strategy: ReplayStrategy = ReplayStrategy.UAPN
    replacement_policy: ReplacementPolicy = ReplacementPolicy.LAWRRR
    mc_train: int = 2
    mc_eval: int = 10
    learning_rate: float = 0.01
    grad_steps_per_sample: int = 1
    buffer_capacity: int = 100
    mode: Mode = Mode.BASIL
    # refresh the prior to the current posterior every k arrivals
    prior_update_every: int = 1
    # divide the replay likelihood sum by the batch size (ablation)
    normalize_replay: bool = False
    # refresh cached logits/loss/uncertainty of rehearsed slots (ablation)
    refresh_used_slots: bool = True
    # global L2-norm gradient clip applied by the optimizer; 0 disables.
    # The loss functions themselves always return unclipped exact gradients.
    grad_clip: float = 100.0
    optimizer: str = "sgd"  # "sgd" | "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    sigma0: float = 0.05
    mu_init_std: float = 0.0

    def __post_init__(self):
        self.replay_strategy = ReplayStrategy(self.replay_strategy)
        self.replacement_policy = ReplacementPolicy(self.replacement_policy)
        self.mode = Mode(self.mode)
        if self.mode is Mode.FINE_TUNE:
            self.buffer_capacity = 0
            self.lambda2 = 0.0
        elif self.mode is Mode.PLAIN_ER:
            self.replay_strategy = ReplayStrategy.UNI
            self.replacement_policy = ReplacementPolicy.RESERVOIR
            self.lambda2 = 0.0
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be >= 0")
        if self.n_replay < 0 or self.n_kd < 0:
            raise ValueError("n_replay and n_kd must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.grad_steps_per_sample < 1:
            raise ValueError("grad_steps_per_sample must be >= 1")
        if self.mc_train < 1 or self.mc_eval < 1:
            raise ValueError("mc_train and mc_eval must be >= 1")
        if self.prior_update_every < 1:
            raise ValueError("prior_update_every must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("replay_strategy", "replacement_policy", "mode"):
            d[k] = d[k].value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        return cls(**d)


@dataclass
class StepReport:
    elbo_loss: float
    distill_loss: float
    total_loss: float
    inserted: bool
    evicted_index: int | None


class StreamTrainer:
    """Owns the posterior, prior, buffer, and RNG for one streaming run."""

    def __init__(self, arch: NetworkArch, config: TrainerConfig, seed: int):
        self.arch = arch
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.posterior = MeanFieldPosterior.initial(
            arch, sigma0=config.sigma0, mu_std=config.mu_init_std, rng=self.rng)
        self.prior = self.posterior.copy()
        self.buffer = (ReplayBuffer(config.buffer_capacity)
                       if config.buffer_capacity > 0 else None)
        self.step = 0
        self.observed_classes: set[int] = set()
        p2 = 2 * arch.num_params
        self.adam_m = np.zeros(p2)
        self.adam_v = np.zeros(p2)
        self.adam_t = 0

    # -- training ----------------------------------------------------------

    def _apply_update(self, grads: np.ndarray):
        cfg = self.config
        if cfg.grad_clip > 0:
            norm = float(np.linalg.norm(grads))
            if norm > cfg.grad_clip:
                grads = grads * (cfg.grad_clip / norm)
        if cfg.optimizer == "adam":
            self.adam_t += 1
            self.adam_m = cfg.adam_beta1 * self.adam_m + (1 - cfg.adam_beta1) * grads
            self.adam_v = cfg.adam_beta2 * self.adam_v + (1 - cfg.adam_beta2) * grads * grads
            mhat = self.adam_m / (1 - cfg.adam_beta1 ** self.adam_t)
            vhat = self.adam_v / (1 - cfg.adam_beta2 ** self.adam_t)
            update = cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        else:
            update = cfg.learning_rate * grads
        p = self.arch.num_params
        self.posterior.mu -= update[:p]
        self.posterior.rho = np.maximum(self.posterior.rho - update[p:], RHO_FLOOR)

    def observe(self, z: np.ndarray, y: int) -> StepReport:
        """Train on one arriving labeled embedding."""
        cfg = self.config
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.arch.input_dim,):
            raise ValueError(f"embedding shape {z.shape} != ({self.arch.input_dim},)")
        y = int(y)
        if not (0 <= y < self.arch.num_classes):
            raise ValueError(f"class id {y} out of range")

        if self.step % cfg.prior_update_every == 0:
            self.prior = self.posterior.copy()

        use_buffer = cfg.mode is not Mode.FINE_TUNE and self.buffer is not None
        replay_idx: list[int] = []
        kd_idx: list[int] = []
        if use_buffer and len(self.buffer) > 0:
            if cfg.n_replay > 0:
                replay_idx = self.buffer.sample_replay(
                    cfg.replay_strategy, cfg.n_replay, self.rng)
            if cfg.n_kd > 0 and cfg.lambda2 > 0:
                kd_idx = self.buffer.sample_kd(cfg.n_kd, self.rng)
        replay_batch = [(self.buffer.slots[i].z, self.buffer.slots[i].y)
                        for i in replay_idx]
        kd_batch = [(self.buffer.slots[i].z, self.buffer.slots[i].h)
                    for i in kd_idx]

        elbo_loss = distill_loss = 0.0
        for _ in range(cfg.grad_steps_per_sample):
            sig = self.posterior.sigma()
            sprime = bnn.sigmoid(self.posterior.rho)
            elbo_loss, grads = bnn.elbo_loss_and_grads(
                self.posterior, self.prior, (z, y), replay_batch,
                cfg.lambda1, cfg.mc_train, self.rng,
                normalize_replay=cfg.normalize_replay, sig=sig, sprime=sprime)
            distill_loss = 0.0
            if kd_batch:
                distill_loss, kd_grads = bnn.distill_loss_and_grads(
                    self.posterior, kd_batch, cfg.lambda2, cfg.mc_train,
                    self.rng, sig=sig, sprime=sprime)
                grads = grads + kd_grads
            total = elbo_loss + distill_loss
            if not np.isfinite(total) or not np.all(np.isfinite(grads)):
                raise NumericalFault(self.step, "non-finite training loss or gradient")
            self._apply_update(grads)

        inserted, evicted = False, None
        if use_buffer:
            # Metadata for rehearsed slots and the new sample in one pass,
            # all under the just-updated posterior.
            used = sorted(set(replay_idx) | set(kd_idx)) if cfg.refresh_used_slots else []
            zb = np.stack([self.buffer.slots[i].z for i in used] + [z])
            yb = np.array([self.buffer.slots[i].y for i in used] + [y])
            logits, losses, ents = bnn.batch_metadata(
                self.posterior, zb, yb, cfg.mc_train, self.rng)
            for row, i in enumerate(used):
                self.buffer.refresh_slot(i, logits[row], losses[row], ents[row])
            slot = MemorySlot(z, y, logits[-1], max(losses[-1], 0.0), max(ents[-1], 0.0))
            report = self.buffer.maybe_insert(slot, cfg.replacement_policy, self.rng)
            inserted, evicted = report.inserted, report.evicted_index

        self.step += 1
        self.observed_classes.add(y)
        return StepReport(elbo_loss, distill_loss, elbo_loss + distill_loss,
                          inserted, evicted)

    # -- inference ---------------------------------------------------------

    def predict_proba(self, z: np.ndarray, eval_seed: int = 0) -> np.ndarray:
        """Predictive distribution using a private RNG; never mutates state."""
        rng = np.random.default_rng(eval_seed)
        return bnn.predict_proba(self.posterior, z, self.config.mc_eval, rng)

    def evaluate(self, test_z: np.ndarray, test_y: np.ndarray,
                 eval_seed: int = 0) -> float:
        """Single-head accuracy with argmax over all classes seen so far."""
        test_z = np.asarray(test_z, dtype=np.float64)
        test_y = np.asarray(test_y)
        if test_z.ndim != 2 or len(test_z) == 0:
            raise ValueError("test set must be a nonempty (n, d) array")
        probs = self.predict_proba(test_z, eval_seed=eval_seed)
        if self.observed_classes:
            mask = np.full(self.arch.num_classes, -np.inf)
            mask[sorted(self.observed_classes)] = 0.0
            probs = probs + mask
        pred = probs.argmax(axis=1)
        return float((pred == test_y).mean())

    # -- checkpointing -----------------------------------------------------

    def state_digest(self) -> str:
        """SHA-256 over every piece of mutable state; used for no-mutation tests."""
        return hashlib.sha256(self.checkpoint()).hexdigest()

    def checkpoint(self) -> bytes:
        """Serialize the full trainer state to a versioned binary image."""
        out = io.BytesIO()
        out.write(CHECKPOINT_MAGIC)
        out.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_blob(out, json.dumps({
            "input_dim": self.arch.input_dim,
            "num_classes": self.arch.num_classes,
            "hidden_dims": list(self.arch.hidden_dims),
        }, sort_keys=True).encode())
        _write_blob(out, json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for arr in (self.posterior.mu, self.posterior.rho,
                    self.prior.mu, self.prior.rho):
            _write_array(out, arr)
        if self.buffer is None:
            out.write(struct.pack("<B", 0))
        else:
            out.write(struct.pack("<B", 1))
            out.write(struct.pack("<QQQ", self.buffer.capacity,
                                  self.buffer.seen_count, len(self.buffer.slots)))
            for s in self.buffer.slots:
                out.write(struct.pack("<q", s.y))
                out.write(struct.pack("<dd", s.l, s.u))
                _write_array(out, s.z)
                _write_array(out, s.h)
        out.write(struct.pack("<Q", self.step))
        _write_blob(out, json.dumps(sorted(self.observed_classes)).encode())
        _write_blob(out, json.dumps(self.rng.bit_generator.state, sort_keys=True).encode())
        out.write(struct.pack("<Q", self.adam_t))
        _write_array(out, self.adam_m)
        _write_array(out, self.adam_v)
        return out.getvalue()

    @classmethod
    def restore(cls, data: bytes) -> "StreamTrainer":
        """Rebuild a trainer from a checkpoint image, bit-identically."""
        buf = io.BytesIO(data)
        try:
            magic = _read_exact(buf, len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointError(f"bad magic bytes {magic!r}")
            (version,) = struct.unpack("<I", _read_exact(buf, 4))
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            arch_d = json.loads(_read_blob(buf))
            config = TrainerConfig.from_dict(json.loads(_read_blob(buf)))
            arch = NetworkArch(arch_d["input_dim"], arch_d["num_classes"],
                               tuple(arch_d["hidden_dims"]))
            trainer = cls.__new__(cls)
            trainer.arch = arch
            trainer.config = config
            mu = _read_array(buf)
            rho = _read_array(buf)
            trainer.posterior = MeanFieldPosterior(arch, mu, rho)
            trainer.prior = MeanFieldPosterior(arch, _read_array(buf), _read_array(buf))
            (has_buffer,) = struct.unpack("<B", _read_exact(buf, 1))
            if has_buffer:
                capacity, seen, n_slots = struct.unpack("<QQQ", _read_exact(buf, 24))
                buffer = ReplayBuffer(capacity)
                buffer.seen_count = seen
                for _ in range(n_slots):
                    (y,) = struct.unpack("<q", _read_exact(buf, 8))
                    l, u = struct.unpack("<dd", _read_exact(buf, 16))
                    z = _read_array(buf)
                    h = _read_array(buf)
                    buffer.slots.append(MemorySlot(z, y, h, l, u))
                    buffer.class_counts[y] = buffer.class_counts.get(y, 0) + 1
                trainer.buffer = buffer
            else:
                trainer.buffer = None
            (trainer.step,) = struct.unpack("<Q", _read_exact(buf, 8))
            trainer.observed_classes = set(json.loads(_read_blob(buf)))
            rng_state = json.loads(_read_blob(buf))
            trainer.rng = np.random.default_rng(0)
            trainer.rng.bit_generator.state = rng_state
            (trainer.adam_t,) = struct.unpack("<Q", _read_exact(buf, 8))
            trainer.adam_m = _read_array(buf)
            trainer.adam_v = _read_array(buf)
            return trainer
        except (struct.error, EOFError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CheckpointError(f"corrupt checkpoint image: {exc}") from exc


def _write_blob(out, blob: bytes):
    out.write(struct.pack("<Q", len(blob)))
    out.write(blob)


def _write_array(out, arr: np.ndarray):
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    _write_blob(out, data)


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise EOFError(f"expected {n} bytes, got {len(data)}")
    return data


def _read_blob(buf) -> bytes:
    (n,) = struct.unpack("<Q", _read_exact(buf, 8))
    return _read_exact(buf, n)


def _read_array(buf) -> np.ndarray:
    return np.frombuffer(_read_blob(buf), dtype="<f8").copy()
