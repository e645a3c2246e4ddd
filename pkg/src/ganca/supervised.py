"""Supervised multi-target training with a persistence sample pool."""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import DatasetManifest
from .errors import ConfigError, TrainingDiverged
from .nca import RGBA, NcaParams, build_seed, nca_rollout, sample_iterations
from .optim import AdamState, adam_step, grad_normalize
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 10000
    batch_size: int = 16
    iter_lo: int = 50
    iter_hi: int = 60
    lr: float = 2e-3
    lr_decay_at: float = 0.8
    lr_decay: float = 0.1
    reuse_prob: float = 0.5
    pool_capacity: int = 8
    depth: int = 16
    hidden: int = 128
    seed: int = 0
    val_every: int = 100
    checkpoint_every: int = 1000

    def errors(self) -> list[str]:
        bad = []
        if self.steps < 1:
            bad.append(f"steps must be >= 1 (got {self.steps})")
        if self.batch_size < 1:
            bad.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if not 1 <= self.iter_lo <= self.iter_hi:
            bad.append(f"need 1 <= iter_lo <= iter_hi (got {self.iter_lo}, {self.iter_hi})")
        if not self.lr > 0:
            bad.append(f"lr must be positive (got {self.lr})")
        if not 0 <= self.lr_decay_at <= 1:
            bad.append(f"lr_decay_at must be in [0, 1] (got {self.lr_decay_at})")
        if not 0 <= self.reuse_prob <= 1:
            bad.append(f"reuse_prob must be in [0, 1] (got {self.reuse_prob})")
        if self.pool_capacity < 1:
            bad.append(f"pool_capacity must be >= 1 (got {self.pool_capacity})")
        if self.depth < 5:
            bad.append(f"depth must be >= 5 (got {self.depth})")
        if self.hidden < 1:
            bad.append(f"hidden must be >= 1 (got {self.hidden})")
        if self.val_every < 1 or self.checkpoint_every < 1:
            bad.append("val_every and checkpoint_every must be >= 1")
        return bad

    def validate(self) -> "TrainConfig":
        bad = self.errors()
        if bad:
            raise ConfigError("invalid training config: " + "; ".join(bad))
        return self

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step``."""
        return self.lr * (self.lr_decay if step >= self.lr_decay_at * self.steps else 1.0)


class SamplePool:
    """Per-example ring buffers of previous rollout end states."""

    def __init__(self, capacity: int = 8, reuse_prob: float = 0.5):
        if capacity < 1:
            raise ConfigError(f"pool capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.reuse_prob = reuse_prob
        self.slots: dict[str, deque] = {}

    def __len__(self):
        return sum(len(s) for s in self.slots.values())

    def states(self, example_id: str) -> list[np.ndarray]:
        return list(self.slots.get(example_id, ()))

    def commit(self, example_id: str, state: np.ndarray) -> None:
        slot = self.slots.setdefault(example_id, deque(maxlen=self.capacity))
        slot.append(np.array(state, dtype=np.float32, copy=True))

    def sample(self, example_id: str, rng: np.random.Generator, fresh_seed: np.ndarray) -> np.ndarray:
        return pool_sample(self, example_id, rng, fresh_seed)

    def to_tensors(self) -> tuple[list[list], dict[str, np.ndarray]]:
        layout, tensors = [], {}
        for eid in sorted(self.slots):
            slot = self.slots[eid]
            layout.append([eid, len(slot)])
            for k, s in enumerate(slot):
                tensors[f"pool/{eid}/{k}"] = s
        return layout, tensors

    def restore(self, layout, tensors) -> None:
        self.slots = {}
        for eid, count in layout:
            for k in range(count):
                self.commit(eid, tensors[f"pool/{eid}/{k}"])


def pool_sample(pool: SamplePool, example_id: str, rng: np.random.Generator, fresh_seed: np.ndarray) -> np.ndarray:
    """A stored end state with probability ``reuse_prob`` (if any exist), else the fresh seed."""
    # Draw both numbers unconditionally so the stream advances the same way every call.
    u = rng.random()
    pick = rng.random()
    slot = pool.slots.get(example_id)
    if slot and u < pool.reuse_prob:
        return slot[int(pick * len(slot))].copy()
    return np.array(fresh_seed, dtype=np.float32, copy=True)


@dataclass
class StepResult:
    loss: float
    n_iters: int
    final_states: np.ndarray


def train_step_supervised(
    batch: list[tuple[str, np.ndarray, np.ndarray]],
    params: NcaParams,
    opt_state: AdamState,
    rng: np.random.Generator,
    iter_lo: int,
    iter_hi: int,
    lr: float | None = None,
    pool: SamplePool | None = None,
    step: int = 0,
) -> StepResult:
    """One optimisation step on ``[(example_id, start_state, target_rgba), ...]``.

    All samples share one iteration count. Gradients flow through every
    iteration of the rollout, are normalised per tensor and applied with
    Adam; end states are committed to ``pool`` when one is given.
    """
    if not batch:
        raise ConfigError("train_step_supervised: empty batch")
    depth = params.depth
    for eid, state, _ in batch:
        if state.shape[-1] != depth:
            raise ConfigError(f"state for {eid!r} has depth {state.shape[-1]}, NCA expects {depth}")
    n = sample_iterations(rng, iter_lo, iter_hi)
    states = T.Tensor(np.stack([s for _, s, _ in batch]))
    targets = T.Tensor(np.stack([t for _, _, t in batch]))

    with T.Tape() as tape:
        final = nca_rollout(states, params, n).final
        loss = T.mse_loss(T.channels(final, 0, RGBA), targets)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(step, n, value)
    grads = tape.backward(loss, params.tensors())
    adam_step(params.tensors(), grad_normalize(grads), opt_state, lr=lr)

    if pool is not None:
        for (eid, _, _), s in zip(batch, final.data):
            pool.commit(eid, s)
    return StepResult(value, n, final.data)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class Example:
    id: str
    seed: np.ndarray  # (H, W, D)
    target: np.ndarray  # (H, W, 4)


def load_examples(manifest: DatasetManifest, split: str, depth: int) -> list[Example]:
    out = []
    for e in manifest.split(split):
        gt = manifest.load_gt(e)
        if gt is None:
            continue
        out.append(Example(e.id, build_seed(manifest.load_edge(e), depth), gt.astype(np.float32)))
    return out


def rgba_mse(params: NcaParams, examples: list[Example], n: int) -> float:
    """Mean unclamped-RGBA mse over ``examples`` from fresh seeds."""
    seeds = T.Tensor(np.stack([e.seed for e in examples]))
    final = nca_rollout(seeds, params.frozen(), n).final.data
    targets = np.stack([e.target for e in examples])
    return float(np.mean(np.square(final[..., :RGBA] - targets, dtype=np.float64)))


def _save(path, params: NcaParams, opt: AdamState, pool: SamplePool, cfg: TrainConfig, step: int):
    layout, pool_t = pool.to_tensors()
    tensors = ckpt.params_tensors("nca", NcaParams.NAMES, params.tensors())
    tensors.update(ckpt.adam_tensors("adam", NcaParams.NAMES, opt))
    tensors.update(pool_t)
    return ckpt.save(
        path, "nca", tensors, params.depth, params.hidden, opt.step_count,
        step=step, pool=layout, config=asdict(cfg),
    )


@dataclass
class TrainResult:
    params: NcaParams
    final_checkpoint: Path
    metrics_path: Path
    train_losses: list[float]


def train_supervised(
    config: TrainConfig,
    manifest: DatasetManifest,
    out_dir,
    resume: str | Path | None = None,
) -> TrainResult:
    """Run the supervised loop, writing ``metrics.csv`` and checkpoints into ``out_dir``.

    Metrics rows are ``step,split,loss`` with 1-based steps. Checkpoints go to
    ``checkpoint_<step>.ckpt`` every ``checkpoint_every`` steps and
    ``final.ckpt`` at the end. Everything is a pure function of the config,
    the manifest contents and (when resuming) the checkpoint.
    """
    cfg = config.validate()
    T.tune_allocator()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = load_examples(manifest, "train", cfg.depth)
    if not train:
        raise ConfigError("manifest has no train entries with ground truth")
    val = load_examples(manifest, "val", cfg.depth)
    by_id = {e.id: e for e in train}

    params = NcaParams.init(stream(cfg.seed, "init"), cfg.depth, cfg.hidden)
    opt = AdamState.for_params(params.tensors(), lr=cfg.lr)
    pool = SamplePool(cfg.pool_capacity, cfg.reuse_prob)
    start = 0
    metrics_path = out_dir / "metrics.csv"
    if resume is not None:
        c = ckpt.load(resume)
        params = c.nca_params()
        if (params.depth, params.hidden) != (cfg.depth, cfg.hidden):
            raise ConfigError(f"checkpoint is D={params.depth}, F={params.hidden}; config wants D={cfg.depth}, F={cfg.hidden}")
        ckpt.restore_adam(c, "adam", NcaParams.NAMES, opt, c.header["adam_step"])
        pool.restore(c.header.get("pool", []), c.tensors)
        start = int(c.header["step"])
        _truncate_metrics(metrics_path, start)
    else:
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(["step", "split", "loss"])

    losses = []
    final_path = out_dir / "final.ckpt"
    with open(metrics_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        for step in range(start, cfg.steps):
            ids = stream(cfg.seed, "batch", step).integers(len(train), size=cfg.batch_size)
            prng = stream(cfg.seed, "pool", step)
            batch = []
            for i in ids:
                ex = train[int(i)]
                batch.append((ex.id, pool_sample(pool, ex.id, prng, ex.seed), ex.target))
            res = train_step_supervised(
                batch, params, opt, stream(cfg.seed, "iterations", step),
                cfg.iter_lo, cfg.iter_hi, lr=cfg.lr_at(step), pool=pool, step=step + 1,
            )
            losses.append(res.loss)
            writer.writerow([step + 1, "train", repr(res.loss)])
            if val and (step + 1) % cfg.val_every == 0:
                vloss = rgba_mse(params, val, cfg.iter_hi)
                writer.writerow([step + 1, "val", repr(vloss)])
            if (step + 1) % 50 == 0:
                fh.flush()
                log.info("step %d loss %.5f n=%d", step + 1, res.loss, res.n_iters)
            done = step + 1 == cfg.steps
            if (step + 1) % cfg.checkpoint_every == 0 and not done:
                _save(out_dir / f"checkpoint_{step + 1:06d}.ckpt", params, opt, pool, cfg, step + 1)
            if done:
                _save(final_path, params, opt, pool, cfg, step + 1)
    assert set(pool.slots) <= set(by_id)
    return TrainResult(params, final_path, metrics_path, losses)


def _truncate_metrics(path: Path, step: int) -> None:
    """Drop metric rows after ``step`` so a resumed run appends cleanly."""
    if not path.exists():
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(["step", "split", "loss"])
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    kept = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(kept)
