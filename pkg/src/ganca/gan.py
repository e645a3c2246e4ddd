"""Adversarial training of the NCA generator (GANCA).

The generator is the NCA itself, rolled out for a random number of
iterations from an edge seed. The discriminator (or WGAN critic) is a small
strided convnet that only sees RGBA composited over white.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import DatasetManifest, edges_of, over_white
from .errors import ConfigError, TrainingDiverged
from .nca import RGBA, NcaParams, build_seed, nca_rollout, sample_iterations
from .optim import AdamState, adam_step, grad_normalize
from .rng import stream
from .tensor import Tensor

log = logging.getLogger(__name__)

DISC_WIDTHS = (RGBA, 32, 64, 128, 128)
LEAK = 0.2
PROB_EPS = 1e-7
INIT_STD = 0.02
LOSS_KINDS = ("bce_smoothed", "wgan")


@dataclass
class DiscParams:
    convs: list[tuple[Tensor, Tensor]]  # four stride-2 3x3 stages
    w_lin: Tensor  # (N, 1)
    b_lin: Tensor  # (1,)
    size: tuple[int, int] | None = None  # input resolution the head was built for

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in self.convs:
            out += [w, b]
        return out + [self.w_lin, self.b_lin]

    def names(self) -> list[str]:
        out = []
        for i in range(len(self.convs)):
            out += [f"conv{i}/w", f"conv{i}/b"]
        return out + ["lin/w", "lin/b"]

    def frozen(self) -> "DiscParams":
        return DiscParams.from_arrays([t.data for t in self.tensors()], requires_grad=False, size=self.size)

    def checksum(self) -> float:
        return float(sum(np.sum(t.data, dtype=np.float64) for t in self.tensors()))

    @staticmethod
    def flat_size(size: tuple[int, int]) -> int:
        h, w = size
        for _ in range(len(DISC_WIDTHS) - 1):
            h, w = (h + 1) // 2, (w + 1) // 2
        return h * w * DISC_WIDTHS[-1]

    @classmethod
    def init(cls, rng: np.random.Generator, size: tuple[int, int]) -> "DiscParams":
        """DCGAN-style N(0, 0.02) weights and zero biases, so initial scores sit near 0."""
        arrays = []
        for cin, cout in zip(DISC_WIDTHS[:-1], DISC_WIDTHS[1:]):
            arrays += [rng.normal(0.0, INIT_STD, size=(3, 3, cin, cout)), np.zeros(cout)]
        arrays += [rng.normal(0.0, INIT_STD, size=(cls.flat_size(size), 1)), np.zeros(1)]
        return cls.from_arrays(arrays, size=size)

    @classmethod
    def zeros(cls, size: tuple[int, int]) -> "DiscParams":
        p = cls.init(np.random.default_rng(0), size)
        for t in p.tensors():
            t.data[...] = 0
        return p

    @classmethod
    def from_arrays(cls, arrays, requires_grad: bool = True, size=None) -> "DiscParams":
        ts = [Tensor(a, requires_grad) for a in arrays]
        convs = [(ts[2 * i], ts[2 * i + 1]) for i in range(len(DISC_WIDTHS) - 1)]
        return cls(convs, ts[-2], ts[-1], None if size is None else tuple(int(v) for v in size))


def discriminator_forward(image: Tensor, params: DiscParams) -> Tensor:
    """Raw score per image, shape ``(B, 1)``. Apply :func:`tensor.sigmoid` for probabilities."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.data.ndim == 3:
        image = Tensor(image.data[None]) if not image.requires_grad else _unsqueeze(image)
    if image.shape[-1] != RGBA:
        raise ConfigError(f"discriminator expects RGBA input, got {image.shape[-1]} channels")
    hw = tuple(image.shape[1:3])
    if (params.size is not None and hw != params.size) or DiscParams.flat_size(hw) != params.w_lin.shape[0]:
        raise ConfigError(f"image size {image.shape[1:3]} does not match the discriminator's configured resolution")
    h = image
    for w, b in params.convs:
        h = T.leaky_relu(T.conv3x3(h, w, b, stride=2), LEAK)
    return T.linear(T.flatten(h), params.w_lin, params.b_lin)


def _unsqueeze(x: Tensor) -> Tensor:
    shape = x.shape
    return T._result("unsqueeze", x.data[None], (x,), lambda g: (g.reshape(shape),))


def add_instance_noise(image: np.ndarray, rng: np.random.Generator, sigma: float) -> np.ndarray:
    """``image + N(0, sigma^2)`` per element, unclamped."""
    if sigma < 0:
        raise ConfigError(f"noise sigma must be >= 0, got {sigma}")
    image = np.asarray(image, dtype=np.float32)
    if sigma == 0:
        return image.copy()
    return (image + rng.normal(0.0, sigma, size=image.shape)).astype(np.float32)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.atleast_1d(np.asarray(x, dtype=np.float32)))


def _bce(p: Tensor, label: float) -> Tensor:
    """Mean of ``-[label * log p + (1 - label) * log(1 - p)]``."""
    p = T.clip(p, PROB_EPS, 1 - PROB_EPS)
    terms = []
    if label != 0:
        terms.append(T.scale(T.log(p), -label))
    if label != 1:
        terms.append(T.scale(T.log(T.shift(T.scale(p, -1.0), 1.0)), -(1.0 - label)))
    total = terms[0] if len(terms) == 1 else T.add(*terms)
    return T.mean_all(total)


def gan_losses_bce(d_real, d_fake, label_real: float = 0.9, label_fake: float = 0.1) -> tuple[Tensor, Tensor]:
    """Label-smoothed discriminator loss and non-saturating generator loss.

    ``d_real`` and ``d_fake`` are probabilities; they are clamped into
    ``[1e-7, 1 - 1e-7]`` before taking logs.
    """
    d_real, d_fake = _t(d_real), _t(d_fake)
    loss_d = T.add(_bce(d_real, label_real), _bce(d_fake, label_fake))
    loss_g = _bce(d_fake, 1.0)
    return loss_d, loss_g


def gan_losses_wgan(c_real, c_fake) -> tuple[Tensor, Tensor]:
    """Critic loss ``E[c_fake] - E[c_real]`` and generator loss ``-E[c_fake]``."""
    c_real, c_fake = _t(c_real), _t(c_fake)
    loss_c = T.sub(T.mean_all(c_fake), T.mean_all(c_real))
    loss_g = T.scale(T.mean_all(c_fake), -1.0)
    return loss_c, loss_g


def clip_weights(params: DiscParams, c: float) -> None:
    for t in params.tensors():
        np.clip(t.data, -c, c, out=t.data)


# ---------------------------------------------------------------------------


@dataclass
class GanConfig:
    loss_kind: str = "bce_smoothed"
    noise_sigma: float = 0.1
    noise_sigma_final: float | None = None  # default: noise_sigma / 5
    label_real: float = 0.9
    label_fake: float = 0.1
    n_critic: int = 5
    clip_c: float = 0.01
    iter_lo: int = 50
    iter_hi: int = 60
    steps: int = 10000
    batch_size: int = 16
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1_g: float = 0.5
    beta1_d: float = 0.5
    depth: int = 16
    hidden: int = 128
    seed: int = 0
    checkpoint_every: int = 1000

    def errors(self) -> list[str]:
        bad = []
        if self.loss_kind not in LOSS_KINDS:
            bad.append(f"loss_kind must be one of {LOSS_KINDS} (got {self.loss_kind!r})")
        if self.noise_sigma < 0:
            bad.append(f"noise_sigma must be >= 0 (got {self.noise_sigma})")
        if self.noise_sigma_final is not None and self.noise_sigma_final < 0:
            bad.append(f"noise_sigma_final must be >= 0 (got {self.noise_sigma_final})")
        if not 0 <= self.label_fake < self.label_real <= 1:
            bad.append(f"need 0 <= label_fake < label_real <= 1 (got {self.label_fake}, {self.label_real})")
        if self.n_critic < 1:
            bad.append(f"n_critic must be >= 1 (got {self.n_critic})")
        if not self.clip_c > 0:
            bad.append(f"clip_c must be positive (got {self.clip_c})")
        if not 1 <= self.iter_lo <= self.iter_hi:
            bad.append(f"need 1 <= iter_lo <= iter_hi (got {self.iter_lo}, {self.iter_hi})")
        if self.steps < 1 or self.batch_size < 1:
            bad.append("steps and batch_size must be >= 1")
        if not (self.lr_g > 0 and self.lr_d > 0):
            bad.append("lr_g and lr_d must be positive")
        if self.depth < 5 or self.hidden < 1:
            bad.append("depth must be >= 5 and hidden >= 1")
        return bad

    def validate(self) -> "GanConfig":
        bad = self.errors()
        if bad:
            raise ConfigError("invalid GAN config: " + "; ".join(bad))
        return self

    def sigma_at(self, step: int) -> float:
        """Linearly annealed instance-noise level for 0-based ``step``."""
        end = self.noise_sigma / 5 if self.noise_sigma_final is None else self.noise_sigma_final
        frac = step / (self.steps - 1) if self.steps > 1 else 1.0
        return self.noise_sigma + (end - self.noise_sigma) * frac


@dataclass
class GanStep:
    loss_g: float
    loss_d: float
    n_iters: int


def ganca_train_step(
    real_batch: np.ndarray,
    gen: NcaParams,
    disc: DiscParams,
    opt_g: AdamState,
    opt_d: AdamState,
    config: GanConfig,
    rng: np.random.Generator,
    edges: np.ndarray | None = None,
    sigma: float | None = None,
    step: int = 0,
) -> GanStep:
    """One GANCA update: discriminator/critic first, then the generator.

    ``real_batch`` is ``(B, H, W, 4)`` straight-alpha RGBA. Seeds come from
    ``edges`` if given, otherwise from Canny edges of the real images.
    """
    real_batch = np.asarray(real_batch, dtype=np.float32)
    if real_batch.ndim != 4 or len(real_batch) == 0:
        raise ConfigError(f"real_batch must be a non-empty (B, H, W, 4) array, got {real_batch.shape}")
    sigma = config.noise_sigma if sigma is None else sigma
    if edges is None:
        edges = np.stack([edges_of(im) for im in real_batch])
    seeds = Tensor(np.stack([build_seed(e, gen.depth) for e in edges]))
    n = sample_iterations(rng, config.iter_lo, config.iter_hi)
    reals = over_white(real_batch).astype(np.float32)
    wgan = config.loss_kind == "wgan"

    # generator rollout, kept on tape_g for the generator update below
    with T.Tape() as tape_g:
        fake = T.over_white(T.channels(nca_rollout(seeds, gen, n).final, 0, RGBA))
    fake_const = fake.data

    # discriminator / critic
    d_losses = []
    for _ in range(config.n_critic if wgan else 1):
        real_in = Tensor(add_instance_noise(reals, rng, sigma))
        fake_in = Tensor(add_instance_noise(fake_const, rng, sigma))
        with T.Tape() as tape_d:
            s_real = discriminator_forward(real_in, disc)
            s_fake = discriminator_forward(fake_in, disc)
            if wgan:
                loss_d, _ = gan_losses_wgan(s_real, s_fake)
            else:
                loss_d, _ = gan_losses_bce(T.sigmoid(s_real), T.sigmoid(s_fake), config.label_real, config.label_fake)
        d_val = loss_d.item()
        if not math.isfinite(d_val):
            raise TrainingDiverged(step, n, d_val, "loss_d")
        d_losses.append(d_val)
        grads = tape_d.backward(loss_d, disc.tensors())
        adam_step(disc.tensors(), grads, opt_d)
        if wgan:
            clip_weights(disc, config.clip_c)

    # generator through the full rollout, against the updated (frozen) discriminator
    frozen = disc.frozen()
    noise = add_instance_noise(np.zeros_like(fake_const), rng, sigma)
    with tape_g:
        s_fake = discriminator_forward(T.add(fake, Tensor(noise)), frozen)
        if wgan:
            _, loss_g = gan_losses_wgan(np.zeros(1, np.float32), s_fake)
        else:
            _, loss_g = gan_losses_bce(np.full(1, 0.5, np.float32), T.sigmoid(s_fake))
    g_val = loss_g.item()
    if not math.isfinite(g_val):
        raise TrainingDiverged(step, n, g_val, "loss_g")
    grads = tape_g.backward(loss_g, gen.tensors())
    adam_step(gen.tensors(), grad_normalize(grads), opt_g)
    return GanStep(g_val, float(np.mean(d_losses)), n)


# ---------------------------------------------------------------------------
# training loop


def _save(path, gen, disc, opt_g, opt_d, cfg, step, size):
    tensors = ckpt.params_tensors("nca", NcaParams.NAMES, gen.tensors())
    tensors.update(ckpt.params_tensors("disc", disc.names(), disc.tensors()))
    tensors.update(ckpt.adam_tensors("adam_g", NcaParams.NAMES, opt_g))
    tensors.update(ckpt.adam_tensors("adam_d", disc.names(), opt_d))
    return ckpt.save(
        path, "ganca", tensors, gen.depth, gen.hidden, opt_g.step_count,
        step=step, adam_step_d=opt_d.step_count, size=list(size), config=asdict(cfg),
    )


def load_disc(c: ckpt.Checkpoint) -> DiscParams:
    size = tuple(c.header["size"])
    names = DiscParams.zeros(size).names()
    return DiscParams.from_arrays([c.tensors["disc/" + n] for n in names], size=size)


@dataclass
class GanResult:
    gen: NcaParams
    disc: DiscParams
    final_checkpoint: Path
    metrics_path: Path
    history: list[GanStep]


def train_ganca(config: GanConfig, manifest: DatasetManifest, out_dir, resume=None) -> GanResult:
    """Adversarial loop over the manifest's train split; writes ``metrics.csv`` (step,loss_g,loss_d)."""
    cfg = config.validate()
    T.tune_allocator()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = [e for e in manifest.split("train") if e.gt is not None]
    if not entries:
        raise ConfigError("manifest has no train entries with ground truth")
    reals = np.stack([manifest.load_gt(e) for e in entries]).astype(np.float32)
    edges = np.stack([manifest.load_edge(e) for e in entries])
    size = tuple(manifest.size)

    gen = NcaParams.init(stream(cfg.seed, "init"), cfg.depth, cfg.hidden)
    disc = DiscParams.init(stream(cfg.seed, "disc_init"), size)
    opt_g = AdamState.for_params(gen.tensors(), lr=cfg.lr_g, beta1=cfg.beta1_g)
    opt_d = AdamState.for_params(disc.tensors(), lr=cfg.lr_d, beta1=cfg.beta1_d)
    start = 0
    metrics_path = out_dir / "metrics.csv"
    if resume is not None:
        c = ckpt.load(resume)
        if c.kind != "ganca":
            raise ConfigError(f"{resume} is a {c.kind!r} checkpoint, expected 'ganca'")
        gen = c.nca_params()
        disc = load_disc(c)
        ckpt.restore_adam(c, "adam_g", NcaParams.NAMES, opt_g, c.header["adam_step"])
        ckpt.restore_adam(c, "adam_d", disc.names(), opt_d, c.header["adam_step_d"])
        start = int(c.header["step"])
        with open(metrics_path, newline="") as fh:
            rows = [r for r in csv.reader(fh)]
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerows([rows[0]] + [r for r in rows[1:] if int(r[0]) <= start])
    else:
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(["step", "loss_g", "loss_d"])

    history = []
    final_path = out_dir / "final.ckpt"
    with open(metrics_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        for step in range(start, cfg.steps):
            idx = stream(cfg.seed, "batch", step).integers(len(entries), size=cfg.batch_size)
            res = ganca_train_step(
                reals[idx], gen, disc, opt_g, opt_d, cfg, stream(cfg.seed, "gan", step),
                edges=edges[idx], sigma=cfg.sigma_at(step), step=step + 1,
            )
            history.append(res)
            writer.writerow([step + 1, repr(res.loss_g), repr(res.loss_d)])
            if (step + 1) % 50 == 0:
                fh.flush()
                log.info("step %d loss_g %.4f loss_d %.4f n=%d", step + 1, res.loss_g, res.loss_d, res.n_iters)
            done = step + 1 == cfg.steps
            if (step + 1) % cfg.checkpoint_every == 0 and not done:
                _save(out_dir / f"checkpoint_{step + 1:06d}.ckpt", gen, disc, opt_g, opt_d, cfg, step + 1, size)
            if done:
                _save(final_path, gen, disc, opt_g, opt_d, cfg, step + 1, size)
    return GanResult(gen, disc, final_path, metrics_path, history)
