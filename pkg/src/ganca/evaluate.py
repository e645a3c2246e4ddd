"""Evaluation reports, persistence checks, frame export and comparison sheets.

Scores compare RGB composited over white, so supervised and adversarial
models are judged in the same space the discriminator sees.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import DatasetManifest, over_white, save_png
from .errors import ConfigError, UsageError
from .nca import NcaParams, build_seed, extract_rgba, nca_rollout, run
from .tensor import Tensor

DEFAULT_EVAL_ITERS = 60
INK_THRESHOLD = 0.1


def _params(source) -> NcaParams:
    if isinstance(source, NcaParams):
        return source
    return ckpt.load_nca(source)


def composite_mse(rgba: np.ndarray, gt: np.ndarray) -> float:
    """MSE between the over-white RGB of a (clamped) output and of the ground truth."""
    a = over_white(np.clip(rgba, 0, 1))[..., :3]
    b = over_white(gt)[..., :3]
    return float(np.mean(np.square(a - b)))


def ink_mask(rgba: np.ndarray, threshold: float = INK_THRESHOLD) -> np.ndarray:
    """Pixels whose over-white colour differs from white by more than ``threshold`` in some channel."""
    rgb = over_white(np.clip(rgba, 0, 1))[..., :3]
    return np.max(1.0 - rgb, axis=-1) > threshold


def edge_coverage(edge: np.ndarray, rgba: np.ndarray, threshold: float = INK_THRESHOLD) -> float:
    """Fraction of edge pixels that end up covered by non-background output."""
    e = np.asarray(edge) > 0.5
    if not e.any():
        return 1.0
    return float(np.mean(ink_mask(rgba, threshold)[e]))


def generate(params: NcaParams, edges: np.ndarray, n: int) -> np.ndarray:
    """Unclamped RGBA after ``n`` iterations from each edge seed; ``edges`` is (B, H, W)."""
    seeds = np.stack([build_seed(e, params.depth) for e in edges])
    return run(seeds, params, n)[..., :4]


@dataclass
class EvalReport:
    entries: list[dict]
    aggregates: dict[str, dict]
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"entries": self.entries, "aggregates": self.aggregates, "config": self.config}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        return path

    def save_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "split", "mse", "n_iters"])
            for e in self.entries:
                w.writerow([e["id"], e["split"], "" if e["mse"] is None else repr(e["mse"]), e["n_iters"]])
        return path

    def split_mean(self, split: str) -> float:
        return self.aggregates[split]["mean"]


def aggregate(entries: list[dict]) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for split in dict.fromkeys(e["split"] for e in entries):
        vals = [e["mse"] for e in entries if e["split"] == split and e["mse"] is not None]
        n_all = sum(1 for e in entries if e["split"] == split)
        if vals:
            out[split] = {"mean": float(np.mean(vals)), "min": min(vals), "max": max(vals), "count": n_all}
        else:
            out[split] = {"mean": None, "min": None, "max": None, "count": n_all}
    return out


def eval_dataset(
    checkpoint,
    manifest: DatasetManifest,
    n_iters: int = DEFAULT_EVAL_ITERS,
    depth: int | None = None,
    outputs: dict | None = None,
) -> EvalReport:
    """Roll out every manifest entry from a fresh seed and score it against ground truth.

    OOD entries without ground truth get ``mse = None``. Pass a dict as
    ``outputs`` to collect the clamped RGBA image of each entry by id.
    """
    params = _params(checkpoint)
    if depth is not None and depth != params.depth:
        raise ConfigError(f"checkpoint depth {params.depth} does not match configured depth {depth}")
    if n_iters < 0:
        raise UsageError(f"n_iters must be >= 0, got {n_iters}")
    if not manifest.entries:
        return EvalReport([], {}, {"n_iters": n_iters})
    edges = np.stack([manifest.load_edge(e) for e in manifest.entries])
    rgba = np.clip(generate(params, edges, n_iters), 0, 1)
    entries = []
    for e, out in zip(manifest.entries, rgba):
        gt = manifest.load_gt(e)
        mse = None if gt is None else composite_mse(out, gt)
        entries.append({"id": e.id, "split": e.split, "mse": mse, "n_iters": n_iters})
        if outputs is not None:
            outputs[e.id] = out
    config = {"n_iters": n_iters, "depth": params.depth, "hidden": params.hidden, "size": list(manifest.size)}
    return EvalReport(entries, aggregate(entries), config)


def baseline_mse(manifest: DatasetManifest, entries=None) -> dict[str, float]:
    """No-op score per entry: seed RGBA against the ground truth."""
    out = {}
    for e in entries if entries is not None else manifest.entries:
        gt = manifest.load_gt(e)
        if gt is not None:
            edge = manifest.load_edge(e)
            out[e.id] = composite_mse(np.repeat(edge[..., None], 4, axis=-1), gt)
    return out


def persistence_check(checkpoint, edge: np.ndarray, target: np.ndarray, n: int, k: int) -> float:
    """``mse(S_{n+k}) / max(mse(S_n), 1e-8)`` from the edge seed; 1.0 when ``k == 0``."""
    if n < 1 or k < 0:
        raise UsageError(f"persistence_check needs n >= 1 and k >= 0, got n={n}, k={k}")
    if k == 0:
        return 1.0
    params = _params(checkpoint)
    s_n = run(build_seed(edge, params.depth), params, n)
    s_nk = run(s_n, params, k)
    return composite_mse(extract_rgba(s_nk), target) / max(composite_mse(extract_rgba(s_n), target), 1e-8)


def export_frames(checkpoint, edge: np.ndarray, n: int, out_dir) -> list[Path]:
    """Write ``frame_0000.png`` (the seed) through ``frame_<n>.png``."""
    params = _params(checkpoint)
    out_dir = Path(out_dir)
    seed = build_seed(edge, params.depth)
    states = [Tensor(seed)]
    if n > 0:
        states = nca_rollout(Tensor(seed), params.frozen(), n, record=True).states
    return [save_png(extract_rgba(s), out_dir / f"frame_{k:04d}.png") for k, s in enumerate(states)]


def edge_tile(edge: np.ndarray) -> np.ndarray:
    """Edges as dark strokes on white, opaque RGBA."""
    e = np.asarray(edge, dtype=np.float64)
    g = 1.0 - e
    return np.stack([g, g, g, np.ones_like(g)], axis=-1)


def comparison_row(edge, ganca_rgba, nca_rgba, gt=None) -> np.ndarray:
    """Tiles left to right: edge input, GANCA output, NCA output, ground truth (if any)."""
    tiles = [edge_tile(edge), over_white(np.clip(ganca_rgba, 0, 1)), over_white(np.clip(nca_rgba, 0, 1))]
    if gt is not None:
        tiles.append(over_white(gt))
    return np.concatenate(tiles, axis=1)


def export_comparison(checkpoints: dict, manifest: DatasetManifest, out_dir, n_iters: int = DEFAULT_EVAL_ITERS) -> list[Path]:
    """One contact-sheet PNG per manifest entry, named ``<split>_<id>.png``."""
    missing = {"nca", "ganca"} - set(checkpoints)
    if missing:
        raise UsageError(f"export_comparison needs checkpoints for {sorted(missing)}")
    nca_p = _params(checkpoints["nca"])
    gan_p = _params(checkpoints["ganca"])
    out_dir = Path(out_dir)
    edges = np.stack([manifest.load_edge(e) for e in manifest.entries])
    nca_out = generate(nca_p, edges, n_iters)
    gan_out = generate(gan_p, edges, n_iters)
    paths = []
    for i, e in enumerate(manifest.entries):
        row = comparison_row(edges[i], gan_out[i], nca_out[i], manifest.load_gt(e))
        paths.append(save_png(row, out_dir / f"{e.split}_{e.id}.png"))
    return paths
