"""Image I/O, Canny edges, dataset manifests and synthetic OOD edges."""

from __future__ import annotations

import json
import math
import os
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ConfigError, ImageIOError

EDGE_SUFFIX = ".edge.png"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "ood")
DEFAULT_SIZE = (32, 32)
CANNY_SIGMA, CANNY_LOW, CANNY_HIGH = 1.4, 0.1, 0.2

LUMA = np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------------------
# PNG I/O


def load_png(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Load an image as straight-alpha RGBA floats in [0, 1], shape (H, W, 4).

    With ``size=(H, W)`` the image is box-filtered to that resolution
    (in premultiplied space, so transparent pixels do not bleed colour).
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            im = im.convert("RGBA")
    except FileNotFoundError:
        raise ImageIOError(path, "file not found") from None
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageIOError(path, f"cannot decode image ({exc})") from None
    if size is not None and (im.height, im.width) != tuple(size):
        h, w = size
        im = im.convert("RGBa").resize((w, h), Image.BOX).convert("RGBA")
    return np.asarray(im, dtype=np.float64) / 255.0


def image_size(path) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            return im.height, im.width
    except FileNotFoundError:
        raise ImageIOError(path, "file not found") from None
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageIOError(path, f"cannot decode image ({exc})") from None


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(pixels: np.ndarray, path) -> Path:
    """Write (H, W, 4) RGBA, (H, W, 3) RGB or (H, W) gray floats as an 8-bit RGBA PNG."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = np.stack([pixels] * 3 + [np.ones_like(pixels)], axis=-1)
    elif pixels.ndim == 3 and pixels.shape[-1] == 3:
        pixels = np.concatenate([pixels, np.ones(pixels.shape[:2] + (1,))], axis=-1)
    if pixels.ndim != 3 or pixels.shape[-1] != 4:
        raise ConfigError(f"save_png: unsupported pixel array shape {pixels.shape}")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(pixels), "RGBA").save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(path, f"cannot write PNG ({exc})") from None
    return path


def grayscale(rgba: np.ndarray) -> np.ndarray:
    """Alpha-weighted luminance; fully transparent pixels read as 0."""
    rgba = np.asarray(rgba, dtype=np.float64)
    return (rgba[..., :3] @ LUMA) * rgba[..., 3]


def load_edge(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Load an edge PNG as a binary {0, 1} map (bright, opaque strokes are edges)."""
    return (grayscale(load_png(path, size)) >= 0.5).astype(np.float64)


def save_edge(edge: np.ndarray, path) -> Path:
    return save_png(np.asarray(edge, dtype=np.float64), path)


def over_white(rgba: np.ndarray) -> np.ndarray:
    """Composite straight-alpha RGBA over white; alpha becomes 1."""
    rgba = np.asarray(rgba, dtype=np.float64)
    out = np.empty_like(rgba)
    a = rgba[..., 3:4]
    out[..., :3] = (rgba[..., :3] - 1.0) * a + 1.0
    out[..., 3] = 1.0
    return out


# ---------------------------------------------------------------------------
# Canny


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    h, w = img.shape
    p = np.pad(img, r, mode="edge")
    rows = sum(k[i] * p[:, i : i + w] for i in range(len(k)))
    return sum(k[i] * rows[i : i + h, :] for i in range(len(k)))


def _sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = img.shape
    p = np.pad(img, 1, mode="edge")

    def at(dy, dx):
        return p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    gx = (at(-1, 1) + 2 * at(0, 1) + at(1, 1)) - (at(-1, -1) + 2 * at(0, -1) + at(1, -1))
    gy = (at(1, -1) + 2 * at(1, 0) + at(1, 1)) - (at(-1, -1) + 2 * at(-1, 0) + at(-1, 1))
    return gx, gy


# Neighbour offsets (dy, dx) for the four gradient-direction bins; y points down.
_NMS_OFFSETS = {0: (0, 1), 45: (1, 1), 90: (1, 0), 135: (1, -1)}


def canny(
    gray: np.ndarray,
    sigma: float = CANNY_SIGMA,
    low: float = CANNY_LOW,
    high: float = CANNY_HIGH,
) -> np.ndarray:
    """Classic Canny edge detector; returns a {0, 1} float map.

    ``low`` and ``high`` are fractions of the maximum gradient magnitude.
    Gradients are rounded to 1e-9 so mirror-symmetric inputs produce exact
    ties, which non-maximum suppression then breaks toward the cell on the
    negative side of the gradient direction.
    """
    if not (0 < low < high <= 1):
        raise ConfigError(f"canny thresholds must satisfy 0 < low < high <= 1, got low={low}, high={high}")
    if not sigma > 0:
        raise ConfigError(f"canny sigma must be positive, got {sigma}")
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ConfigError(f"canny expects a 2-D image, got shape {gray.shape}")

    gx, gy = _sobel(_blur(gray, sigma))
    gx, gy = np.round(gx, 9), np.round(gy, 9)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return np.zeros_like(gray)

    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    bins = np.select(
        [(angle < 22.5) | (angle >= 157.5), angle < 67.5, angle < 112.5],
        [0, 45, 90],
        default=135,
    )
    h, w = gray.shape
    mp = np.pad(mag, 1)
    keep = np.zeros_like(gray, dtype=bool)
    for b, (dy, dx) in _NMS_OFFSETS.items():
        ahead = mp[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        behind = mp[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        keep |= (bins == b) & (mag > behind) & (mag >= ahead)
    nms = np.where(keep, mag, 0.0)

    strong = nms >= high * peak
    weak = nms >= low * peak
    labels, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    hit = np.unique(labels[strong])
    hit = hit[hit > 0]
    return np.isin(labels, hit).astype(np.float64)


def edges_of(rgba: np.ndarray, sigma=CANNY_SIGMA, low=CANNY_LOW, high=CANNY_HIGH) -> np.ndarray:
    return canny(grayscale(rgba), sigma, low, high)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Entry:
    id: str
    edge: str
    gt: str | None
    split: str


@dataclass
class DatasetManifest:
    entries: list[Entry]
    size: tuple[int, int] = DEFAULT_SIZE
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[Entry]:
        return [e for e in self.entries if e.split == name]

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load_edge(self, entry: Entry) -> np.ndarray:
        return load_edge(self.path(entry.edge), self.size)

    def load_gt(self, entry: Entry) -> np.ndarray | None:
        if entry.gt is None:
            return None
        return load_png(self.path(entry.gt), self.size)

    def to_json(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "size": list(self.size),
            "entries": [{"id": e.id, "gt": e.gt, "edge": e.edge, "split": e.split} for e in self.entries],
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        root = path.parent.resolve()
        rel = DatasetManifest([_relative(e, root, self.root) for e in self.entries], self.size, root)
        path.write_text(json.dumps(rel.to_json(), indent=2) + "\n")
        self.root = root
        self.entries = rel.entries
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from None
        if doc.get("version") != MANIFEST_VERSION:
            raise ConfigError(f"manifest {path}: unsupported version {doc.get('version')!r}")
        entries = []
        for raw in doc.get("entries", []):
            if raw.get("split") not in SPLITS:
                raise ConfigError(f"manifest {path}: entry {raw.get('id')!r} has bad split {raw.get('split')!r}")
            entries.append(Entry(raw["id"], raw["edge"], raw.get("gt"), raw["split"]))
        return cls(entries, tuple(doc["size"]), path.parent.resolve())


def _relative(e: Entry, root: Path, old_root: Path) -> Entry:
    def rel(p):
        if p is None:
            return None
        p = Path(p)
        if not p.is_absolute():
            p = old_root / p
        return Path(os.path.relpath(p.resolve(), root)).as_posix()

    return Entry(e.id, rel(e.edge), rel(e.gt), e.split)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.glob("*.png") if not p.name.endswith(EDGE_SUFFIX))


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def build_manifest(
    gt_dir,
    val_fraction: float = 0.0,
    rng=0,
    *,
    edge_dir=None,
    size: tuple[int, int] = DEFAULT_SIZE,
    sigma: float = CANNY_SIGMA,
    low: float = CANNY_LOW,
    high: float = CANNY_HIGH,
    force: bool = False,
    ood_dir=None,
) -> DatasetManifest:
    """Compute (or reuse cached) edge maps for every PNG in ``gt_dir`` and split them.

    Edges are written as ``<id>.edge.png`` into ``edge_dir`` (default: next to
    the ground truth) and reused on later calls unless ``force`` is set.
    ``ood_dir`` may hold extra edge PNGs without ground truth.
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in [0, 1), got {val_fraction}")
    paths = list_images(gt_dir)
    if not paths:
        raise ConfigError(f"no images found in {gt_dir}")
    if len(paths) < 2:
        raise ConfigError(f"need at least 2 images in {gt_dir}, found {len(paths)}")

    sizes = {p: image_size(p) for p in paths}
    common, _ = Counter(sizes.values()).most_common(1)[0]
    offenders = [f"{p.name} {s[1]}x{s[0]}" for p, s in sizes.items() if s != common]
    if offenders:
        raise ConfigError(
            f"images must share one size (most are {common[1]}x{common[0]}); offenders: " + ", ".join(offenders)
        )

    edge_dir = Path(edge_dir) if edge_dir is not None else Path(gt_dir)
    entries = []
    for p in paths:
        eid = p.stem
        epath = edge_dir / (eid + EDGE_SUFFIX)
        if force or not epath.exists():
            save_edge(edges_of(load_png(p, size), sigma, low, high), epath)
        entries.append(Entry(eid, str(epath.resolve()), str(p.resolve()), "train"))

    n_val = int(round(val_fraction * len(entries)))
    order = _rng(rng).permutation(len(entries))
    for i in order[:n_val]:
        entries[i].split = "val"

    if ood_dir is not None:
        for p in list_images(ood_dir):
            entries.append(Entry("ood_" + p.stem, str(p.resolve()), None, "ood"))
    return DatasetManifest(entries, tuple(size), Path.cwd())


# ---------------------------------------------------------------------------
# synthetic out-of-distribution edges


def _smooth_offsets(rng: np.random.Generator, n: int, amplitude: int) -> np.ndarray:
    noise = ndimage.gaussian_filter1d(rng.normal(size=n), sigma=max(n / 8.0, 1.0), mode="wrap")
    peak = np.abs(noise).max()
    if peak == 0:
        return np.zeros(n, dtype=int)
    return np.round(noise / peak * amplitude).astype(int)


def perturb_edges(edge: np.ndarray, rng, strength: float) -> np.ndarray:
    """Make an edge map look hand drawn: wobble, uneven line width, small gaps.

    Rows and columns are displaced by smooth random offsets of at most
    ``ceil(3 * strength)`` pixels, a few random stretches of line are
    thickened, and short runs totalling at most ``5 * strength`` percent of the
    edge pixels are erased.
    """
    if not 0.0 <= strength <= 1.0:
        raise ConfigError(f"strength must be in [0, 1], got {strength}")
    edge = np.asarray(edge, dtype=np.float64) > 0.5
    if strength == 0 or not edge.any():
        return edge.astype(np.float64)
    rng = _rng(rng)
    h, w = edge.shape
    amp = int(math.ceil(3 * strength))

    # smooth displacement: each row slides horizontally, then each column vertically
    row_shift = _smooth_offsets(rng, h, amp)
    col_shift = _smooth_offsets(rng, w, amp)
    ys, xs = np.mgrid[0:h, 0:w]
    src_x = xs - row_shift[:, None]
    shifted = np.where((src_x >= 0) & (src_x < w), edge[ys, np.clip(src_x, 0, w - 1)], False)
    src_y = ys - col_shift[None, :]
    out = np.where((src_y >= 0) & (src_y < h), shifted[np.clip(src_y, 0, h - 1), xs], False)

    # line-width variation on a few random stretches
    pts = np.argwhere(out)
    n_thick = int(rng.binomial(max(1, round(4 * strength)), 0.5)) + 1
    for _ in range(n_thick):
        if len(pts) == 0:
            break
        cy, cx = pts[rng.integers(len(pts))]
        window = np.zeros_like(out)
        window[max(cy - 2, 0) : cy + 3, max(cx - 2, 0) : cx + 3] = True
        out |= ndimage.binary_dilation(out & window, structure=ndimage.generate_binary_structure(2, 1))

    # erase short runs
    budget = int(math.floor(0.05 * strength * out.sum()))
    while budget > 0:
        pts = np.argwhere(out)
        if len(pts) == 0:
            break
        start = tuple(pts[rng.integers(len(pts))])
        run_len = int(rng.integers(1, 4))
        queue, removed = deque([start]), 0
        while queue and removed < min(run_len, budget):
            y, x = queue.popleft()
            if not out[y, x]:
                continue
            out[y, x] = False
            removed += 1
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and out[yy, xx]:
                        queue.append((yy, xx))
        budget -= removed
    return out.astype(np.float64)


def add_perturbed_ood(
    manifest: DatasetManifest,
    out_dir,
    strength: float = 0.5,
    seed: int = 0,
    sources: list[Entry] | None = None,
) -> list[Entry]:
    """Append one perturbed-edge OOD entry per source entry (default: all train/val)."""
    out_dir = Path(out_dir)
    sources = sources if sources is not None else [e for e in manifest.entries if e.split != "ood"]
    added = []
    for i, src in enumerate(sources):
        rng = np.random.default_rng([seed, i])
        edge = perturb_edges(manifest.load_edge(src), rng, strength)
        path = save_edge(edge, out_dir / f"ood_{src.id}{EDGE_SUFFIX}")
        added.append(Entry(f"ood_{src.id}", str(path.resolve()), None, "ood"))
    manifest.entries.extend(added)
    return added
