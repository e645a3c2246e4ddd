"""Procedural emoji-style faces used as a stand-in training set.

Each face is a filled disc with an outline, two eyes, a mouth and optional
cheeks or brows, drawn at 8x supersampling and box-filtered down.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import save_png

SKINS = [
    (255, 204, 77),
    (255, 179, 64),
    (255, 221, 110),
    (250, 160, 90),
    (140, 200, 90),
    (120, 170, 240),
    (235, 120, 120),
]
INK = (70, 45, 20)
EYE_STYLES = ("dot", "oval", "closed", "wide", "wink", "cross")
MOUTH_STYLES = ("smile", "frown", "open", "flat", "grin", "o")


def draw_face(rng: np.random.Generator, size: int = 32, supersample: int = 8) -> np.ndarray:
    """Render one random face as (size, size, 4) straight-alpha RGBA floats."""
    s = size * supersample
    im = Image.new("RGBA", (s, s), (0, 0, 0, 0))
    d = ImageDraw.Draw(im)
    u = s / 32.0  # one low-res pixel

    skin = SKINS[rng.integers(len(SKINS))]
    r = s * rng.uniform(0.36, 0.44)
    cx = s / 2 + rng.uniform(-1, 1) * u
    cy = s / 2 + rng.uniform(-1, 1) * u
    squash = rng.uniform(0.9, 1.08)
    d.ellipse(
        [cx - r, cy - r * squash, cx + r, cy + r * squash],
        fill=skin + (255,),
        outline=INK + (255,),
        width=int(round(u)),
    )

    eye_style = EYE_STYLES[rng.integers(len(EYE_STYLES))]
    eye_dx = r * rng.uniform(0.32, 0.45)
    eye_y = cy - r * rng.uniform(0.15, 0.32)
    eye_r = r * rng.uniform(0.09, 0.15)
    for side in (-1, 1):
        ex = cx + side * eye_dx
        style = eye_style
        if style == "wink" and side == 1:
            style = "closed"
        elif style == "wink":
            style = "dot"
        if style == "dot":
            d.ellipse([ex - eye_r, eye_y - eye_r, ex + eye_r, eye_y + eye_r], fill=INK + (255,))
        elif style == "oval":
            d.ellipse([ex - eye_r * 0.7, eye_y - eye_r * 1.6, ex + eye_r * 0.7, eye_y + eye_r * 1.6], fill=INK + (255,))
        elif style == "closed":
            d.arc([ex - eye_r * 1.4, eye_y - eye_r, ex + eye_r * 1.4, eye_y + eye_r * 1.2], 200, 340, fill=INK + (255,), width=int(round(u)))
        elif style == "wide":
            d.ellipse([ex - eye_r * 1.5, eye_y - eye_r * 1.5, ex + eye_r * 1.5, eye_y + eye_r * 1.5], fill=(255, 255, 255, 255), outline=INK + (255,), width=int(round(u * 0.8)))
            d.ellipse([ex - eye_r * 0.6, eye_y - eye_r * 0.6, ex + eye_r * 0.6, eye_y + eye_r * 0.6], fill=INK + (255,))
        else:  # cross
            k = eye_r * 1.2
            d.line([ex - k, eye_y - k, ex + k, eye_y + k], fill=INK + (255,), width=int(round(u)))
            d.line([ex - k, eye_y + k, ex + k, eye_y - k], fill=INK + (255,), width=int(round(u)))

    if rng.random() < 0.35:
        bw = int(round(u * 0.9))
        for side in (-1, 1):
            ex = cx + side * eye_dx
            tilt = rng.uniform(-0.1, 0.1) * r * side
            d.line([ex - eye_r * 1.6, eye_y - eye_r * 2.6 + tilt, ex + eye_r * 1.6, eye_y - eye_r * 2.6 - tilt], fill=INK + (255,), width=bw)

    if rng.random() < 0.4:
        blush = (240, 110, 110, 200)
        for side in (-1, 1):
            bx = cx + side * r * 0.55
            by = cy + r * 0.15
            br = r * 0.13
            d.ellipse([bx - br * 1.3, by - br, bx + br * 1.3, by + br], fill=blush)

    mouth = MOUTH_STYLES[rng.integers(len(MOUTH_STYLES))]
    mw = r * rng.uniform(0.35, 0.6)
    my = cy + r * rng.uniform(0.3, 0.45)
    lw = int(round(u * rng.uniform(0.9, 1.4)))
    if mouth == "smile":
        d.arc([cx - mw, my - mw * 0.8, cx + mw, my + mw * 0.5], 20, 160, fill=INK + (255,), width=lw)
    elif mouth == "frown":
        d.arc([cx - mw, my - mw * 0.1, cx + mw, my + mw * 0.9], 200, 340, fill=INK + (255,), width=lw)
    elif mouth == "open":
        d.chord([cx - mw, my - mw * 0.6, cx + mw, my + mw * 0.6], 0, 180, fill=INK + (255,))
        d.ellipse([cx - mw * 0.5, my + mw * 0.1, cx + mw * 0.5, my + mw * 0.55], fill=(220, 80, 90, 255))
    elif mouth == "flat":
        d.line([cx - mw * 0.8, my, cx + mw * 0.8, my], fill=INK + (255,), width=lw)
    elif mouth == "grin":
        d.chord([cx - mw, my - mw * 0.5, cx + mw, my + mw * 0.6], 0, 180, fill=(255, 255, 255, 255), outline=INK + (255,), width=lw)
    else:  # o
        d.ellipse([cx - mw * 0.35, my - mw * 0.3, cx + mw * 0.35, my + mw * 0.4], fill=INK + (255,))

    small = im.convert("RGBa").resize((size, size), Image.BOX).convert("RGBA")
    return np.asarray(small, dtype=np.float64) / 255.0


def make_faces(out_dir, n: int, size: int = 32, seed: int = 0) -> list[Path]:
    """Write ``n`` faces as ``face_000.png`` ... into ``out_dir``."""
    out_dir = Path(out_dir)
    paths = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        paths.append(save_png(draw_face(rng, size), out_dir / f"face_{i:03d}.png"))
    return paths
