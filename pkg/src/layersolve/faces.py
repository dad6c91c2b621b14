"""Procedural portrait corpus.

Renders parametric cartoon portraits (head, hair, eyes, brows, nose, mouth,
optional glasses) with seeded jitter in geometry and palette. The corpus is
what the desk-scale priors are fitted on, and every portrait comes with an
integer label map using the parse-map palette, so the same generator also
feeds parse-map ingestion.

Variation amplitudes are deliberately moderate: the linear prior's latent
coordinates scale with the corpus' pixel variance, and the optimizer has a
finite step budget to traverse them.
"""

from __future__ import annotations

import os
from typing import List, Tuple

import numpy as np
import PIL.Image
import PIL.ImageDraw

from .imaging import Image

# Palette used by label maps (and by cli parse-map ingestion).
LABEL_FACE = 1
LABEL_NOSE = 2
LABEL_EYEBROW = 3
LABEL_EYEBALL = 4
LABEL_MOUTH = 5
LABEL_GLASSES = 6

_SUPERSAMPLE = 4


def _ellipse_box(cx, cy, rx, ry, scale):
    return [
        (cx - rx) * scale,
        (cy - ry) * scale,
        (cx + rx) * scale,
        (cy + ry) * scale,
    ]


def _rgb8(color) -> Tuple[int, int, int]:
    return tuple(int(round(255 * float(c))) for c in color)


def render_portrait(rng: np.random.Generator, resolution: int = 64):
    """Draw one portrait. Returns (Image, label map as (H, W) uint8)."""
    ss = resolution * _SUPERSAMPLE

    # Palette jitter around a base identity.
    bg_top = np.array([0.55, 0.62, 0.70]) + rng.uniform(-0.08, 0.08, 3)
    bg_bot = bg_top + rng.uniform(-0.10, 0.02, 3)
    skin = np.array([0.78, 0.62, 0.50]) + rng.uniform(-0.08, 0.08, 3)
    hair = np.array([0.25, 0.18, 0.12]) + rng.uniform(-0.10, 0.22, 3)
    iris = np.array([rng.uniform(0.15, 0.5), rng.uniform(0.25, 0.55), rng.uniform(0.3, 0.75)])
    mouth_col = np.array([0.70, 0.28, 0.28]) + rng.uniform(-0.06, 0.06, 3)
    shirt = np.array([0.35, 0.40, 0.55]) + rng.uniform(-0.12, 0.12, 3)

    # Geometry jitter (fractions of the frame).
    cx = 0.5 + rng.uniform(-0.015, 0.015)
    cy = 0.52 + rng.uniform(-0.015, 0.015)
    head_rx = 0.27 + rng.uniform(-0.02, 0.02)
    head_ry = 0.34 + rng.uniform(-0.02, 0.02)
    eye_dx = 0.105 + rng.uniform(-0.01, 0.01)
    eye_y = cy - 0.06 + rng.uniform(-0.008, 0.008)
    eye_r = 0.035 + rng.uniform(-0.004, 0.006)
    brow_y = eye_y - 0.055 + rng.uniform(-0.006, 0.006)
    nose_y = cy + 0.045 + rng.uniform(-0.008, 0.008)
    mouth_y = cy + 0.155 + rng.uniform(-0.012, 0.012)
    mouth_rx = 0.075 + rng.uniform(-0.015, 0.02)
    mouth_ry = 0.02 + rng.uniform(-0.005, 0.012)
    hair_drop = rng.uniform(0.02, 0.09)
    has_glasses = rng.random() < 0.3

    img = PIL.Image.new("RGB", (ss, ss))
    draw = PIL.ImageDraw.Draw(img)

    # Background gradient.
    for y in range(ss):
        t = y / (ss - 1)
        draw.line([(0, y), (ss, y)], fill=_rgb8((1 - t) * bg_top + t * bg_bot))

    # Shoulders, hair cap, head.
    draw.ellipse(_ellipse_box(cx, 1.08, 0.42, 0.30, ss), fill=_rgb8(shirt))
    draw.ellipse(_ellipse_box(cx, cy - 0.04, head_rx + 0.045, head_ry + 0.04, ss), fill=_rgb8(hair))
    draw.ellipse(_ellipse_box(cx, cy + hair_drop * 0.5, head_rx, head_ry, ss), fill=_rgb8(skin))
    # Fringe keeps some hair over the forehead.
    draw.ellipse(_ellipse_box(cx, cy - head_ry + hair_drop * 0.5, head_rx * 0.95, hair_drop + 0.04, ss), fill=_rgb8(hair))

    # Eyes: sclera, iris, pupil.
    for sx in (-1.0, 1.0):
        ex = cx + sx * eye_dx
        draw.ellipse(_ellipse_box(ex, eye_y, eye_r * 1.25, eye_r, ss), fill=_rgb8((0.96, 0.96, 0.95)))
        draw.ellipse(_ellipse_box(ex, eye_y, eye_r * 0.62, eye_r * 0.62, ss), fill=_rgb8(iris))
        draw.ellipse(_ellipse_box(ex, eye_y, eye_r * 0.26, eye_r * 0.26, ss), fill=_rgb8((0.05, 0.05, 0.05)))
        # Brow bar.
        draw.rectangle(
            [(ex - eye_r * 1.3) * ss, (brow_y - 0.008) * ss, (ex + eye_r * 1.3) * ss, (brow_y + 0.008) * ss],
            fill=_rgb8(hair * 0.8),
        )

    # Nose: small wedge.
    nose_w = 0.018 + rng.uniform(-0.003, 0.005)
    draw.polygon(
        [
            (cx * ss, (nose_y - 0.045) * ss),
            ((cx - nose_w) * ss, (nose_y + 0.02) * ss),
            ((cx + nose_w) * ss, (nose_y + 0.02) * ss),
        ],
        fill=_rgb8(skin * 0.82),
    )

    # Mouth.
    draw.ellipse(_ellipse_box(cx, mouth_y, mouth_rx, mouth_ry, ss), fill=_rgb8(mouth_col))

    if has_glasses:
        frame = _rgb8((0.12, 0.10, 0.10))
        lw = max(2, ss // 128)
        for sx in (-1.0, 1.0):
            ex = cx + sx * eye_dx
            draw.ellipse(_ellipse_box(ex, eye_y, eye_r * 1.7, eye_r * 1.5, ss), outline=frame, width=lw)
        draw.line(
            [((cx - eye_dx + eye_r * 1.7) * ss, eye_y * ss), ((cx + eye_dx - eye_r * 1.7) * ss, eye_y * ss)],
            fill=frame,
            width=lw,
        )

    rgb = img.resize((resolution, resolution), PIL.Image.LANCZOS)
    pixels = np.asarray(rgb, dtype=np.float64) / 255.0

    labels = _render_labels(
        resolution,
        cx=cx,
        cy=cy,
        head_rx=head_rx,
        head_ry=head_ry,
        hair_drop=hair_drop,
        eye_dx=eye_dx,
        eye_y=eye_y,
        eye_r=eye_r,
        brow_y=brow_y,
        nose_y=nose_y,
        nose_w=nose_w,
        mouth_y=mouth_y,
        mouth_rx=mouth_rx,
        mouth_ry=mouth_ry,
        has_glasses=has_glasses,
    )
    return Image(np.clip(pixels, 0.0, 1.0)), labels


def _render_labels(resolution, **g):
    lab = PIL.Image.new("L", (resolution, resolution), 0)
    draw = PIL.ImageDraw.Draw(lab)
    s = resolution
    draw.ellipse(_ellipse_box(g["cx"], g["cy"] + g["hair_drop"] * 0.5, g["head_rx"], g["head_ry"], s), fill=LABEL_FACE)
    for sx in (-1.0, 1.0):
        ex = g["cx"] + sx * g["eye_dx"]
        if g["has_glasses"]:
            draw.ellipse(_ellipse_box(ex, g["eye_y"], g["eye_r"] * 1.7, g["eye_r"] * 1.5, s), outline=LABEL_GLASSES, width=1)
        draw.rectangle(
            [(ex - g["eye_r"] * 1.3) * s, (g["brow_y"] - 0.008) * s, (ex + g["eye_r"] * 1.3) * s, (g["brow_y"] + 0.008) * s],
            fill=LABEL_EYEBROW,
        )
        draw.ellipse(_ellipse_box(ex, g["eye_y"], g["eye_r"] * 1.25, g["eye_r"], s), fill=LABEL_EYEBALL)
    draw.polygon(
        [
            (g["cx"] * s, (g["nose_y"] - 0.045) * s),
            ((g["cx"] - g["nose_w"]) * s, (g["nose_y"] + 0.02) * s),
            ((g["cx"] + g["nose_w"]) * s, (g["nose_y"] + 0.02) * s),
        ],
        fill=LABEL_NOSE,
    )
    draw.ellipse(_ellipse_box(g["cx"], g["mouth_y"], g["mouth_rx"], g["mouth_ry"], s), fill=LABEL_MOUTH)

    arr = np.asarray(lab, dtype=np.uint8).copy()
    # Features drawn outside the head ellipse (rounding at the rim) are
    # clipped so the subset invariant holds on ingest.
    face = np.zeros_like(arr)
    lab_face = PIL.Image.new("L", (resolution, resolution), 0)
    PIL.ImageDraw.Draw(lab_face).ellipse(
        _ellipse_box(g["cx"], g["cy"] + g["hair_drop"] * 0.5, g["head_rx"], g["head_ry"], resolution), fill=1
    )
    face = np.asarray(lab_face, dtype=np.uint8)
    arr[(arr > LABEL_FACE) & (face == 0)] = 0
    return arr


def generate_corpus(out_dir, count: int, seed: int, resolution: int = 64, with_labels: bool = True) -> List[str]:
    """Write `count` portraits (and label maps) under out_dir; returns image paths."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    if with_labels:
        lab_dir = os.path.join(out_dir, "labels")
        os.makedirs(lab_dir, exist_ok=True)
    paths = []
    root = np.random.SeedSequence(seed)
    for i, child in enumerate(root.spawn(count)):
        rng = np.random.Generator(np.random.PCG64(child))
        portrait, labels = render_portrait(rng, resolution)
        path = os.path.join(img_dir, f"{i:04d}.png")
        data = np.rint(portrait.pixels * 255.0).astype(np.uint8)
        PIL.Image.fromarray(data, mode="RGB").save(path)
        if with_labels:
            PIL.Image.fromarray(labels, mode="L").save(os.path.join(lab_dir, f"{i:04d}.png"))
        paths.append(path)
    return paths
