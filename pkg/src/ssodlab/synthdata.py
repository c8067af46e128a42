"""Procedural shape-detection scenes and the weak/strong augmentation pair.

Scenes are 128x128 RGB images with 1..max_objects colored shapes
(circle / square / triangle) on a noisy gray background; ground truth is
the tight bounding box of each shape.  Everything is a pure function of
(seed, config).  Images are stored float32 so the export format below is
lossless; the detector casts to float64 at batch time.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .geometry import Box, iou
from .rng import derive_rng

CLASS_NAMES = ("circle", "square", "triangle")

# per-class base color, scaled by a per-instance intensity
_CLASS_COLORS = np.array([
    [1.00, 0.38, 0.32],   # circle: red-ish
    [0.34, 1.00, 0.40],   # square: green-ish
    [0.36, 0.42, 1.00],   # triangle: blue-ish
])


@dataclass
class GenConfig:
    image_size: int = 128
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 2
    size_range: tuple = (10.0, 16.0)
    crowding_max_iou: float = 0.25
    noise_amplitude: float = 0.05
    background_level: float = 0.32
    intensity_range: tuple = (0.70, 0.95)
    max_place_tries: int = 40


@dataclass
class AugConfig:
    brightness: float = 0.10
    contrast: float = 0.20
    noise_sigma: float = 0.03
    cutout_count: tuple = (1, 3)
    cutout_size: tuple = (8, 24)
    cutout_fill: float = 0.5


@dataclass
class TransformRecord:
    flip: bool = False


@dataclass
class Scene:
    image: np.ndarray          # (H, W, 3) float32 in [0,1]
    gts: list                  # list[Box]


@dataclass
class DatasetSplit:
    labeled_ids: list
    unlabeled_ids: list
    seed: int


def _keys(seed):
    return seed if isinstance(seed, (tuple, list)) else (seed,)


def _shape_mask(cls: int, box, xx, yy):
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    w, h = x2 - x1, y2 - y1
    if cls == 0:     # circle (radius = w/2; w == h by construction)
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= (w / 2.0) ** 2
    if cls == 1:     # square
        return (xx >= x1) & (xx <= x2) & (yy >= y1) & (yy <= y2)
    # triangle: apex top-center, base at the bottom
    inside_y = (yy >= y1) & (yy <= y2)
    half_w = (w / 2.0) * np.clip((yy - y1) / max(h, 1e-9), 0.0, 1.0)
    return inside_y & (np.abs(xx - cx) <= half_w)


def generate_scene(seed, cfg: GenConfig) -> Scene:
    """Deterministic scene for (seed, cfg); never fails hard.

    Objects are placed by rejection sampling against the crowding limit
    (max pairwise gt IoU); after max_place_tries the object is dropped,
    reducing the object count for the scene.
    """
    rng = derive_rng("scene", *_keys(seed))
    s = cfg.image_size
    img = np.full((s, s, 3), cfg.background_level, dtype=np.float64)

    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    gts: list = []
    yy, xx = np.mgrid[0:s, 0:s]
    xx = xx + 0.5
    yy = yy + 0.5
    for _ in range(n_obj):
        for _try in range(cfg.max_place_tries):
            cls = int(rng.integers(cfg.num_classes))
            size = float(rng.uniform(*cfg.size_range))
            if cls == 0:
                w = h = size
            elif cls == 1:
                w = size
                h = size * float(rng.uniform(0.85, 1.18))
            else:
                w = size * float(rng.uniform(0.95, 1.25))
                h = size
            x1 = float(rng.uniform(1.0, s - w - 1.0))
            y1 = float(rng.uniform(1.0, s - h - 1.0))
            cand = Box(x1, y1, x1 + w, y1 + h, class_id=cls)
            if all(iou(cand, g) <= cfg.crowding_max_iou for g in gts):
                intensity = float(rng.uniform(*cfg.intensity_range))
                color = _CLASS_COLORS[cls] * intensity
                mask = _shape_mask(cls, (x1, y1, x1 + w, y1 + h), xx, yy)
                img[mask] = color
                gts.append(cand)
                break
    img += rng.normal(0.0, cfg.noise_amplitude, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    return Scene(image=img.astype(np.float32), gts=gts)


def split_dataset(n: int, labeled_fraction: float, seed: int) -> DatasetSplit:
    """Uniform random disjoint labeled/unlabeled split, deterministic per seed."""
    if n <= 0:
        raise ValueError("dataset size must be positive")
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction must be in (0,1], got {labeled_fraction}")
    n_labeled = int(round(labeled_fraction * n))
    n_labeled = min(max(n_labeled, 1), n)
    perm = derive_rng("split", seed).permutation(n)
    return DatasetSplit(
        labeled_ids=sorted(int(i) for i in perm[:n_labeled]),
        unlabeled_ids=sorted(int(i) for i in perm[n_labeled:]),
        seed=seed,
    )


def flip_scene(scene: Scene, flip: bool) -> Scene:
    if not flip:
        return Scene(image=scene.image.copy(), gts=list(scene.gts))
    w = scene.image.shape[1]
    img = scene.image[:, ::-1, :].copy()
    gts = [Box(w - g.x2, g.y1, w - g.x1, g.y2, g.class_id, g.score)
           for g in scene.gts]
    return Scene(image=img, gts=gts)


def weak_augment(scene: Scene, seed) -> tuple:
    """Horizontal flip with probability 0.5. Returns (scene', record)."""
    rng = derive_rng("weak", *_keys(seed))
    flip = bool(rng.random() < 0.5)
    return flip_scene(scene, flip), TransformRecord(flip=flip)


def strong_augment(scene: Scene, seed, shared: TransformRecord,
                   aug: AugConfig) -> Scene:
    """Same geometry as the paired weak view, plus photometric noise.

    Applies shared.flip, then contrast/brightness jitter, additive Gaussian
    noise and rectangular cutouts filled with aug.cutout_fill.  Each op is
    skipped entirely at zero strength so a zero-strength config reproduces
    the weak view bit for bit.
    """
    rng = derive_rng("strong", *_keys(seed))
    out = flip_scene(scene, shared.flip)
    img = out.image
    if aug.contrast > 0.0:
        c = np.float32(rng.uniform(1.0 - aug.contrast, 1.0 + aug.contrast))
        img = (img - np.float32(0.5)) * c + np.float32(0.5)
    if aug.brightness > 0.0:
        img = img + np.float32(rng.uniform(-aug.brightness, aug.brightness))
    if aug.noise_sigma > 0.0:
        img = img + rng.normal(0.0, aug.noise_sigma, size=img.shape).astype(np.float32)
    lo, hi = aug.cutout_count
    n_cut = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    if n_cut > 0:
        h, w = img.shape[:2]
        for _ in range(n_cut):
            cw = int(rng.integers(aug.cutout_size[0], aug.cutout_size[1] + 1))
            ch = int(rng.integers(aug.cutout_size[0], aug.cutout_size[1] + 1))
            x0 = int(rng.integers(0, max(1, w - cw + 1)))
            y0 = int(rng.integers(0, max(1, h - ch + 1)))
            img[y0:y0 + ch, x0:x0 + cw, :] = np.float32(aug.cutout_fill)
    if aug.contrast > 0.0 or aug.brightness > 0.0 or aug.noise_sigma > 0.0:
        img = np.clip(img, 0.0, 1.0)
    return Scene(image=np.ascontiguousarray(img, dtype=np.float32), gts=out.gts)


def make_scenes(dataset_seed: int, n: int, cfg: GenConfig, tag: str = "train") -> list:
    """n scenes with per-scene derived seeds."""
    return [generate_scene((tag, dataset_seed, i), cfg) for i in range(n)]


# ---------------------------------------------------------------------------
# export format: per split one raw float32 blob + one JSON sidecar


def save_split(out_dir: str, name: str, scenes: list, ids: list,
               cfg: GenConfig, seed: int) -> dict:
    """Write `<name>.bin` (concatenated little-endian float32 images) and
    `<name>.json` (ids, boxes, classes, generator config, seed)."""
    os.makedirs(out_dir, exist_ok=True)
    if len(scenes) != len(ids):
        raise ValueError("scenes and ids length mismatch")
    blob_path = os.path.join(out_dir, f"{name}.bin")
    meta_path = os.path.join(out_dir, f"{name}.json")
    shape = list(scenes[0].image.shape) if scenes else [cfg.image_size, cfg.image_size, 3]
    with open(blob_path, "wb") as f:
        for sc in scenes:
            f.write(sc.image.astype("<f4").tobytes(order="C"))
    meta = {
        "format": "ssodlab-split-v1",
        "ids": list(map(int, ids)),
        "count": len(scenes),
        "image_shape": shape,
        "dtype": "<f4",
        "boxes": [[[g.x1, g.y1, g.x2, g.y2] for g in sc.gts] for sc in scenes],
        "classes": [[g.class_id for g in sc.gts] for sc in scenes],
        "generator": asdict(cfg),
        "seed": seed,
    }
    with open(meta_path, "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    return {"blob": blob_path, "meta": meta_path}


def load_split(out_dir: str, name: str) -> tuple:
    """Inverse of save_split. Returns (scenes, ids, meta)."""
    meta_path = os.path.join(out_dir, f"{name}.json")
    with open(meta_path) as f:
        meta = json.load(f)
    if meta.get("format") != "ssodlab-split-v1":
        raise ValueError(f"unrecognized split format in {meta_path}")
    shape = tuple(meta["image_shape"])
    per_img = int(np.prod(shape))
    raw = np.fromfile(os.path.join(out_dir, f"{name}.bin"), dtype="<f4")
    if raw.size != per_img * meta["count"]:
        raise ValueError(f"blob size mismatch for split '{name}'")
    scenes = []
    for i in range(meta["count"]):
        img = raw[i * per_img:(i + 1) * per_img].reshape(shape)
        gts = [Box(*b, class_id=c) for b, c in
               zip(meta["boxes"][i], meta["classes"][i])]
        scenes.append(Scene(image=img, gts=gts))
    return scenes, list(meta["ids"]), meta
