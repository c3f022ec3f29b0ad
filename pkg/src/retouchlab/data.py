"""Procedural training data: textured backgrounds with colored instance
shapes, a flat-look degradation for the input, and a region-dependent
restoration for the ground truth (full inside instances, half outside), so
the learnable mapping rewards region awareness.

Directory layout: {root}/{split}/{id}/{input.png, gt.png, region.png,
inst_0.png, ...} with a JSON manifest at the root.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np
from PIL import Image

from .errors import ConfigError, InvalidInputError

# flat-look degradation: contrast halved toward 0.5, then darkened.
# input = 0.5*clean + 0.1, so restore(d) = 2d - 0.2 never clips on [0,1].
CONTRAST = 0.5
BRIGHTNESS = -0.15
OUTSIDE_RESTORE = 0.5


@dataclass
class Sample:
    id: str
    input: np.ndarray          # [3,H,W] float32 in [0,1]
    gt: np.ndarray             # [3,H,W]
    region_mask: np.ndarray    # [1,H,W] in {0,1}
    instances: List[np.ndarray] = field(default_factory=list)  # each [1,H,W]


@dataclass
class GenConfig:
    count: int = 500
    height: int = 64
    width: int = 64
    min_instances: int = 1
    max_instances: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.height % 16 or self.width % 16:
            raise ConfigError("height/width must be divisible by 16")
        if not (1 <= self.min_instances <= self.max_instances <= 4):
            raise ConfigError("instance count range must sit inside [1, 4]")


def degrade(clean: np.ndarray) -> np.ndarray:
    return np.clip(CONTRAST * (clean - 0.5) + 0.5 + BRIGHTNESS, 0.0, 1.0)


def restore(degraded: np.ndarray) -> np.ndarray:
    return np.clip((degraded - 0.5 - BRIGHTNESS) / CONTRAST + 0.5, 0.0, 1.0)


def _low_freq_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth texture from a bilinearly upsampled coarse noise grid."""
    gh, gw = max(h // 16, 2), max(w // 16, 2)
    coarse = rng.uniform(0.3, 0.7, size=(3, gh, gw)).astype(np.float32)
    ys = np.linspace(0, gh - 1, h, dtype=np.float32)
    xs = np.linspace(0, gw - 1, w, dtype=np.float32)
    y0 = np.clip(ys.astype(np.int64), 0, gh - 2)
    x0 = np.clip(xs.astype(np.int64), 0, gw - 2)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    c00 = coarse[:, y0][:, :, x0]
    c01 = coarse[:, y0][:, :, x0 + 1]
    c10 = coarse[:, y0 + 1][:, :, x0]
    c11 = coarse[:, y0 + 1][:, :, x0 + 1]
    top = c00 * (1 - fx) + c01 * fx
    bot = c10 * (1 - fx) + c11 * fx
    return top * (1 - fy) + bot * fy


def _shape_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """One random ellipse or rounded rectangle as a boolean [H,W] mask."""
    ch = rng.uniform(0.18, 0.82) * h
    cw = rng.uniform(0.18, 0.82) * w
    rh = rng.uniform(0.10, 0.22) * h
    rw = rng.uniform(0.10, 0.22) * w
    yy, xx = np.mgrid[0:h, 0:w]
    if rng.random() < 0.5:
        return ((yy - ch) / rh) ** 2 + ((xx - cw) / rw) ** 2 <= 1.0
    # rounded rectangle: box minus sharp corners via a superellipse
    return (np.abs((yy - ch) / rh) ** 4 + np.abs((xx - cw) / rw) ** 4) <= 1.0


def _make_sample(sample_id: str, cfg: GenConfig, seed: int) -> Sample:
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    clean = _low_freq_background(rng, h, w)
    k = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    instances: List[np.ndarray] = []
    occupied = np.zeros((h, w), dtype=bool)
    for _ in range(k):
        placed = False
        for _attempt in range(100):
            m = _shape_mask(rng, h, w)
            if m.sum() >= 16 and not (m & occupied).any():
                placed = True
                break
        if not placed:
            # infeasible placement: regenerate the sample with a fresh sub-seed
            return _make_sample(sample_id, cfg, seed + 104729)
        occupied |= m
        # bright instance colors keep the inside restoration strictly larger
        # than the half-strength background restoration
        color = rng.uniform(0.6, 1.0, size=3).astype(np.float32)
        clean[:, m] = color[:, None] * rng.uniform(0.9, 1.0, size=m.sum()).astype(np.float32)
        instances.append(m.astype(np.float32).reshape(1, h, w))
    clean = np.clip(clean, 0.0, 1.0).astype(np.float32)

    degraded = degrade(clean)
    restored = restore(degraded)
    region = np.clip(sum(instances), 0.0, 1.0)
    blend = region + (1.0 - region) * OUTSIDE_RESTORE
    gt = degraded + blend * (restored - degraded)

    # 8-bit quantization now, so files and in-memory arrays agree exactly
    inp = np.round(degraded * 255.0) / 255.0
    gt = np.round(np.clip(gt, 0.0, 1.0) * 255.0) / 255.0
    sample = Sample(id=sample_id, input=inp.astype(np.float32),
                    gt=gt.astype(np.float32),
                    region_mask=region.astype(np.float32),
                    instances=instances)
    inside = region[0] > 0.5
    diff = np.abs(sample.gt - sample.input).mean(axis=0)
    if not diff[inside].mean() > diff[~inside].mean():
        return _make_sample(sample_id, cfg, seed + 104729)
    return sample


def generate(cfg: GenConfig) -> List[Sample]:
    cfg.validate()
    return [_make_sample(f"s{idx:05d}", cfg, cfg.seed ^ (idx * 2654435761 % 2**31))
            for idx in range(cfg.count)]


def split(samples: List[Sample], train_fraction: float,
          seed: int) -> Tuple[List[Sample], List[Sample]]:
    if not (0 < train_fraction < 1):
        raise ConfigError("train_fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(len(samples) * train_fraction))
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    return train, test


# ---------------------------------------------------------------------------
# image + sample I/O
# ---------------------------------------------------------------------------

def save_image(path, img: np.ndarray) -> None:
    """[3,H,W] float in [0,1] -> 8-bit RGB PNG."""
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except Exception as e:
        raise InvalidInputError(f"cannot decode image {path}: {e}") from e
    return (arr / 255.0).transpose(2, 0, 1)


def save_mask(path, mask: np.ndarray) -> None:
    """[1,H,W] in {0,1} -> 8-bit grayscale PNG with values {0, 255}."""
    arr = (np.asarray(mask)[0] > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def load_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise InvalidInputError(f"{path}: expected grayscale mask, got mode "
                                        f"'{im.mode}'")
            arr = np.asarray(im, dtype=np.uint8)
    except InvalidInputError:
        raise
    except Exception as e:
        raise InvalidInputError(f"cannot decode mask {path}: {e}") from e
    vals = np.unique(arr)
    if not np.isin(vals, (0, 255)).all():
        raise InvalidInputError(f"{path}: mask values must be 0 or 255")
    return (arr == 255).astype(np.float32)[None]


def save_dataset(root, cfg: GenConfig, train: List[Sample], test: List[Sample],
                 manifest_version: int = 1) -> Path:
    root = Path(root)
    entries = {}
    for tag, subset in (("train", train), ("test", test)):
        items = []
        for s in subset:
            d = root / tag / s.id
            d.mkdir(parents=True, exist_ok=True)
            save_image(d / "input.png", s.input)
            save_image(d / "gt.png", s.gt)
            save_mask(d / "region.png", s.region_mask)
            for i, inst in enumerate(s.instances):
                save_mask(d / f"inst_{i}.png", inst)
            items.append({"id": s.id, "instances": len(s.instances)})
        entries[tag] = items
    manifest = {
        "version": manifest_version,
        "seed": cfg.seed,
        "count": cfg.count,
        "height": cfg.height,
        "width": cfg.width,
        "splits": entries,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def load_dataset(root, split_tag: str) -> List[Sample]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise InvalidInputError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if split_tag not in manifest.get("splits", {}):
        raise InvalidInputError(f"split '{split_tag}' not in manifest")
    samples = []
    for item in manifest["splits"][split_tag]:
        d = root / split_tag / item["id"]
        instances = [load_mask(d / f"inst_{i}.png") for i in range(item["instances"])]
        samples.append(Sample(
            id=item["id"],
            input=load_image(d / "input.png"),
            gt=load_image(d / "gt.png"),
            region_mask=load_mask(d / "region.png"),
            instances=instances,
        ))
    return samples
