"""User clicks: representation, rasterization to binary maps, simulation.

Coordinates are (row, col) with origin at the top-left pixel. A click paints
a Euclidean disk of radius 3 (29 pixels in the interior, clipped at the
borders). The training-time simulator draws 0..5 clicks of each polarity,
positives inside a given instance mask and negatives outside it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .errors import InvalidInputError

CLICK_RADIUS = 3
MAX_CLICKS = 5

# flat offsets (dr, dc) with dr^2 + dc^2 <= 9
_DISK = [(dr, dc)
         for dr in range(-CLICK_RADIUS, CLICK_RADIUS + 1)
         for dc in range(-CLICK_RADIUS, CLICK_RADIUS + 1)
         if dr * dr + dc * dc <= CLICK_RADIUS * CLICK_RADIUS]


@dataclass
class ClickSet:
    positive: List[Tuple[int, int]] = field(default_factory=list)
    negative: List[Tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.positive) + len(self.negative)

    def to_json(self) -> str:
        return json.dumps({"positive": [list(p) for p in self.positive],
                           "negative": [list(p) for p in self.negative]})

    @classmethod
    def from_json(cls, text: str) -> "ClickSet":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise InvalidInputError(f"clicks JSON is not valid JSON: {e}") from e
        if not isinstance(obj, dict):
            raise InvalidInputError("clicks JSON must be an object")
        out = cls()
        for key, dest in (("positive", out.positive), ("negative", out.negative)):
            for item in obj.get(key, []):
                if (not isinstance(item, (list, tuple)) or len(item) != 2
                        or not all(isinstance(v, int) for v in item)):
                    raise InvalidInputError(f"bad click entry {item!r} under '{key}'")
                dest.append((item[0], item[1]))
        return out


def rasterize(clicks: ClickSet, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """ClickSet -> binary (positive, negative) maps of shape [1,1,H,W]."""
    maps = []
    for coords in (clicks.positive, clicks.negative):
        m = np.zeros((1, 1, height, width), dtype=np.float32)
        for r, c in coords:
            if not (0 <= r < height and 0 <= c < width):
                raise InvalidInputError(f"click ({r},{c}) outside {height}x{width} image")
            for dr, dc in _DISK:
                rr, cc = r + dr, c + dc
                if 0 <= rr < height and 0 <= cc < width:
                    m[0, 0, rr, cc] = 1.0
        maps.append(m)
    return maps[0], maps[1]


def simulate_clicks(instance_mask: np.ndarray, seed: int) -> ClickSet:
    """Draw a random ClickSet for one instance mask ([H,W] or [1,H,W] in {0,1}).

    Positive and negative counts are independent uniform draws on 0..5;
    positives land on mask==1 pixels, negatives on mask==0, sampled without
    replacement. An empty candidate region forces its count to 0.
    """
    mask = np.asarray(instance_mask)
    if mask.ndim == 3:
        mask = mask[0]
    if mask.ndim != 2:
        raise InvalidInputError(f"instance mask must be [H,W], got {mask.shape}")
    vals = np.unique(mask)
    if not np.isin(vals, (0, 1)).all():
        raise InvalidInputError("instance mask must be binary")
    rng = np.random.default_rng(seed)
    n_pos = int(rng.integers(0, MAX_CLICKS + 1))
    n_neg = int(rng.integers(0, MAX_CLICKS + 1))
    inside = np.argwhere(mask == 1)
    outside = np.argwhere(mask == 0)
    clicks = ClickSet()
    if len(inside) == 0:
        n_pos = 0
    if len(outside) == 0:
        n_neg = 0
    if n_pos:
        picks = rng.choice(len(inside), size=min(n_pos, len(inside)), replace=False)
        clicks.positive = [(int(r), int(c)) for r, c in inside[picks]]
    if n_neg:
        picks = rng.choice(len(outside), size=min(n_neg, len(outside)), replace=False)
        clicks.negative = [(int(r), int(c)) for r, c in outside[picks]]
    return clicks
