"""Full-reference quality metrics with human-centered weighting, residual
maps, and pairwise user-study aggregation (preference rate, exponential
Bradley-Terry scores).

Images are [3,H,W] float arrays in [0,1]; masks are [1,H,W] or [H,W] in
{0,1}. All functions are pure.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import InvalidInputError, ShapeError

PSNR_CAP_DB = 99.0
HC_W_HUMAN = 1.0
HC_W_BACKGROUND = 0.5

# sRGB (D65) -> XYZ
_RGB2XYZ = np.array([[0.4124564, 0.3575761, 0.1804375],
                     [0.2126729, 0.7151522, 0.0721750],
                     [0.0193339, 0.1191920, 0.9503041]])
_WHITE = np.array([0.95047, 1.0, 1.08883])
_LAB_DELTA = 6.0 / 29.0

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")


def _as_mask(mask: np.ndarray, hw) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3:
        m = m[0]
    if m.shape != hw:
        raise ShapeError(f"mask {m.shape} does not match image {hw}")
    return m


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """-10 log10(MSE) over all channels, capped at 99 dB."""
    _check_pair(a, b)
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * math.log10(mse))


def psnr_hc(a: np.ndarray, b: np.ndarray, mask: np.ndarray,
            w_human: float = HC_W_HUMAN,
            w_background: float = HC_W_BACKGROUND) -> float:
    """Human-centered PSNR: squared-weight MSE normalized by the weight mass.

    Mirrors the weight-inside-norm construction of the color-difference
    variant; with unit weights it reduces to plain PSNR.
    """
    _check_pair(a, b)
    m = _as_mask(mask, a.shape[1:])
    w = m * w_human + (1.0 - m) * w_background
    w2 = w * w
    num = (w2[None] * (np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2).sum()
    den = w2.sum() * a.shape[0]
    mse = float(num / den)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * math.log10(mse))


def srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """[3,...] sRGB in [0,1] -> CIELAB (L* in [0,100], a*/b* signed)."""
    s = np.asarray(rgb, dtype=np.float64)
    if s.ndim < 1 or s.shape[0] != 3:
        raise ShapeError(f"expected leading RGB axis of 3, got {s.shape}")
    linear = np.where(s <= 0.04045, s / 12.92, ((s + 0.055) / 1.055) ** 2.4)
    xyz = np.tensordot(_RGB2XYZ, linear, axes=1)
    t = xyz / _WHITE.reshape(3, *([1] * (s.ndim - 1)))
    f = np.where(t > _LAB_DELTA ** 3,
                 np.cbrt(t),
                 t / (3.0 * _LAB_DELTA ** 2) + 4.0 / 29.0)
    lab = np.empty_like(f)
    lab[0] = 116.0 * f[1] - 16.0
    lab[1] = 500.0 * (f[0] - f[1])
    lab[2] = 200.0 * (f[1] - f[2])
    return lab


def delta_e_ab(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None,
               w_human: float = HC_W_HUMAN,
               w_background: float = HC_W_BACKGROUND) -> float:
    """Mean per-pixel CIELAB distance; weights scale both Lab images, so a
    pixel's distance is scaled by its weight. Unit weights give plain dE."""
    _check_pair(a, b)
    la = srgb_to_lab(a)
    lb = srgb_to_lab(b)
    dist = np.sqrt(((la - lb) ** 2).sum(axis=0))
    if mask is not None:
        m = _as_mask(mask, a.shape[1:])
        dist = dist * (m * w_human + (1.0 - m) * w_background)
    return float(dist.mean())


# ---------------------------------------------------------------------------
# SSIM / MS-SSIM
# ---------------------------------------------------------------------------

def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with a 1-D kernel along both axes."""
    k = len(kernel)
    h, w = img.shape
    rows = np.zeros((h, w - k + 1))
    for i, kv in enumerate(kernel):
        rows += kv * img[:, i:i + w - k + 1]
    out = np.zeros((h - k + 1, w - k + 1))
    for i, kv in enumerate(kernel):
        out += kv * rows[i:i + h - k + 1, :]
    return out


def _to_gray(img: np.ndarray) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[0] != 3:
            raise ShapeError(f"expected [3,H,W], got {a.shape}")
        return 0.299 * a[0] + 0.587 * a[1] + 0.114 * a[2]
    if a.ndim == 2:
        return a
    raise ShapeError(f"expected 2-D or [3,H,W] image, got {a.shape}")


def _ssim_maps(a: np.ndarray, b: np.ndarray, window: int = 11,
               sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
               dynamic_range: float = 1.0):
    ga, gb = _to_gray(a), _to_gray(b)
    win = min(window, ga.shape[0], ga.shape[1])
    if win % 2 == 0:
        win -= 1
    if win < 1:
        raise ShapeError(f"image {ga.shape} too small for SSIM")
    kernel = _gaussian_kernel(win, sigma)
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    mu_a = _filter_valid(ga, kernel)
    mu_b = _filter_valid(gb, kernel)
    var_a = _filter_valid(ga * ga, kernel) - mu_a * mu_a
    var_b = _filter_valid(gb * gb, kernel) - mu_b * mu_b
    cov = _filter_valid(ga * gb, kernel) - mu_a * mu_b
    luminance = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return luminance, cs


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    _check_pair(np.asarray(a), np.asarray(b))
    luminance, cs = _ssim_maps(a, b)
    return float((luminance * cs).mean())


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h - h % 2, w - w % 2
    v = img[:h2, :w2]
    return 0.25 * (v[0::2, 0::2] + v[0::2, 1::2] + v[1::2, 0::2] + v[1::2, 1::2])


def ms_ssim(a: np.ndarray, b: np.ndarray,
            weights: Sequence[float] = MSSSIM_WEIGHTS) -> float:
    """Product-form multiscale SSIM; the window shrinks on scales where the
    image is smaller than 11 pixels (desk-scale inputs are small)."""
    _check_pair(np.asarray(a), np.asarray(b))
    ga, gb = _to_gray(a), _to_gray(b)
    levels = len(weights)
    vals = []
    for lvl in range(levels):
        luminance, cs = _ssim_maps(ga, gb)
        if lvl == levels - 1:
            vals.append(max(float((luminance * cs).mean()), 0.0))
        else:
            vals.append(max(float(cs.mean()), 0.0))
            ga, gb = _downsample2(ga), _downsample2(gb)
    out = 1.0
    for v, w in zip(vals, weights):
        out *= v ** w
    return float(out)


# ---------------------------------------------------------------------------
# residual maps
# ---------------------------------------------------------------------------

def residual_map(inp: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Per-pixel mean-over-channels |out - in| -> [1,H,W]."""
    _check_pair(np.asarray(inp), np.asarray(out))
    return np.abs(np.asarray(out, np.float64)
                  - np.asarray(inp, np.float64)).mean(axis=0, keepdims=True)


def residual_energy(res_map: np.ndarray, mask: np.ndarray) -> float:
    """Mean residual over mask==1 pixels (density, not total)."""
    r = np.asarray(res_map, np.float64)
    if r.ndim == 3:
        r = r[0]
    m = _as_mask(mask, r.shape)
    count = m.sum()
    if count == 0:
        raise InvalidInputError("residual_energy: empty mask")
    return float((r * m).sum() / count)


# ---------------------------------------------------------------------------
# user-study aggregation
# ---------------------------------------------------------------------------

@dataclass
class PairwiseRecord:
    method_a: str
    method_b: str
    wins_a: int
    wins_b: int

    def validate(self) -> None:
        if self.wins_a < 0 or self.wins_b < 0:
            raise InvalidInputError("negative win counts")
        if self.wins_a + self.wins_b < 1:
            raise InvalidInputError(
                f"pair {self.method_a}/{self.method_b} has no comparisons")


def read_pairwise_csv(path) -> List[PairwiseRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        need = {"method_a", "method_b", "wins_a", "wins_b"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise InvalidInputError(f"{path}: header must contain {sorted(need)}")
        for row in reader:
            records.append(PairwiseRecord(row["method_a"], row["method_b"],
                                          int(row["wins_a"]), int(row["wins_b"])))
    return records


def preference_rate(records: Sequence[PairwiseRecord]) -> Dict[str, float]:
    """Share of all comparisons each method won; shares sum to 1 when every
    comparison names a winner."""
    if not records:
        raise InvalidInputError("no pairwise records")
    wins: Dict[str, float] = {}
    total = 0
    for r in records:
        r.validate()
        wins.setdefault(r.method_a, 0.0)
        wins.setdefault(r.method_b, 0.0)
        wins[r.method_a] += r.wins_a
        wins[r.method_b] += r.wins_b
        total += r.wins_a + r.wins_b
    return {m: w / total for m, w in wins.items()}


def bt_scores(records: Sequence[PairwiseRecord], iterations: int = 10000,
              smoothing: float = 0.1, tol: float = 1e-9) -> Dict[str, float]:
    """Exponential Bradley-Terry strengths via minorize-maximize iterations.

    The win matrix gets a Laplace count of ``smoothing`` on every ordered
    pair so shut-out methods keep finite scores. Scores are normalized so
    the weakest method scores 1.
    """
    if not records:
        raise InvalidInputError("no pairwise records")
    methods: List[str] = []
    for r in records:
        r.validate()
        for m in (r.method_a, r.method_b):
            if m not in methods:
                methods.append(m)
    k = len(methods)
    if k < 2:
        raise InvalidInputError("need at least two methods")
    idx = {m: i for i, m in enumerate(methods)}
    wins = np.full((k, k), smoothing, dtype=np.float64)
    np.fill_diagonal(wins, 0.0)
    for r in records:
        wins[idx[r.method_a], idx[r.method_b]] += r.wins_a
        wins[idx[r.method_b], idx[r.method_a]] += r.wins_b

    totals = wins + wins.T
    p = np.ones(k, dtype=np.float64)
    for _ in range(iterations):
        denom = np.zeros(k)
        for i in range(k):
            with np.errstate(divide="ignore", invalid="ignore"):
                contrib = np.where(totals[i] > 0, totals[i] / (p[i] + p), 0.0)
            contrib[i] = 0.0
            denom[i] = contrib.sum()
        p_new = wins.sum(axis=1) / denom
        p_new /= np.exp(np.mean(np.log(p_new)))
        if np.abs(np.log(p_new) - np.log(p)).max() <= tol:
            p = p_new
            break
        p = p_new
    p = p / p.min()
    return {m: float(p[idx[m]]) for m in methods}


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    ids: List[str] = field(default_factory=list)
    rows: List[Dict[str, float]] = field(default_factory=list)

    METRIC_KEYS = ("psnr", "psnr_hc", "delta_e", "delta_e_hc", "ssim",
                   "ms_ssim", "residual_energy_region")

    def add(self, sample_id: str, row: Dict[str, float]) -> None:
        self.ids.append(sample_id)
        self.rows.append(row)

    def means(self) -> Dict[str, float]:
        if not self.rows:
            return {}
        return {k: float(np.mean([r[k] for r in self.rows]))
                for k in self.rows[0]}

    def to_json(self) -> str:
        return json.dumps({
            "mean": self.means(),
            "per_image": [{"id": i, **r} for i, r in zip(self.ids, self.rows)],
        }, indent=2)

    def write(self, json_path, csv_path) -> None:
        Path(json_path).write_text(self.to_json(), encoding="utf-8")
        keys = list(self.rows[0]) if self.rows else list(self.METRIC_KEYS)
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["id"] + keys)
            for i, r in zip(self.ids, self.rows):
                writer.writerow([i] + [f"{r[k]:.6g}" for k in keys])
            writer.writerow(["mean"] + [f"{v:.6g}" for v in self.means().values()])


def evaluate_pair(inp: np.ndarray, out: np.ndarray, gt: np.ndarray,
                  region_mask: np.ndarray) -> Dict[str, float]:
    """All reference metrics for one retouched image."""
    rmap = residual_map(inp, out)
    return {
        "psnr": psnr(out, gt),
        "psnr_hc": psnr_hc(out, gt, region_mask),
        "delta_e": delta_e_ab(out, gt),
        "delta_e_hc": delta_e_ab(out, gt, mask=region_mask),
        "ssim": ssim(out, gt),
        "ms_ssim": ms_ssim(out, gt),
        "residual_energy_region": residual_energy(rmap, region_mask),
    }
