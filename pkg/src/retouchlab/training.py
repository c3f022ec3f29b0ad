"""Losses, Adam optimizer, learning-rate schedule, and the three-stage
training driver.

Stage 1 trains the automatic branch (interactive parameters untouched).
Stage 2 trains the interactive branch and the decoder with the encoding
side frozen. Stage 3 mixes both routes at random per iteration; each route
updates only the parameters on its own backward path.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as tc
from .errors import ConfigError, NonFiniteError, ShapeError
from .guidance import rasterize, simulate_clicks
from .model import RetouchNet
from .tensor import Tensor

BCE_EPS = 1e-7

AUTO_PREFIXES = ("encoder.", "extractor.", "fusion.", "decoder.", "maskhead.")
ENCODING_PREFIXES = ("encoder.", "extractor.", "fusion.")
INTERACTIVE_ROUTE_PREFIXES = ("it.", "decoder.", "maskhead.")


@dataclass
class LossWeights:
    lambda_priority: float = 1.0
    lambda_mask: float = 1.0
    w_human: float = 5.0
    w_other: float = 1.0

    def validate(self) -> None:
        for name in ("lambda_priority", "lambda_mask", "w_human", "w_other"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"loss weight {name} must be positive")


@dataclass
class StageSchedule:
    stage1_iters: int = 15000
    stage2_iters: int = 2000
    stage3_iters: int = 3000
    lr0: float = 1e-4
    decay: float = 0.5
    decay_every: int = 5000
    batch: int = 10
    stage3_mix_prob: float = 0.5

    def validate(self) -> None:
        if min(self.stage1_iters, self.stage2_iters, self.stage3_iters) < 0:
            raise ConfigError("stage iteration counts must be >= 0")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if not (0 < self.decay <= 1):
            raise ConfigError("decay must be in (0, 1]")
        if self.decay_every <= 0 or self.batch <= 0:
            raise ConfigError("decay_every and batch must be positive")
        if not (0 <= self.stage3_mix_prob <= 1):
            raise ConfigError("stage3_mix_prob must be in [0, 1]")


def lr_at(iteration: int, schedule: StageSchedule) -> float:
    if iteration < 0:
        raise ValueError(f"negative iteration {iteration}")
    return schedule.lr0 * schedule.decay ** (iteration // schedule.decay_every)


def hrp_loss(pred: Tensor, gt: Tensor, region_mask: np.ndarray,
             w_human: float = 5.0, w_other: float = 1.0) -> Tensor:
    """Region-weighted L1: emphasized pixels count ``w_human`` times."""
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    m = np.asarray(region_mask, dtype=pred.dtype)
    weights = m * (w_human - w_other) + w_other
    return tc.tmean(tc.absolute(pred - gt) * Tensor(weights))


def bce_mask_loss(pred_mask: Tensor, gt_mask: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with [eps, 1-eps] saturation guard."""
    gt = np.asarray(gt_mask, dtype=pred_mask.dtype)
    if gt.shape != pred_mask.shape:
        raise ShapeError(f"mask shapes differ: {pred_mask.shape} vs {gt.shape}")
    p = tc.clamp(pred_mask, BCE_EPS, 1.0 - BCE_EPS)
    term = Tensor(gt) * tc.log(p) + Tensor(1.0 - gt) * tc.log(1.0 - p)
    return tc.neg(tc.tmean(term))


def total_loss(priority: Tensor, mask_term: Tensor,
               weights: LossWeights) -> Tensor:
    return priority * weights.lambda_priority + mask_term * weights.lambda_mask


class Adam:
    """Bias-corrected Adam over named parameters.

    Step counts are tracked per parameter so stage-3's alternating routes
    keep correct bias correction for parameters updated on only one route.
    """

    def __init__(self, params: Sequence, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)  # (name, Tensor) pairs
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(t.data) for n, t in self.params}
        self.v = {n: np.zeros_like(t.data) for n, t in self.params}
        self.t = {n: 0 for n, _ in self.params}

    def step(self, lr: float) -> None:
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NonFiniteError("adam_step", f"non-finite gradient in '{name}'")
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def select_params(model: RetouchNet, prefixes) -> List:
    return [(n, p) for n, p in model.named_parameters()
            if n.startswith(tuple(prefixes))]


def set_trainable(model: RetouchNet, prefixes) -> None:
    pref = tuple(prefixes)
    for name, p in model.named_parameters():
        p.requires_grad = name.startswith(pref)
        p.grad = None


def param_hashes(model: RetouchNet) -> Dict[str, str]:
    return {n: hashlib.sha256(np.ascontiguousarray(t.data).tobytes()).hexdigest()
            for n, t in model.named_parameters()}


@dataclass
class LossRow:
    iteration: int
    stage: int
    lr: float
    loss_priority: float
    loss_mask: float
    loss_total: float

    def csv(self) -> str:
        return (f"{self.iteration},{self.stage},{self.lr:.8g},"
                f"{self.loss_priority:.8g},{self.loss_mask:.8g},{self.loss_total:.8g}")


LOSS_CSV_HEADER = "iter,stage,lr,loss_priority,loss_mask,loss_total"


def _click_seed(seed: int, iteration: int, slot: int) -> int:
    return int(np.random.SeedSequence((seed, iteration, slot)).generate_state(1)[0])


def _batch_arrays(samples, idx) -> tuple:
    xs = np.stack([samples[i].input for i in idx])
    ys = np.stack([samples[i].gt for i in idx])
    return xs, ys


def _interactive_batch(samples, idx, seed: int, iteration: int, dtype):
    """Simulated clicks for one batch: guidance maps, loss-target masks."""
    gps, gns, targets = [], [], []
    for slot, i in enumerate(idx):
        s = samples[i]
        if not s.instances:
            raise ConfigError(f"sample {s.id} has no instance masks; "
                              "stages 2-3 require them")
        cseed = _click_seed(seed, iteration, slot)
        pick = int(np.random.default_rng(cseed).integers(len(s.instances)))
        inst = s.instances[pick]
        clicks = simulate_clicks(inst, cseed + 1)
        h, w = inst.shape[-2:]
        gp, gn = rasterize(clicks, h, w)
        gps.append(gp[0])
        gns.append(gn[0])
        # emphasized instance = the positively clicked one; no positive
        # clicks leaves nothing emphasized
        target = inst.reshape(1, h, w) if clicks.positive else np.zeros((1, h, w))
        targets.append(target)
    return (np.stack(gps).astype(dtype), np.stack(gns).astype(dtype),
            np.stack(targets).astype(dtype))


def _auto_step(model, xs, ys, masks, weights) -> tuple:
    out = model.forward_automatic(Tensor(xs))
    lp = hrp_loss(out.image, Tensor(ys), masks, weights.w_human, weights.w_other)
    lm = bce_mask_loss(out.mask, masks)
    lt = total_loss(lp, lm, weights)
    tc.backward(lt)
    return float(lp.data), float(lm.data), float(lt.data)


def _interactive_step(model, xs, ys, gp, gn, targets, weights) -> tuple:
    out = model.forward_interactive_maps(Tensor(xs), Tensor(gp), Tensor(gn))
    lp = hrp_loss(out.image, Tensor(ys), targets, weights.w_human, weights.w_other)
    lm = bce_mask_loss(out.mask, targets)
    lt = total_loss(lp, lm, weights)
    tc.backward(lt)
    return float(lp.data), float(lm.data), float(lt.data)


def train_stagewise(samples, model: RetouchNet, schedule: StageSchedule,
                    weights: LossWeights, seed: int,
                    progress: Optional[callable] = None) -> List[LossRow]:
    """Run the three training stages in place; returns the loss log."""
    schedule.validate()
    weights.validate()
    if not samples:
        raise ConfigError("empty training set")
    if (schedule.stage2_iters or schedule.stage3_iters) and \
            any(not s.instances for s in samples):
        raise ConfigError("stages 2-3 need instance masks on every sample")

    dtype = model.dtype
    log: List[LossRow] = []
    giter = 0

    def run_stage(stage: int, iters: int, trainable, step_fn):
        nonlocal giter
        set_trainable(model, trainable)
        opt = Adam(select_params(model, trainable))
        rng = np.random.default_rng(np.random.SeedSequence((seed, stage)))
        for _ in range(iters):
            giter += 1
            idx = rng.integers(0, len(samples), size=schedule.batch)
            lr = lr_at(giter - 1, schedule)
            lp, lm, lt = step_fn(rng, idx)
            opt.step(lr)
            opt.zero_grad()
            log.append(LossRow(giter, stage, lr, lp, lm, lt))
            if progress is not None:
                progress(giter, stage, log[-1])

    def stage1_step(rng, idx):
        xs, ys = _batch_arrays(samples, idx)
        masks = np.stack([samples[i].region_mask for i in idx]).astype(dtype)
        return _auto_step(model, xs, ys, masks, weights)

    def stage2_step(rng, idx):
        xs, ys = _batch_arrays(samples, idx)
        gp, gn, targets = _interactive_batch(samples, idx, seed, giter, dtype)
        return _interactive_step(model, xs, ys, gp, gn, targets, weights)

    run_stage(1, schedule.stage1_iters, AUTO_PREFIXES, stage1_step)
    run_stage(2, schedule.stage2_iters, INTERACTIVE_ROUTE_PREFIXES, stage2_step)

    # stage 3: route drawn per iteration; parameters outside the drawn route
    # stay frozen for that step
    if schedule.stage3_iters:
        set_trainable(model, AUTO_PREFIXES + ("it.",))
        opt = Adam(list(model.named_parameters()))
        rng = np.random.default_rng(np.random.SeedSequence((seed, 3)))
        for _ in range(schedule.stage3_iters):
            giter += 1
            idx = rng.integers(0, len(samples), size=schedule.batch)
            interactive = bool(rng.random() < schedule.stage3_mix_prob)
            set_trainable(model, INTERACTIVE_ROUTE_PREFIXES if interactive
                          else AUTO_PREFIXES)
            lr = lr_at(giter - 1, schedule)
            if interactive:
                xs, ys = _batch_arrays(samples, idx)
                gp, gn, targets = _interactive_batch(samples, idx, seed, giter, dtype)
                lp, lm, lt = _interactive_step(model, xs, ys, gp, gn, targets, weights)
            else:
                xs, ys = _batch_arrays(samples, idx)
                masks = np.stack([samples[i].region_mask for i in idx]).astype(dtype)
                lp, lm, lt = _auto_step(model, xs, ys, masks, weights)
            opt.step(lr)
            opt.zero_grad()
            log.append(LossRow(giter, 3, lr, lp, lm, lt))
            if progress is not None:
                progress(giter, 3, log[-1])

    for _, p in model.named_parameters():
        p.requires_grad = True
        p.grad = None
    return log
