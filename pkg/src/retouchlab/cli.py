"""Command-line entry points: dataset generation, training, evaluation,
single-image retouching, Bradley-Terry scoring, and the HTTP service."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import tensor as tc
from .checkpoint import load_tensors, save_tensors
from .config import RunConfig
from .data import (GenConfig, generate, load_dataset, load_image, save_dataset,
                   save_image, save_mask, split)
from .errors import (CheckpointError, ConfigError, InvalidInputError,
                     NonFiniteError, ShapeError)
from .guidance import ClickSet, simulate_clicks
from .metrics import MetricsReport, bt_scores, evaluate_pair, preference_rate, read_pairwise_csv
from .model import RetouchNet
from .tensor import Tensor
from .training import LOSS_CSV_HEADER, train_stagewise


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {f.name for f in fields(RunConfig)}
    for key, val in vars(args).items():
        if key in overrides and val is not None:
            setattr(cfg, key, val)
    cfg.validate()
    return cfg


def _add_config_args(p, keys):
    for key in keys:
        default_field = next(f for f in fields(RunConfig) if f.name == key)
        kind = {int: int, float: float, str: str}[type(getattr(RunConfig(), key))]
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind,
                       default=None, help=f"override config '{key}' "
                       f"(default {getattr(RunConfig(), key)})")
    return p


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    samples = generate(cfg.gen_config())
    train, test = split(samples, cfg.train_fraction, cfg.seed)
    manifest = save_dataset(args.out or cfg.dataset_root, cfg.gen_config(),
                            train, test)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    samples = load_dataset(args.dataset or cfg.dataset_root, "train")
    model = RetouchNet(seed=cfg.seed, temperature=cfg.tau)
    t0 = time.time()

    def progress(giter, stage, row):
        if giter % max(1, args.log_every) == 0:
            rate = giter / max(time.time() - t0, 1e-9)
            print(f"stage {stage} iter {giter} loss {row.loss_total:.5f} "
                  f"lr {row.lr:.2e} ({rate:.2f} it/s)", flush=True)

    log = train_stagewise(samples, model, cfg.schedule(), cfg.loss_weights(),
                          cfg.seed, progress=progress if args.log_every else None)
    out = Path(args.out or cfg.checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_tensors(out, model.state_dict())
    csv_path = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    csv_path.write_text(LOSS_CSV_HEADER + "\n"
                        + "\n".join(r.csv() for r in log) + "\n", encoding="utf-8")
    print(out)
    return 0


def _load_model(checkpoint_path, tau: float = 1.0) -> RetouchNet:
    state = load_tensors(checkpoint_path)
    model = RetouchNet(seed=0, temperature=tau)
    model.load_state_dict(state)
    return model


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = _load_model(args.checkpoint or cfg.checkpoint, cfg.tau)
    samples = load_dataset(args.dataset or cfg.dataset_root, args.split)
    report = MetricsReport()
    rng = np.random.default_rng(cfg.seed)
    with tc.no_grad():
        for s in samples:
            x = Tensor(s.input[None])
            if args.mode == "automatic":
                out = model.forward_automatic(x)
            else:
                pick = int(rng.integers(len(s.instances)))
                clicks = simulate_clicks(s.instances[pick],
                                         int(rng.integers(2 ** 31)))
                out = model.forward_interactive(x, clicks)
            row = evaluate_pair(s.input, out.image.data[0], s.gt, s.region_mask)
            report.add(s.id, row)
    base = Path(args.out or f"eval_{args.mode}")
    report.write(base.with_suffix(".json"), base.with_suffix(".csv"))
    means = report.means()
    print(json.dumps({"images": len(samples), **means}))
    return 0


def _pad_to_16(img: np.ndarray):
    _, h, w = img.shape
    ph = (16 - h % 16) % 16
    pw = (16 - w % 16) % 16
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return img, h, w


def cmd_retouch(args) -> int:
    cfg = _load_config(args)
    model = _load_model(args.checkpoint or cfg.checkpoint, cfg.tau)
    raw = load_image(args.image)
    padded, h, w = _pad_to_16(raw)
    x = Tensor(padded[None])
    with tc.no_grad():
        if args.clicks:
            clicks = ClickSet.from_json(Path(args.clicks).read_text(encoding="utf-8"))
            for r, c in clicks.positive + clicks.negative:
                if not (0 <= r < h and 0 <= c < w):
                    raise InvalidInputError(f"click ({r},{c}) outside {h}x{w} image")
            out = model.forward_interactive(x, clicks)
        else:
            out = model.forward_automatic(x)
    image = out.image.data[0][:, :h, :w]
    mask = out.mask.data[0][:, :h, :w]
    residual = np.abs(image - raw).mean(axis=0, keepdims=True)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_image(out_dir / "output.png", image)
    save_image(out_dir / "residual.png",
               np.repeat(np.clip(residual * 4.0, 0.0, 1.0), 3, axis=0))
    save_image(out_dir / "mask.png", np.repeat(mask, 3, axis=0))
    print(out_dir)
    return 0


def cmd_bt(args) -> int:
    records = read_pairwise_csv(args.pairs)
    scores = bt_scores(records, smoothing=args.smoothing)
    rates = preference_rate(records)
    table = {m: {"bt_score": scores[m], "preference_rate": rates[m]}
             for m in scores}
    text = json.dumps(table, indent=2)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    cfg = _load_config(args)
    app = create_app(args.checkpoint or cfg.checkpoint, tau=cfg.tau,
                     static_dir=args.static_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="retouchlab",
                                description="Region-aware portrait retouching "
                                            "with sparse click guidance")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", help="dataset root directory")
    _add_config_args(g, ["count", "image_size", "seed", "train_fraction",
                         "min_instances", "max_instances"])
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run the three-stage training")
    t.add_argument("--config")
    t.add_argument("--dataset", help="dataset root (overrides config)")
    t.add_argument("--out", help="checkpoint output path")
    t.add_argument("--loss-csv", help="loss log path (default: <out>.loss.csv)")
    t.add_argument("--log-every", type=int, default=0,
                   help="print progress every N iterations")
    _add_config_args(t, ["seed", "stage1_iters", "stage2_iters", "stage3_iters",
                         "lr0", "decay", "decay_every", "batch",
                         "stage3_mix_prob", "tau"])
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--dataset")
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--mode", default="automatic",
                   choices=["automatic", "interactive"])
    e.add_argument("--out", help="report basename (writes .json and .csv)")
    _add_config_args(e, ["seed", "tau"])
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("retouch", help="retouch one image")
    r.add_argument("--config")
    r.add_argument("--checkpoint")
    r.add_argument("--image", required=True)
    r.add_argument("--clicks", help="clicks JSON file "
                   '({"positive":[[r,c],...],"negative":[...]})')
    r.add_argument("--out-dir", default="retouch_out")
    _add_config_args(r, ["tau"])
    r.set_defaults(fn=cmd_retouch)

    b = sub.add_parser("bt", help="Bradley-Terry scores from a pairwise CSV")
    b.add_argument("--pairs", required=True)
    b.add_argument("--smoothing", type=float, default=0.1)
    b.add_argument("--out")
    b.set_defaults(fn=cmd_bt)

    s = sub.add_parser("serve", help="run the interactive HTTP service")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8715)
    s.add_argument("--static-dir", help="optional directory of UI assets to serve")
    _add_config_args(s, ["tau"])
    s.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, InvalidInputError, ShapeError, CheckpointError,
            NonFiniteError, FileNotFoundError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
