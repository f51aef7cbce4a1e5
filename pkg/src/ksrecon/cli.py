"""Command line front end: mask generation, dataset synthesis, training,
evaluation, single-image reconstruction and loss-curve plotting.

Every command is deterministic given --seed. Exit codes: 0 success, 2 for
validation problems (bad flags, malformed configs, missing inputs), 3 for
runtime or data errors. Commands that produce an output directory write
exactly one ``run_manifest.json`` there recording the resolved
configuration, which suffices to replay the run bit-identically.

The KSR_THREADS environment variable caps BLAS parallelism (default 1 for
deterministic arithmetic); it must take effect before numpy first loads, so
this module defers all heavy imports until after :func:`main` has
configured the thread pool.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _configure_threads():
    n = os.environ.get("KSR_THREADS", "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, n)


def _tool_version():
    from ksrecon import __version__

    return __version__


def _write_run_manifest(out_dir, command, config, seed, inputs, outputs, started):
    manifest = {
        "tool": "ksrecon",
        "version": _tool_version(),
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": sorted(inputs),
        "outputs": sorted(outputs),
        "duration_s": time.time() - started,
    }
    path = os.path.join(str(out_dir), "run_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_run_manifest(out_dir):
    path = os.path.join(str(out_dir), "run_manifest.json")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# -- mask ----------------------------------------------------------------------


def cmd_mask(args) -> int:
    from ksrecon.kspace import MaskConfig, make_mask

    if args.center_frac is None:
        frac = 1.0 if args.kind == "center" else 0.8
    else:
        frac = args.center_frac
    config = MaskConfig(k=args.factor, kind=args.kind, center_fraction=frac)
    mask = make_mask(args.lines, config)
    mask.save(args.out)
    print(f"kept {mask.n_kept} of {mask.length} lines "
          f"(acceleration {mask.acceleration:.2f})")
    return EXIT_OK


# -- synth ---------------------------------------------------------------------


def _parse_shape(text):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except Exception:
        raise ValueError(f"shape must look like 64x64, got {text!r}")


def cmd_synth(args) -> int:
    from ksrecon.data import PhantomSpec, build_dataset
    from ksrecon.kspace import SamplingMask

    if not os.path.exists(args.mask):
        raise FileNotFoundError(f"mask file not found: {args.mask}")
    mask = SamplingMask.load(args.mask)
    shape = _parse_shape(args.shape)
    if mask.length != shape[1]:
        raise ValueError(
            f"mask covers {mask.length} lines but shape {args.shape} has width {shape[1]}"
        )
    started = time.time()
    spec = PhantomSpec(shape=shape, n_ellipses=args.ellipses,
                       n_lesions=args.lesions, seed=args.seed)
    build_dataset(args.n, spec, mask.config, args.out, base_seed=args.seed)
    config = {
        "n": args.n, "shape": list(shape), "mask": os.path.abspath(args.mask),
        "ellipses": args.ellipses, "lesions": args.lesions,
        "phantom": spec.to_dict(),
    }
    _write_run_manifest(args.out, "synth", config, args.seed,
                        [os.path.abspath(args.mask)],
                        [os.path.abspath(args.out)], started)
    print(f"wrote {args.n} triples to {args.out}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------

_TRAIN_KEYS = {"epochs", "batch_size", "lr", "beta1", "beta2", "eps",
               "patience", "min_delta", "val_fraction"}
_MODEL_KEYS = {"depth", "base_width", "num_layers", "growth_rate",
               "fuse_after_stages"}


def _load_train_config(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    unknown = set(raw) - {"train", "model"}
    if unknown:
        raise ValueError(f"{path}: unknown top-level keys {sorted(unknown)}")
    for section, allowed in (("train", _TRAIN_KEYS), ("model", _MODEL_KEYS)):
        extra = set(raw.get(section, {})) - allowed
        if extra:
            raise ValueError(f"{path}: unknown {section} keys {sorted(extra)}")
    return raw


def _resolve_train_setup(args, input_shape):
    from ksrecon.model import DenseBlockConfig, ModelConfig
    from ksrecon.training import TrainConfig

    overrides = _load_train_config(args.config)
    tdict = dict(overrides.get("train", {}))
    tdict["seed"] = args.seed
    train_cfg = TrainConfig(**tdict)

    m = dict(overrides.get("model", {}))
    width = m.get("base_width", 8)
    model_cfg = ModelConfig(
        depth=m.get("depth", 2),
        base_width=width,
        dense=DenseBlockConfig(
            growth_rate=m.get("growth_rate", 0),
            num_layers=m.get("num_layers", 2),
            width=width,
        ),
        multimodal=args.model == "multimodal",
        input_shape=input_shape,
        fuse_after_stages=m.get("fuse_after_stages", 1),
    )
    return train_cfg, model_cfg


def cmd_train(args) -> int:
    from ksrecon.data import load_dataset
    from ksrecon.model import build_model, load_checkpoint
    from ksrecon.training import train

    started = time.time()
    triples, _mask = load_dataset(args.data)
    if not triples:
        raise ValueError(f"dataset at {args.data} is empty")
    input_shape = triples[0].t2.shape
    train_cfg, model_cfg = _resolve_train_setup(args, input_shape)
    resolved = {
        "data": os.path.abspath(args.data),
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
    }

    os.makedirs(args.out, exist_ok=True)
    start_epoch = 0
    history = []
    if args.resume:
        previous = _read_run_manifest(args.out)
        if previous["config"] != resolved:
            raise ValueError(
                f"--resume requires an identical configuration; {args.out} was "
                f"produced with a different one"
            )
        model, manifest = load_checkpoint(
            os.path.join(args.out, "last.json"), os.path.join(args.out, "last.bin")
        )
        history = manifest["history"]
        start_epoch = manifest["epoch"] + 1
    else:
        model = build_model(model_cfg, seed=args.seed)

    result = train(model, triples, train_cfg, out_dir=args.out,
                   start_epoch=start_epoch, initial_history=history)
    _write_run_manifest(args.out, "train", resolved, args.seed,
                        [os.path.abspath(args.data)],
                        [os.path.abspath(args.out)], started)
    last = result.history[-1] if result.history else {}
    print(f"trained {len(result.history)} epochs; "
          f"best val loss {result.best_val_loss:.6f} at epoch {result.best_epoch}; "
          f"last val SSIM {100.0 * last.get('val_ssim', float('nan')):.1f}%")
    return EXIT_OK


# -- eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    import numpy as np

    from ksrecon.data import export_png8, load_dataset
    from ksrecon.metrics import ssim_windowed
    from ksrecon.model import load_checkpoint
    from ksrecon.training import aggregate_reports, predict, reports_from_predictions

    started = time.time()
    triples, _mask = load_dataset(args.data)
    if not triples:
        raise ValueError(f"dataset at {args.data} is empty")
    model, _manifest = load_checkpoint(
        os.path.join(args.checkpoint, f"{args.tag}.json"),
        os.path.join(args.checkpoint, f"{args.tag}.bin"),
    )
    os.makedirs(args.out, exist_ok=True)
    png_dir = os.path.join(args.out, "png")
    os.makedirs(png_dir, exist_ok=True)

    preds = predict(model, triples)
    ids = [t.id for t in triples]
    targets = [t.t2 for t in triples]
    reports = reports_from_predictions(ids, preds, targets)

    metrics_path = os.path.join(args.out, "metrics.jsonl")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for rep, pred, t in zip(reports, preds, triples):
            rec = json.loads(rep.to_json())
            if min(t.t2.shape) >= 11:
                rec["ssim_win"] = ssim_windowed(
                    t.t2.astype(np.float64), pred.astype(np.float64)
                )
            fh.write(json.dumps(rec) + "\n")

    zero_filled = [
        json.loads(
            reports_from_predictions([t.id], [t.t2sub.astype(np.float64)], [t.t2])[0].to_json()
        )
        for t in triples
    ]
    summary = {
        "count": len(reports),
        "model": aggregate_reports(reports),
        "zero_filled": {
            "mean_ssim": float(np.mean([z["ssim"] for z in zero_filled])),
            "median_ssim": float(np.median([z["ssim"] for z in zero_filled])),
            "mean_mse": float(np.mean([z["mse"] for z in zero_filled])),
        },
    }
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    for t, pred in zip(triples, preds):
        sep = np.ones((t.t2.shape[0], 2), dtype=np.float64)
        strip = np.concatenate(
            [t.t2sub.astype(np.float64), sep, pred.astype(np.float64), sep,
             t.t2.astype(np.float64)], axis=1,
        )
        export_png8(os.path.join(png_dir, f"{t.id}.png"), strip)

    _write_run_manifest(
        args.out, "eval",
        {"data": os.path.abspath(args.data),
         "checkpoint": os.path.abspath(args.checkpoint), "tag": args.tag},
        args.seed, [os.path.abspath(args.data), os.path.abspath(args.checkpoint)],
        [os.path.abspath(args.out)], started,
    )
    print(f"evaluated {len(reports)} samples: "
          f"model mean SSIM {100.0 * summary['model']['mean_ssim']:.1f}%, "
          f"zero-filled {100.0 * summary['zero_filled']['mean_ssim']:.1f}%")
    return EXIT_OK


# -- recon -----------------------------------------------------------------------


def cmd_recon(args) -> int:
    import numpy as np

    from ksrecon.data import export_png8, load_image, save_image, subsample_image
    from ksrecon.kspace import SamplingMask
    from ksrecon.model import load_checkpoint

    for path in (args.t2, args.mask):
        if not os.path.exists(path):
            raise FileNotFoundError(f"input not found: {path}")
    t2 = load_image(args.t2)
    mask = SamplingMask.load(args.mask)
    model, _ = load_checkpoint(
        os.path.join(args.checkpoint, f"{args.tag}.json"),
        os.path.join(args.checkpoint, f"{args.tag}.bin"),
    )
    t2sub = subsample_image(t2, mask)
    flair = None
    if model.multimodal:
        if args.flair is None:
            raise ValueError("checkpoint is multimodal: --flair is required")
        if not os.path.exists(args.flair):
            raise FileNotFoundError(f"input not found: {args.flair}")
        flair = load_image(args.flair)[None, None]
    pred = model.forward(t2sub[None, None], flair, training=False).data[0, 0]
    save_image(args.out, pred.astype(np.float32))
    export_png8(str(args.out) + ".png", pred.astype(np.float64))
    print(f"wrote reconstruction to {args.out}")
    return EXIT_OK


# -- plot ------------------------------------------------------------------------


def _svg_polyline(points, color):
    coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    return (f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{coords}"/>')


def cmd_plot(args) -> int:
    from ksrecon.training import read_history_csv

    history = read_history_csv(args.history)
    if not history:
        raise ValueError(f"{args.history}: empty history")
    width, height, pad = 640, 400, 45
    series = [("train_loss", "#1f77b4"), ("val_loss", "#d62728")]
    values = [row[name] for name, _ in series for row in history]
    lo, hi = min(values), max(values)
    span = (hi - lo) or 1.0
    epochs = [row["epoch"] for row in history]
    e0, e1 = min(epochs), max(epochs)
    es = (e1 - e0) or 1

    def sx(e):
        return pad + (e - e0) / es * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - lo) / span * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" stroke="black"/>',
        f'<text x="{width//2}" y="{height-10}" font-size="12" text-anchor="middle">epoch</text>',
        f'<text x="12" y="{height//2}" font-size="12" transform="rotate(-90 12 {height//2})" '
        f'text-anchor="middle">loss</text>',
    ]
    for idx, (name, color) in enumerate(series):
        pts = [(sx(row["epoch"]), sy(row[name])) for row in history]
        parts.append(_svg_polyline(pts, color))
        parts.append(f'<text x="{width-pad-130}" y="{pad+14*(idx+1)}" font-size="12" '
                     f'fill="{color}">{name}</text>')
    parts.append(f'<text x="{pad}" y="{pad-8}" font-size="11">min {lo:.4g}, max {hi:.4g}</text>')
    parts.append("</svg>")
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
    print(f"wrote {args.out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ksrecon",
        description="Simulate accelerated MR acquisition and reconstruct "
                    "subsampled images with a multimodal dense U-Net.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", help="generate a phase-encode sampling mask")
    p.add_argument("--lines", type=int, required=True)
    p.add_argument("--factor", type=float, default=4.0)
    p.add_argument("--kind", choices=("center", "custom"), default="custom")
    p.add_argument("--center-frac", type=float, default=None, dest="center_frac",
                   help="fraction of kept lines in the center block "
                        "(default: 0.8 custom, 1.0 center)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("synth", help="synthesize a paired-phantom dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--shape", default="64x64")
    p.add_argument("--mask", required=True)
    p.add_argument("--ellipses", type=int, default=6)
    p.add_argument("--lesions", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a reconstruction model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=("multimodal", "unimodal"), default="multimodal")
    p.add_argument("--config", default=None, help="JSON file with train/model sections")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tag", default="best", choices=("best", "last"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("recon", help="reconstruct one raw T2 image end to end")
    p.add_argument("--t2", required=True)
    p.add_argument("--flair", default=None)
    p.add_argument("--mask", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tag", default="best", choices=("best", "last"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("plot", help="render history.csv as an SVG loss curve")
    p.add_argument("--history", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    _configure_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, NotADirectoryError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RuntimeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
