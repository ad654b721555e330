"""Command line entry point: gen, train, eval, distort, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("tracefuse")

DEFAULT_MIX = "splice=0.25,copy_move=0.25,remove=0.25,authentic=0.25"


def cmd_gen(args) -> int:
    from .forge.dataset import build_dataset, parse_mix
    manifest = build_dataset(args.n, parse_mix(args.mix), args.seed, args.out)
    print(f"wrote {len(manifest)} samples to {args.out} (config hash {manifest.config_hash})")
    return 0


def cmd_train(args) -> int:
    from .config import load_config
    from .forge.dataset import load_manifest
    from .train import save_checkpoint, train
    cfg = load_config(args.config)
    overrides = {k: v for k, v in (("total_iters", args.iters), ("seed", args.seed)) if v is not None}
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    manifest = load_manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
    with open(out / "losses.csv", "w", encoding="utf-8") as fh:
        fh.write("step,lr,loss,text,mask,constraint_violation\n")

        def on_step(e, _model):
            fh.write(f"{e.step},{e.lr:.6e},{e.loss:.6f},{e.text:.6f},{e.mask:.6f},{e.constraint_violation:.3e}\n")

        result = train(cfg, manifest, on_step=on_step)
    save_checkpoint(out / "model.tfck", result.model, cfg, cfg.total_iters, result.rng_state)
    print(f"trained {cfg.total_iters} steps in {result.seconds:.1f}s; checkpoint {out / 'model.tfck'}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import TABLE_ROWS, DistortionSpec, evaluate
    from .forge.dataset import load_manifest
    from .train import load_checkpoint
    model = load_checkpoint(args.checkpoint).model
    manifest = load_manifest(args.data)
    if args.table:
        specs = list(TABLE_ROWS)
    else:
        specs = [DistortionSpec.parse(s) for s in (args.distortion or ["NONE"])]
    report = evaluate(model, manifest, specs, seed=args.seed)
    report.save(args.out)
    if args.masks:
        from .evaluation import write_mask_png
        images, _ = manifest.load_arrays()
        mdir = Path(args.out) / "masks"
        mdir.mkdir(parents=True, exist_ok=True)
        for i in range(0, len(images), 32):
            probs, _ = model.predict(images[i:i + 32])
            for j, p in enumerate(probs):
                write_mask_png(mdir / f"{i + j:05d}.png", p)
    sys.stdout.write(report.to_csv())
    return 0


def cmd_distort(args) -> int:
    from .evaluation import DistortionSpec, distort
    from .forge.dataset import read_png, write_png
    img = read_png(Path(args.image))
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    out = distort(img, DistortionSpec.parse(args.spec), seed=args.seed)
    write_png(Path(args.out), out)
    return 0


def cmd_report(args) -> int:
    from .evaluation import MetricsReport
    rows = ["run,distortion,f1_fixed,f1_optimal,auc,recall_fake,n_images"]
    for path in args.inputs:
        p = Path(path)
        if p.is_dir():
            p = p / "metrics.json"
        rep = MetricsReport.from_json(p.read_text(encoding="utf-8"))
        for r in rep.results:
            rows.append(f"{p.parent.name},{r.distortion},{r.f1_fixed:.4f},{r.f1_optimal:.4f},"
                        f"{r.auc:.4f},{r.recall_fake:.4f},{r.n_images}")
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tracefuse", description="Synthetic forgery detection toolkit")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, required=True, help="number of samples")
    g.add_argument("--mix", default=DEFAULT_MIX, help="type fractions, e.g. " + DEFAULT_MIX)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", help="key = value config file (defaults if omitted)")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--iters", type=int, help="override total_iters")
    t.add_argument("--seed", type=int, help="override seed (FORGE_SEED also works)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--distortion", action="append", help="e.g. NONE, RESIZE:0.78, GAUSS_BLUR:3, GAUSS_NOISE:15, JPEG:50")
    e.add_argument("--table", action="store_true", help="run the full robustness battery")
    e.add_argument("--masks", action="store_true", help="also write predicted masks as PNG")
    e.add_argument("--seed", type=int, default=0, help="noise seed")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("distort", help="apply one distortion to an image")
    d.add_argument("--image", required=True)
    d.add_argument("--spec", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_distort)

    r = sub.add_parser("report", help="merge evaluation reports into one table")
    r.add_argument("inputs", nargs="+", help="report directories or metrics.json files")
    r.add_argument("--out", help="write the merged CSV here")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"tracefuse {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
