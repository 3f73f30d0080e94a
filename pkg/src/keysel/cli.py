"""Command-line entry point: ``keysel {gen-data,train,eval,gradcheck,viz}``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import images
from .config import load_run_config
from .errors import BadConfig, KeyselError
from .gradcheck import gradcheck_suite
from .harness import evaluate_split, scene_keypoints_px, train
from .losses import pixelwise_correlation_map
from .model import load_checkpoint, model_forward
from .synth import SceneGeometry, SynthConfig, gen_dataset, load_dataset
from .tensor import load_tensor

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
ABLATIONS = ("local", "aux", "vi", "corr")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="keysel", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic two-modality dataset")
    defaults = SceneGeometry()
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--classes", type=int, default=defaults.num_classes)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train", type=int, default=SynthConfig.train_per_class, help="per class, before the validation carve-out")
    g.add_argument("--test", type=int, default=SynthConfig.test_per_class, help="per class")
    g.add_argument("--val-fraction", type=float, default=SynthConfig.val_fraction)
    g.add_argument("--size", type=int, default=defaults.size)
    g.add_argument("--radius-min", type=float, default=defaults.radius_min)
    g.add_argument("--radius-max", type=float, default=defaults.radius_max)
    g.add_argument("--noise-amp", type=float, default=defaults.noise_amp)
    g.add_argument("--distractors", type=int, default=defaults.distractors)

    t = sub.add_parser("train", help="train a model from a run-config file")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--data", required=True, type=Path, help="dataset manifest")
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--ablate", action="append", default=[], choices=ABLATIONS)
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")

    e = sub.add_parser("eval", help="score a checkpoint on one split")
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--predictions", type=Path, help="write index,label,prediction CSV here")

    c = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    c.add_argument("--seeds", type=int, default=20)

    v = sub.add_parser("viz", help="render correlation maps or keypoint overlays")
    v.add_argument("--checkpoint", required=True, type=Path)
    v.add_argument("--sample", required=True, nargs=2, action="append", metavar=("RGB", "D"),
                   help="pair of DTEN image files; repeatable")
    v.add_argument("--out", required=True, type=Path)
    v.add_argument("--mode", required=True, choices=("corr", "keypoints"))
    return p


def cmd_gen_data(a) -> int:
    geom = SceneGeometry(
        size=a.size,
        num_classes=a.classes,
        radius_min=a.radius_min,
        radius_max=a.radius_max,
        noise_amp=a.noise_amp,
        distractors=a.distractors,
    )
    cfg = SynthConfig(geom, a.train, a.test, a.val_fraction)
    manifest = gen_dataset(cfg, a.seed, a.out)
    print(manifest.path)
    return EXIT_OK


def cmd_train(a) -> int:
    model_cfg, train_cfg = load_run_config(a.config)
    train_cfg = train_cfg.ablate(*a.ablate)
    res = train(model_cfg, train_cfg, a.data, a.out, resume=a.resume)
    print(f"best_epoch={res.state.best_epoch} best_val_mca={res.state.best_mca:.6f}")
    print(res.best_checkpoint)
    return EXIT_OK


def cmd_eval(a) -> int:
    params, _ = load_checkpoint(a.checkpoint)
    split = load_dataset(a.data)[a.split]
    report, _ = evaluate_split(params, split)
    print(report.format())
    if a.predictions is not None:
        lines = ["index,label,prediction"]
        lines += [f"{i},{y},{p}" for i, (y, p) in enumerate(zip(split.labels, report.predictions))]
        a.predictions.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    if a.seeds < 0:
        raise _UsageError("--seeds must be >= 0")
    report = gradcheck_suite(a.seeds, on_result=lambda r: print(r.line(), flush=True))
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_viz(a) -> int:
    params, _ = load_checkpoint(a.checkpoint)
    config = params.config
    a.out.mkdir(parents=True, exist_ok=True)
    if a.mode == "keypoints" and config.dlfs is None:
        raise BadConfig("checkpoint has no local branch, so there are no keypoints")
    for rgb_path, d_path in a.sample:
        x_rgb, x_d = load_tensor(rgb_path), load_tensor(d_path)
        out = model_forward(params, x_rgb, x_d)
        stem = Path(rgb_path).stem
        if stem.endswith("_rgb"):
            stem = stem[: -len("_rgb")]
        if a.mode == "corr":
            corr = pixelwise_correlation_map(out.f_rgb[0], out.f_d[0])
            dest = a.out / f"{stem}_corr.pgm"
            images.write_pnm(dest, images.correlation_image(corr, config.total_stride))
            print(dest)
        else:
            pts = scene_keypoints_px(config, out.keypoints, 0)
            per_scale, start = [], 0
            for k in config.dlfs.ks:
                per_scale.append(pts[start:start + k])
                start += k
            for name, x in (("rgb", x_rgb), ("d", x_d)):
                dest = a.out / f"{stem}_{name}_keypoints.ppm"
                images.write_pnm(dest, images.keypoint_overlay(x, per_scale))
                print(dest)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "viz": cmd_viz,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"keysel: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BadConfig as exc:
        print(f"keysel: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KeyselError, OSError) as exc:
        print(f"keysel: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
