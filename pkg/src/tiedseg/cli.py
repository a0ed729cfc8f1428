"""Command-line entry point: ``tiedseg <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from tiedseg.data import SynthSpec, generate_synthetic, load_image, read_dataset, save_mask, write_dataset
from tiedseg.errors import TiedSegError
from tiedseg.evaluate import (
    evaluate_dataset,
    export_heatmap,
    predict_mask,
    topk_activation_profile,
    write_profiles_csv,
)
from tiedseg.experiment import ExperimentConfig, run_experiment
from tiedseg.model import NetworkConfig, build, read_checkpoint
from tiedseg.tensor import make_rng
from tiedseg.trainer import TrainConfig, train_stage_plan

log = logging.getLogger("tiedseg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _stage_of(params: dict) -> int:
    stages = [int(n[len("deconv"):].split("_")[0]) for n in params if n.startswith("deconv")]
    return max(stages, default=0)


def _load_net(ckpt: Path, config: Path | None, stage: int | None):
    params = read_checkpoint(ckpt)
    cfg_path = config if config is not None else ckpt.parent / "config.json"
    if not cfg_path.exists():
        raise TiedSegError(f"no network config given and {cfg_path} does not exist")
    cfg = NetworkConfig.load(cfg_path)
    found = _stage_of(params)
    if stage is not None and stage != found:
        raise TiedSegError(f"checkpoint holds a stage-{found} network, not stage {stage}")
    # every parameter comes from the checkpoint, so the init draw is irrelevant
    net = build(cfg, found, make_rng(0))
    loaded = net.load_state(params)
    missing = set(net.store.names()) - set(loaded)
    if missing:
        raise TiedSegError(f"checkpoint lacks parameters {sorted(missing)}")
    return net


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ---- subcommands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = SynthSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else SynthSpec()
    if args.count is not None:
        spec.count = args.count
    if args.seed is not None:
        spec.seed = args.seed
    write_dataset(args.out, generate_synthetic(spec), spec.to_dict())
    print(f"wrote {spec.count} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = NetworkConfig.load(args.config)
    plan = TrainConfig.load(args.plan)
    samples = read_dataset(args.data, task=cfg.task, num_classes=cfg.num_classes, with_masks=False)
    base = read_checkpoint(args.init) if args.init else None
    train_stage_plan(cfg, plan, samples, args.out, base=base)
    print(f"checkpoints written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    net = _load_net(Path(args.ckpt), args.config, args.stage)
    cfg = net.config
    samples = read_dataset(args.data, task=cfg.task, num_classes=cfg.num_classes)
    taus = args.tau if cfg.task == "binary" else args.tau[:1]
    for i, tau in enumerate(taus):
        rep = evaluate_dataset(net, samples, tau=tau)
        if i == 0:
            rep.seg.write_csv(args.out)
        prefix = f"tau {tau:g}: " if len(taus) > 1 else ""
        print(f"{prefix}mean IoU {rep.seg.mean_iou:.4f}  foreground mean IoU {rep.seg.mean_foreground_iou:.4f}  label accuracy {rep.accuracy:.4f}")
    return 0


def cmd_infer(args) -> int:
    net = _load_net(Path(args.ckpt), args.config, args.stage)
    image = load_image(args.image)
    grid, maps, y = predict_mask(net, image, tau=args.tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_mask(out / "mask.pgm", grid[0])
    gray = image[0].mean(axis=0)
    for c in range(maps.shape[1]):
        export_heatmap(maps[0, c], gray, out / f"heat_{c}.ppm")
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "score"])
        for c, v in enumerate(y[0]):
            w.writerow([c, f"{v:.6f}"])
    print(f"mask and {maps.shape[1]} heat maps written to {out}")
    return 0


def cmd_analyze(args) -> int:
    net = _load_net(Path(args.ckpt), args.config, args.stage)
    layers = [name.strip() for name in args.layers.split(",") if name.strip()]
    if args.image:
        image = load_image(args.image)
    else:
        samples = read_dataset(args.data, task=net.config.task, num_classes=net.config.num_classes, with_masks=False)
        image = samples[args.index].image
    profiles = [topk_activation_profile(net, image, layer, args.k) for layer in layers]
    write_profiles_csv(args.out, profiles)
    mid = args.k // 2
    for p in profiles:
        at = p.values[min(mid, len(p.values) - 1)]
        print(f"{p.layer}: value at rank {mid} = {at:.4f}")
    return 0


def cmd_experiment(args) -> int:
    exp = ExperimentConfig.load(args.preset)
    for s in run_experiment(exp, args.out):
        print(f"stage {s.stage}: accuracy {s.accuracy:.4f}  mean IoU {s.mean_iou:.4f}  foreground mean IoU {s.mean_fg_iou:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tiedseg", description="Weakly-supervised segmentation with tied deconvolution stacks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    g.add_argument("--spec", help="synthetic spec JSON (defaults to built-in values)")
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run a staged training plan")
    t.add_argument("--config", required=True, help="network config JSON or shipped preset name (tb.json, voc16.json, synth.json)")
    t.add_argument("--plan", required=True, help="training plan JSON")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", default="run", help="output directory for checkpoints and metrics")
    t.add_argument("--init", help="checkpoint to start from")
    t.set_defaults(func=cmd_train)

    def net_args(sp):
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--config", type=Path, help="network config (default: config.json beside the checkpoint)")
        sp.add_argument("--stage", type=int, help="expected stage; checked against the checkpoint")

    e = sub.add_parser("eval", help="pixel IoU of a checkpoint on a labelled dataset")
    net_args(e)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default="iou.csv")
    e.add_argument("--tau", type=_floats, default=[0.5], help="binary threshold(s); a list sweeps them")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="mask and heat maps for one image")
    net_args(i)
    i.add_argument("--image", required=True)
    i.add_argument("--out", default="infer")
    i.add_argument("--tau", type=float, default=0.5)
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("analyze", help="top-k activation profiles of chosen layers")
    net_args(a)
    src = a.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--data", help="dataset directory; profiles image number --index")
    a.add_argument("--index", type=int, default=0)
    a.add_argument("--layers", default="conv3,deconv3")
    a.add_argument("--k", type=int, default=10000)
    a.add_argument("--out", default="profiles.csv")
    a.set_defaults(func=cmd_analyze)

    x = sub.add_parser("experiment", help="train and score every stage of an experiment preset")
    x.add_argument("--preset", default="synth_experiment", help="experiment JSON or shipped preset name")
    x.add_argument("--out", default="experiment")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (TiedSegError, OSError, json.JSONDecodeError) as exc:
        print(f"tiedseg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
