"""Command-line entry point: ``stfer <command> ...``."""
import argparse
import json
import logging
import sys
import time

import numpy as np

from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig
from .synth_data import SCENARIOS, generate_dataset, load_dataset, save_dataset
from .text_semantics import (DEFAULT_IMAGES_PER_IDENTITY, DescriptionFormatError, SyntheticProvider,
                             build_library, save_description_file)
from .training import TrainingDiverged, evaluate, export_heatmap, train

log = logging.getLogger("stfer")


def cmd_gen_data(args):
    ds = generate_dataset(num_ids=args.ids, seed=args.seed, num_train=args.train,
                          clothes_per_id=args.clothes, sessions=args.sessions, cams=args.cams,
                          shots=args.shots, image_size=(args.height, args.width), lighting=args.lighting)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} images of {args.ids} identities "
          f"({len(ds.train_ids)} train / {len(ds.test_ids)} test) to {args.out}")


def cmd_gen_text(args):
    ds = load_dataset(args.data)
    rng = np.random.default_rng(args.seed)
    lib = build_library(SyntheticProvider(ds.attributes), ds.refs_by_identity(), args.k, rng)
    save_description_file(lib, args.out)
    print(f"wrote descriptions for {len(lib.ids())} identities to {args.out}")


def cmd_train(args):
    cfg = TrainConfig.load(args.config)
    flags = {}
    if args.no_text:
        flags["use_text"] = False
    if args.no_svtf:
        flags["use_svtf"] = False
    if args.no_ser:
        flags["use_ser"] = False
    if flags:
        cfg = cfg.replace(**flags)
    t0 = time.time()

    def progress(epoch, loss):
        print(f"epoch {epoch:4d}/{cfg.epochs}  loss {loss:.6f}  ({time.time() - t0:.0f}s)", flush=True)

    try:
        ckpt = train(cfg, progress=progress)
    except TrainingDiverged as e:
        if e.last_good is not None:
            save_checkpoint(e.last_good, args.out)
            print(f"training diverged ({e}); saved epoch {e.last_good.epoch} to {args.out}", file=sys.stderr)
        else:
            print(f"training diverged ({e}) before the first epoch completed", file=sys.stderr)
        return 3
    save_checkpoint(ckpt, args.out)
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    report = evaluate(ckpt, ds, args.mode)
    print(report.to_text())
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    else:
        print(report.to_json())
    return 0


def cmd_heatmap(args):
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    ds = load_dataset(args.data) if args.data else generate_dataset(
        num_ids=cfg.num_ids, clothes_per_id=cfg.clothes, sessions=cfg.sessions, cams=cfg.cams,
        image_size=(cfg.image_h, cfg.image_w), seed=cfg.data_seed, num_train=cfg.num_train,
        shots=cfg.shots, lighting=cfg.lighting)
    img = export_heatmap(ckpt, ds, args.sample, args.scenario, args.out)
    print(f"wrote {img.shape[1]}x{img.shape[0]} heatmap to {args.out}")
    return 0


def cmd_selftest(args):
    from .verify import run_selftest
    return 0 if run_selftest(quick=args.quick) else 1


def build_parser():
    ap = argparse.ArgumentParser(prog="stfer", description="Text-guided any-time person re-identification")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=None, help="train identities (default 2/3)")
    p.add_argument("--clothes", type=int, default=3)
    p.add_argument("--sessions", type=int, default=2)
    p.add_argument("--cams", type=int, default=4)
    p.add_argument("--shots", type=int, default=2)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--lighting", type=float, default=1.5, help="per-(camera, session) condition strength")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("gen-text", help="write a JSON Lines description file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=DEFAULT_IMAGES_PER_IDENTITY)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_text)

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="stfer.ckpt")
    p.add_argument("--no-text", action="store_true")
    p.add_argument("--no-svtf", action="store_true")
    p.add_argument("--no-ser", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="six-scenario retrieval report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("textfree", "text"), default="textfree")
    p.add_argument("--json", help="write the JSON report here instead of stdout")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("heatmap", help="scenario CLS attention over patches, as PGM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--scenario", required=True, help=f"one of {', '.join(SCENARIOS)}")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset directory (default: regenerate from the checkpoint config)")
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("selftest", help="gradient checks and oracle suites")
    p.add_argument("--quick", action="store_true", help="fewer random points")
    p.set_defaults(fn=cmd_selftest)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args) or 0
    except (ConfigError, CheckpointFormatError, DescriptionFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, IndexError, KeyError, LookupError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
