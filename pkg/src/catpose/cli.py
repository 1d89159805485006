"""Command-line driver: ``catpose <stage> [options]``.

Exit codes: 0 ok, 1 input error (bad files, flags, config or digest
mismatches), 2 internal error. Each stage prints one JSON summary line on
stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from . import pipeline
from .config import QUALITY_TERMS, PipelineConfig
from .errors import ConfigError, InputError

log = logging.getLogger("catpose")


def parse_quality(text):
    terms = tuple(t.strip().lower() for t in text.split(",") if t.strip())
    bad = [t for t in terms if t not in QUALITY_TERMS]
    if bad or not terms:
        raise argparse.ArgumentTypeError(f"quality must be a comma list of {','.join(QUALITY_TERMS)}")
    if "q1" not in terms:
        raise argparse.ArgumentTypeError("quality mask must include q1")
    return terms


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON pipeline config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out-dir", type=Path, default=Path("catpose_out"), help="pipeline directory")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for train/infer")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="catpose", description="Category-level 6D pose from depth with a Hough forest.")
    sub = p.add_subparsers(dest="stage", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="procedural meshes, skeletons and manifest")
    g.add_argument("--category", help="procedural category (table, chair)")
    g.add_argument("--count", type=int, help="number of instances")
    g.add_argument("--train", type=int, dest="n_train", help="number of training instances")
    sub.add_parser("render", parents=[common], help="depth images of every instance")
    sub.add_parser("ssc", parents=[common], help="category center from the training skeletons")
    sub.add_parser("extract", parents=[common], help="training parts -> dataset.isas")
    for name, hlp in (("train", "forest from the dataset"), ("infer", "pose hypotheses"),
                      ("eval", "recall report")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--quality", type=parse_quality, help="quality terms, e.g. q1 or q1,q2,q3")
    inf = sub.choices["infer"]
    inf.add_argument("--image", type=Path, nargs="+", help="depth files (.isad or 16-bit PNG) instead of test renders")
    inf.add_argument("--output", type=Path, help="hypotheses JSON path")
    inf.add_argument("--overlay", type=Path, help="directory for debug overlay PNGs")
    a = sub.add_parser("all", parents=[common], help="run every stage in order")
    a.add_argument("--quality", type=parse_quality)
    cfg = sub.add_parser("config", parents=[common], help="print the resolved config as JSON")
    cfg.add_argument("--write", type=Path, help="also save it to this path")
    return p


def resolve_config(args) -> PipelineConfig:
    saved = args.out_dir / "config.json"
    if args.config:
        cfg = PipelineConfig.load(args.config)
    elif args.stage not in ("generate", "all", "config") and saved.exists():
        # later stages follow whatever generate recorded
        cfg = PipelineConfig.load(saved)
    else:
        cfg = PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.stage == "generate":
        g = cfg.generate
        for key in ("category", "count", "n_train"):
            val = getattr(args, key)
            if val is not None:
                setattr(g, key, val)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    return cfg


def dispatch(args, cfg) -> list:
    out = args.out_dir
    q = getattr(args, "quality", None)
    if args.stage == "config":
        if args.write:
            cfg.save(args.write)
        return [{"stage": "config", "config": cfg.to_dict(), "digest": cfg.digest()}]
    out.mkdir(parents=True, exist_ok=True)
    if args.stage in ("generate", "all"):
        cfg.save(out / "config.json")
    if args.stage == "all":
        return pipeline.run_all(cfg, out, q, args.jobs)
    if args.stage == "generate":
        return [pipeline.run_generate(cfg, out)]
    if args.stage == "render":
        return [pipeline.run_render(cfg, out)]
    if args.stage == "ssc":
        return [pipeline.run_ssc(cfg, out)]
    if args.stage == "extract":
        return [pipeline.run_extract(cfg, out)]
    if args.stage == "train":
        return [pipeline.run_train(cfg, out, q, args.jobs)]
    if args.stage == "infer":
        return [pipeline.run_infer(cfg, out, q, args.jobs, args.image, args.output, args.overlay)]
    return [pipeline.run_eval(cfg, out, q)]


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        for summary in dispatch(args, cfg):
            print(json.dumps(summary, sort_keys=True), flush=True)
    except (InputError, OSError) as exc:
        # unreadable or missing files count as bad input
        print(f"catpose {args.stage}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        if args.verbose:
            traceback.print_exc()
        print(f"catpose {args.stage}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
