"""Command-line entry point ``tgdm``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from tgdm.net import ConfigError
from tgdm.phantom import generate_dataset
from tgdm.pipeline.config import RunConfig, apply_overrides, preset
from tgdm.pipeline.errors import EXIT_OK, exit_code

logger = logging.getLogger("tgdm")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else preset(args.preset)
    if getattr(args, "data", None):
        cfg = cfg.with_(data_root=str(args.data))
    return apply_overrides(cfg, args.set)


def cmd_phantom_gen(args):
    cfg = _config(args)
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test, "ood": cfg.n_ood}
    for split in args.splits.split(","):
        n = counts.get(split)
        if n is None:
            raise ConfigError(f"unknown split {split!r}")
        if n:
            generate_dataset(cfg.phantom, n, split, cfg.split_dir(split), workers=args.workers)
            print(f"{split}: {n} cases -> {cfg.split_dir(split)}")


def cmd_atlas_build(args):
    from tgdm.pipeline.data import build_atlas, load_split
    from tgdm.pipeline.provenance import write_provenance

    cfg = _config(args)
    atlas = build_atlas(load_split(cfg.split_dir("train")), cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    atlas.save(out)
    write_provenance(out.parent, cfg, [cfg.seed], {"artifact": out.name})
    counts = atlas.point_counts(cfg.vpn)
    print(f"atlas: {len(atlas.segments)} segments from {atlas.n_cases} cases -> {out}")
    print("point counts:", json.dumps(counts))


def cmd_train(args):
    from tgdm.pipeline.train import train_stage1, train_stage2
    from tgdm.topo import TemplateAtlas

    cfg = _config(args)
    if args.stage == "stage1":
        res = train_stage1(cfg, args.out)
    else:
        atlas = TemplateAtlas.load(args.atlas) if args.atlas else None
        res = train_stage2(cfg, args.out, args.stage1, atlas=atlas)
    last = res.history[-1] if res.history else {}
    print(f"checkpoint: {res.checkpoint}")
    if last:
        print("final epoch:", json.dumps(last))


def cmd_infer(args):
    from tgdm.pipeline.infer import Predictor, predict_split
    from tgdm.pipeline.provenance import write_provenance

    cfg = _config(args)
    predictor = Predictor.from_files(cfg, args.stage2, args.stage1, args.atlas)
    out = predict_split(predictor, args.input, args.out)
    write_provenance(out, predictor.config, [cfg.seed], {"stage1": args.stage1, "stage2": args.stage2})
    print(f"predictions -> {out}")


def cmd_eval(args):
    from tgdm.pipeline.evaluate import evaluate_split

    rep = evaluate_split(args.pred, args.gt, args.tau, compare_dir=args.compare, out=args.out)
    print(rep.table(Path(args.pred).name))


def cmd_ablate(args):
    from tgdm.pipeline.ablation import ablation_run

    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    table = ablation_run(cfg, args.out, seeds=seeds, split=args.split)
    print(table.text())


def cmd_summary(args):
    from tgdm.pipeline.summary import format_summary, model_summary

    cfg = _config(args)
    s = model_summary(cfg.net)
    print(format_summary(s))
    if args.json:
        print(json.dumps(s, indent=2))


def cmd_report(args):
    from tgdm.pipeline.report import report

    for path in report(args.run, args.out):
        print(path)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON file")
    common.add_argument("--preset", default="desk", choices=["paper", "desk", "smoke"])
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
    common.add_argument("--data", help="dataset root (overrides data_root)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tgdm", description="Two-stage costal cartilage segmentation")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic data").add_subparsers(dest="action", required=True)
    g = ph.add_parser("gen", parents=[common], help="generate phantom splits")
    g.add_argument("--splits", default="train,val")
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_phantom_gen)

    at = sub.add_parser("atlas", help="template atlas").add_subparsers(dest="action", required=True)
    b = at.add_parser("build", parents=[common], help="build the atlas from the training split")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_atlas_build)

    tr = sub.add_parser("train", help="training").add_subparsers(dest="stage", required=True)
    t1 = tr.add_parser("stage1", parents=[common])
    t1.add_argument("--out", required=True)
    t1.set_defaults(func=cmd_train)
    t2 = tr.add_parser("stage2", parents=[common])
    t2.add_argument("--out", required=True)
    t2.add_argument("--stage1")
    t2.add_argument("--atlas")
    t2.set_defaults(func=cmd_train)

    inf = sub.add_parser("infer", parents=[common], help="predict a split directory")
    inf.add_argument("--stage1")
    inf.add_argument("--stage2", required=True)
    inf.add_argument("--atlas")
    inf.add_argument("--input", required=True)
    inf.add_argument("--out", required=True)
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("eval", parents=[common], help="score predictions")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--compare")
    ev.add_argument("--tau", type=float, default=1.0)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", parents=[common], help="run the M0..M4 ablation")
    ab.add_argument("--out", required=True)
    ab.add_argument("--seeds", help="comma-separated seeds")
    ab.add_argument("--split", default="val")
    ab.set_defaults(func=cmd_ablate)

    sm = sub.add_parser("summary", parents=[common], help="parameter and MAC counts")
    sm.add_argument("--json", action="store_true")
    sm.set_defaults(func=cmd_summary)

    rp = sub.add_parser("report", parents=[common], help="plot logs and metrics of a run")
    rp.add_argument("--run", required=True)
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        args.func(args)
    except Exception as exc:  # mapped to exit codes; unknown errors propagate
        code = exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
