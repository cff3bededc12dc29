"""Command line entry point: ``adaptlab {pretrain,adapt,study,rank}``.

Exit codes: 0 success, 1 at least one failed run, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import data_gen, harness, model
from .errors import ConfigError, PretrainingError

log = logging.getLogger("adaptlab")


def _seeds(text: str):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", required=True, help="flat JSON study config")
        if out:
            sp.add_argument("--out", help="output directory (defaults to output_dir in the config)")
        sp.add_argument("--seed", type=_seeds, help="comma-separated seeds overriding the config")

    common(sub.add_parser("pretrain", help="pretrain and checkpoint the shared extractor"))
    sp = sub.add_parser("adapt", help="run a single protocol over its grid")
    common(sp)
    sp.add_argument("--protocol", required=True, help="e.g. LP, FT, LP+FT, 'LP(VAT)+FT'")
    sp = sub.add_parser("study", help="full sweep with selection, ranking and reports")
    common(sp)
    sp.add_argument("--workers", type=int, default=1)
    sp = sub.add_parser("rank", help="recompute ranks.csv from an existing summary.csv")
    sp.add_argument("--in", dest="in_dir", required=True)
    return p


def _load(args) -> harness.StudyConfig:
    return harness.load_config(args.config, seeds=getattr(args, "seed", None))


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = data_gen.build_generators(cfg.domino(0.0))
    report = model.PretrainReport()
    ext = model.pretrain(gen, cfg.pretrain_config(), report)
    model.save_checkpoint(out / "extractor.ckpt", ext)
    (out / "pretrain.json").write_text(json.dumps(
        {"probe_acc": report.probe_acc, "simple_r2": report.simple_r2, "losses": report.losses,
         "config": asdict(cfg.pretrain_config())}, indent=2), encoding="utf-8")
    print(f"probe accuracy {report.probe_acc:.4f}, simple-block R^2 {report.simple_r2:.4f}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _load(args)
    harness.parse_protocol(args.protocol)
    out = Path(args.out or cfg.output_dir)
    res = harness.run_study(cfg, out, keep_models=True, protocols_=[args.protocol])
    models_dir = out / "models"
    models_dir.mkdir(exist_ok=True)
    for run_id, adapted in res.models.items():
        m = adapted.model
        model.save_checkpoint(models_dir / f"run_{run_id:04d}.ckpt", m.extractor, m.head, m.pretrained_snapshot)
    print(harness.markdown_table(res.summary), end="")
    return 1 if res.failed else 0


def cmd_study(args) -> int:
    cfg = _load(args)
    res = harness.run_study(cfg, args.out, workers=args.workers)
    print(harness.markdown_table(res.summary), end="")
    if res.failed:
        log.error("%d run(s) failed; see the error column of runs.csv", res.failed)
    return 1 if res.failed else 0


def cmd_rank(args) -> int:
    in_dir = Path(args.in_dir)
    summary = harness.read_csv(in_dir / "summary.csv")
    ranks = harness.rank_protocols(summary)
    harness.write_csv(in_dir / "ranks.csv", ranks, list(ranks[0]))
    for r in ranks:
        print(f"{r['metric']:16s} {r['protocol']:16s} {r['mean_rank']:.3f}")
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "adapt": cmd_adapt, "study": cmd_study, "rank": cmd_rank}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PretrainingError as exc:
        print(f"pretraining failed: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
