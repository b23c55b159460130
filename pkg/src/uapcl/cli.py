"""Command-line entry points.

Exit codes: 0 success, 2 validation error, 3 finished but a UAP did not
reach its fooling threshold, 4 incomplete run directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import BONA_FIDE, FrozenExtractor, load_clips, load_features, materialize, normalize_rows
from .errors import IncompleteRunError, ValidationError

EXIT_OK, EXIT_INVALID, EXIT_UNCONVERGED, EXIT_INCOMPLETE = 0, 2, 3, 4


def _order(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad domain order {text!r}")


def _load_config(path, seed=None):
    from .experiment import ExperimentConfig
    cfg = ExperimentConfig.load(path)
    if seed is not None:
        cfg = replace(cfg, seed=seed, stage=replace(cfg.stage, seed=seed))
    return cfg


def _data_dir(args):
    if getattr(args, "data", None):
        return Path(args.data)
    if getattr(args, "config", None):
        cfg = _load_config(args.config)
        if cfg.data_dir:
            return Path(cfg.data_dir)
    raise ValidationError("need --data (a materialized data directory) or a --config with data_dir")


def _emit(obj, out=None):
    text = json.dumps(obj, sort_keys=True, indent=1)
    print(text)
    if out:
        Path(out).write_text(text + "\n")


def _unconverged(report) -> bool:
    return any(not u.get("converged", True) for u in report.uap)


# ------------------------------------------------------------------ verbs

def cmd_config(args):
    from .experiment import desk_experiment
    cfg = desk_experiment(args.seed, args.strategy.replace("-", "_"))
    if args.data_dir:
        cfg.data_dir = args.data_dir
    text = json.dumps(cfg.to_dict(), sort_keys=True, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_synth(args):
    from .data import DomainSpec, SynthConfig
    doc = json.loads(Path(args.spec).read_text())
    if isinstance(doc, list):
        doc = {"domains": doc}
    domains = [DomainSpec.from_dict(d) for d in doc.get("domains", [])]
    if not domains:
        raise ValidationError("spec lists no domains")
    out = materialize(domains, SynthConfig(**doc.get("synth", {})), args.out)
    print(out)
    return EXIT_OK


def cmd_train(args):
    from .experiment import train_base
    report = train_base(_load_config(args.config, args.seed), args.domain, args.out)
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_sequence(args):
    from .experiment import run_sequence
    cfg = _load_config(args.config, args.seed)
    report = run_sequence(cfg, args.out, order=args.order, strategy=args.strategy)
    print(report.to_table(), end="")
    return EXIT_UNCONVERGED if _unconverged(report) else EXIT_OK


def cmd_joint(args):
    from .experiment import joint_train
    report = joint_train(_load_config(args.config, args.seed), args.out, domains=args.order)
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_gen_uap(args):
    from .classifier import load_checkpoint
    from .uap import UapGenConfig, UapPool, generate_uap, generate_uap_waveform, pool_append
    snap = load_checkpoint(args.ckpt)
    cfg = UapGenConfig(epsilon=args.epsilon, alpha=args.alpha, sigma=args.sigma, max_iters=args.max_iters,
                       level=args.level, seed=args.seed)
    stage = args.stage if args.stage is not None else snap.stage
    if args.level == "feature":
        if not args.features:
            raise ValidationError("feature-level generation needs --features")
        reals = [f for f in load_features(args.features) if f.label == BONA_FIDE]
        record = generate_uap(snap, reals, cfg, stage_index=stage)
    else:
        if not (args.clips and args.extractor):
            raise ValidationError("waveform-level generation needs --clips and --extractor")
        clips = [c for c in load_clips(args.clips) if c.label == BONA_FIDE]
        if not clips:
            raise ValidationError("no bona fide clips")
        x = normalize_rows(np.stack([c.samples for c in clips]))
        crop_len = args.crop_len or x.shape[1]
        crops = np.zeros((len(x), crop_len))
        m = min(crop_len, x.shape[1])
        crops[:, :m] = x[:, :m]
        record = generate_uap_waveform(snap, FrozenExtractor.load(args.extractor), crops, cfg, stage_index=stage)
    out = Path(args.out)
    pool = UapPool.load(out) if (out / "manifest.json").exists() else UapPool(directory=out)
    pool.directory = out
    pool_append(pool, record)
    _emit(record.meta())
    return EXIT_OK if record.converged else EXIT_UNCONVERGED


def cmd_eval(args):
    from .experiment import evaluate_checkpoint
    res = evaluate_checkpoint(args.ckpt, _data_dir(args), args.domain, args.split, args.n_crops)
    _emit(res, args.json_out)
    return EXIT_OK


def cmd_report(args):
    from .report import EvalReport, build_report, compare, compare_csv
    reports = {}
    for run in args.run:
        run = Path(run)
        if args.from_json:
            reports[run.name] = EvalReport.load(run / "report.json")
        else:
            reports[run.name] = build_report(run, write=not args.no_write)
    if len(reports) == 1:
        print(next(iter(reports.values())).render(args.format), end="")
    elif args.format == "csv":
        print(compare_csv(reports), end="")
    elif args.format == "json":
        print(json.dumps({k: r.to_dict() for k, r in reports.items()}, sort_keys=True, indent=1))
    else:
        print(compare(reports), end="")
    return EXIT_OK


def cmd_dump_embeddings(args):
    from .classifier import load_checkpoint
    from .continual import AuditedStore
    from .embedding import embedding_dump, pseudo_features
    from .uap import UapPool
    snap = load_checkpoint(args.ckpt)
    root = _data_dir(args)
    store = AuditedStore(root)
    split = store.split(args.domain, args.split, with_clips=True)
    pseudo = None
    if args.pool:
        pool = UapPool.load(args.pool)
        if not pool.records:
            raise ValidationError("UAP pool is empty")
        rec = pool.records[0]
        crop_len = json.loads((root / "synth.json").read_text())["crop_len"]
        pseudo = pseudo_features(split, rec, store.extractor(), crop_len)
    print(embedding_dump(snap, split, args.out, pseudo=pseudo, pseudo_tag="pseudo"))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uapcl", description="Continual spoof detection with UAP rehearsal.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("config", help="write the default desk-scale experiment config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--strategy", default="sft", choices=["sft", "uap-feature", "uap-waveform", "joint", "base"])
    s.add_argument("--data-dir")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_config)

    s = sub.add_parser("synth", help="materialize domain datasets")
    s.add_argument("--spec", required=True, help="JSON with 'domains' (and optional 'synth')")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="base training on one domain")
    s.add_argument("--config", required=True)
    s.add_argument("--domain", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("gen-uap", help="generate a UAP against a checkpoint and add it to a pool")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--features")
    s.add_argument("--clips")
    s.add_argument("--extractor")
    s.add_argument("--crop-len", type=int)
    s.add_argument("--level", choices=["feature", "waveform"], default="feature")
    s.add_argument("--epsilon", type=float, default=0.03)
    s.add_argument("--alpha", type=float, default=0.0001)
    s.add_argument("--sigma", type=float, default=0.8)
    s.add_argument("--max-iters", type=int, default=2000)
    s.add_argument("--stage", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="pool directory")
    s.set_defaults(fn=cmd_gen_uap)

    s = sub.add_parser("sequence", help="full continual run")
    s.add_argument("--config", required=True)
    s.add_argument("--order", type=_order)
    s.add_argument("--strategy", default="sft", choices=["sft", "uap-feature", "uap-waveform"])
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sequence)

    s = sub.add_parser("joint", help="train once on the union of all domains")
    s.add_argument("--config", required=True)
    s.add_argument("--order", type=_order, help="domains to pool (default: config order)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_joint)

    s = sub.add_parser("eval", help="EER of a checkpoint on one domain")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--domain", type=int, required=True)
    s.add_argument("--data")
    s.add_argument("--config")
    s.add_argument("--split", default="eval", choices=["train", "dev", "eval"])
    s.add_argument("--n-crops", type=int, default=3)
    s.add_argument("--json-out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("report", help="render a run's EER table")
    s.add_argument("--run", required=True, action="append")
    s.add_argument("--format", default="table", choices=["csv", "json", "table"])
    s.add_argument("--from-json", action="store_true", help="re-render from a saved report.json")
    s.add_argument("--no-write", action="store_true")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("dump-embeddings", help="PCA projection of pooled embeddings to CSV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--domain", type=int, required=True)
    s.add_argument("--data")
    s.add_argument("--config")
    s.add_argument("--split", default="eval", choices=["train", "dev", "eval"])
    s.add_argument("--pool", help="pool directory; its first UAP is added as pseudo-spoofs")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_dump_embeddings)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.fn(args)
    except IncompleteRunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE
    except (ValidationError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
