"""Command-line surface: synthesize, prepare, train, translate, evaluate,
ablate, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .ablation import AblationConfig, run_ablation
from .data import MagnificationPolicy, load_pairs, sample_at
from .errors import ConfigError, DataError, NumericError
from .images import save_tile
from .metrics import (
    evaluate_directories,
    load_extractor,
    read_report_json,
    write_report_json,
    write_table_csv,
)
from .synthetic import SyntheticStainSpec, synthesize_dataset
from .training import (
    TrainConfig,
    find_latest_checkpoint,
    load_translator,
    run_training,
    translate_directory,
)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _parse_policy(text: str) -> MagnificationPolicy:
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"policy must be four comma-separated numbers: {exc}") from exc
    if len(parts) != 4:
        raise ConfigError("policy must list four probabilities: macro,native,zoom2,zoom4")
    try:
        return MagnificationPolicy(*parts)
    except DataError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_synthesize(args) -> int:
    spec = SyntheticStainSpec(count=args.count, size=args.size, texture_seed=args.seed or 0)
    out = Path(args.out)
    names = synthesize_dataset(spec, out, "train")
    print(f"wrote {len(names)} train pairs to {out}")
    if args.test_count:
        test_names = synthesize_dataset(spec, out, "test", count=args.test_count)
        print(f"wrote {len(test_names)} test pairs to {out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    root = Path(args.root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    policy = _parse_policy(args.policy)
    wrote_any = False
    for split in ("train", "test"):
        if not (root / f"{split}A").is_dir():
            continue
        manifest = load_pairs(root, split)
        manifest.to_jsonl(out / f"manifest_{split}.jsonl")
        print(f"{split}: {len(manifest)} pairs -> {out / f'manifest_{split}.jsonl'}")
        wrote_any = True
        if split == "train" and args.materialize:
            sample_dir = out / "samples"
            for i in range(args.materialize):
                sample = sample_at(manifest, policy, args.seed or 0, i, args.unified_size)
                save_tile(sample.he, sample_dir / "trainA" / f"sample_{i:05d}.png")
                save_tile(sample.ihc, sample_dir / "trainB" / f"sample_{i:05d}.png")
            print(f"materialized {args.materialize} samples to {sample_dir}")
    if not wrote_any:
        raise DataError(f"no train/test splits found under {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    if not args.config:
        raise ConfigError("train requires --config pointing at a YAML TrainConfig")
    cfg = TrainConfig.from_yaml(args.config)
    if args.out:
        cfg = cfg.__class__.from_dict({**cfg.to_dict(), "out_dir": args.out})
    if args.seed is not None:
        cfg = cfg.__class__.from_dict({**cfg.to_dict(), "seed": args.seed})
    if not cfg.data_root:
        raise ConfigError("config must set data_root")
    manifest = load_pairs(cfg.data_root, "train")
    resume = find_latest_checkpoint(cfg.out_dir) if args.resume else None
    result = run_training(cfg, manifest, resume_from=resume)
    print(f"trained {result.state.iteration} iterations -> {result.final_checkpoint}")
    print(f"losses: {result.log_path}")
    return EXIT_OK


def cmd_translate(args) -> int:
    generator = load_translator(args.checkpoint)
    written = translate_directory(generator, args.in_dir, args.out_dir)
    print(f"translated {len(written)} tiles -> {args.out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    fx = load_extractor(args.extractor)
    report = evaluate_directories(
        args.fake_dir,
        args.real_dir,
        fx,
        method=args.method,
        dataset_id=args.dataset_id,
        seed=args.seed or 0,
        kid_block_size=args.kid_block_size,
    )
    out = Path(args.out or "report")
    write_report_json(report, out / "report.json")
    write_table_csv([report], out / "report.csv")
    print(f"evaluated {report.n_pairs} pairs -> {out}/report.json, {out}/report.csv")
    for key in ("ssim", "psnr", "lpips", "phv_avg", "fid", "kid"):
        print(f"  {key}: {report.to_dict()[key]}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if not args.config:
        raise ConfigError("ablate requires --config pointing at an ablation YAML")
    cfg = AblationConfig.from_yaml(args.config)
    if args.out:
        cfg = AblationConfig(train=cfg.train, out_dir=args.out)
    result = run_ablation(cfg)
    print(f"ablation table -> {result.table_csv}")
    for report in result.reports:
        print(f"  {report.method}: ssim={report.ssim:.4f} fid={report.fid:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = [read_report_json(p) for p in args.reports]
    out = Path(args.out or "combined")
    write_table_csv(reports, out / "table.csv")
    payload = [r.to_dict() for r in reports]
    (out / "table.json").parent.mkdir(parents=True, exist_ok=True)
    (out / "table.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"combined {len(reports)} reports -> {out}/table.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="he2ihc", description="H&E to IHC stain translation toolkit"
    )
    parser.add_argument("--seed", type=int, default=None, help="global seed override")
    parser.add_argument("--config", default=None, help="path to a YAML config file")
    parser.add_argument("--out", default=None, help="output directory override")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="emit paired synthetic stain tiles")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--test-count", type=int, default=0)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("prepare", help="manifest (and optionally materialize) a dataset")
    p.add_argument("--root", required=True)
    p.add_argument("--policy", default="0.25,0.25,0.25,0.25")
    p.add_argument("--materialize", type=int, default=0)
    p.add_argument("--unified-size", type=int, default=512)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="run training from a YAML config")
    p.add_argument("--resume", action="store_true", help="resume from the latest checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="batch H&E -> fake IHC inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="score fake vs real directories")
    p.add_argument("--fake-dir", required=True)
    p.add_argument("--real-dir", required=True)
    p.add_argument("--method", default="ours")
    p.add_argument("--dataset-id", default="")
    p.add_argument("--extractor", default=None, help="module:attr feature extractor plug-in")
    p.add_argument("--kid-block-size", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the four-cell ablation matrix")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="combine metric reports into one table")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # pragma: no cover - safety net
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    raise SystemExit(main())
