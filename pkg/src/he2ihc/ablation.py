"""The four-cell ablation matrix: baseline, each mechanism alone, both.

Every cell trains from the same seed on the same dataset, translates the test
split and is scored with the shared metric battery; the emitted table follows
the published comparison's row labels and column order.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from pathlib import Path

import yaml

from .data import load_pairs
from .errors import ConfigError
from .metrics import (
    FeatureExtractor,
    MetricReport,
    load_extractor,
    evaluate_directories,
    write_report_json,
    write_table_csv,
)
from .training import (
    TrainConfig,
    find_latest_checkpoint,
    load_translator,
    run_training,
    translate_directory,
)

# (row label, use_attention, use_multimag); labels follow the published
# table verbatim, typo included.
ABLATION_CELLS = (
    ("Our Baseline", False, False),
    ("w/. multi-manification", False, True),
    ("w/. Attention", True, False),
    ("Ours", True, True),
)


def _slug(label: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", label.lower()).strip("-")


@dataclass(frozen=True)
class AblationConfig:
    train: TrainConfig
    out_dir: str = "runs/ablation"

    @classmethod
    def from_yaml(cls, path: str | Path) -> "AblationConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read ablation config {path}: {exc}") from exc
        if not isinstance(raw, dict) or "train" not in raw:
            raise ConfigError(f"ablation config {path} must contain a 'train' mapping")
        train = TrainConfig.from_dict(raw["train"])
        return cls(train=train, out_dir=str(raw.get("out_dir", "runs/ablation")))

    def to_yaml(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"train": self.train.to_dict(), "out_dir": self.out_dir}
        path.write_text(yaml.safe_dump(payload, sort_keys=True), encoding="utf-8")


@dataclass
class AblationResult:
    reports: list[MetricReport]
    table_csv: Path
    table_json: Path
    cell_dirs: dict[str, Path]


def run_ablation(cfg: AblationConfig, fx: FeatureExtractor | None = None) -> AblationResult:
    """Train/translate/evaluate all four cells and emit the comparison table.

    Cells are isolated in their own directories: a finished cell (final
    checkpoint present) is reused as-is, a partially trained one resumes from
    its latest checkpoint, so aborting one cell never poisons the others.
    """
    base = cfg.train
    if not base.data_root:
        raise ConfigError("ablation needs train.data_root pointing at a paired dataset")
    fx = fx or load_extractor()
    out_root = Path(cfg.out_dir)
    train_manifest = load_pairs(base.data_root, "train")
    test_manifest = load_pairs(base.data_root, "test")
    if len(test_manifest) < 2:
        raise ConfigError("ablation needs at least 2 test pairs for the metric battery")
    dataset_id = Path(base.data_root).name
    he_test_dir = Path(base.data_root) / "testA"
    ihc_test_dir = Path(base.data_root) / "testB"

    reports: list[MetricReport] = []
    cell_dirs: dict[str, Path] = {}
    for label, use_attention, use_multimag in ABLATION_CELLS:
        cell_dir = out_root / "cells" / _slug(label)
        cell_dirs[label] = cell_dir
        cell_cfg = replace(
            base,
            use_attention=use_attention,
            use_multimag=use_multimag,
            out_dir=str(cell_dir),
        )
        final_ckpt = cell_dir / f"ckpt_{cell_cfg.iterations:06d}.pt"
        if not final_ckpt.exists():
            resume = find_latest_checkpoint(cell_dir)
            run_training(cell_cfg, train_manifest, resume_from=resume)
        generator = load_translator(final_ckpt)
        fake_dir = cell_dir / "fake_test"
        translate_directory(generator, he_test_dir, fake_dir)
        report = evaluate_directories(
            fake_dir,
            ihc_test_dir,
            fx,
            method=label,
            dataset_id=dataset_id,
            seed=base.seed,
        )
        # provenance ties every row to the same conditions
        report.config_hash = cell_cfg.config_hash()
        write_report_json(report, cell_dir / "report.json")
        reports.append(report)

    seeds = {r.seed for r in reports}
    datasets = {r.dataset_id for r in reports}
    if len(seeds) != 1 or len(datasets) != 1:
        raise ConfigError(f"ablation rows must share seed and dataset, got {seeds} / {datasets}")

    table_csv = out_root / "ablation_table.csv"
    table_json = out_root / "ablation_table.json"
    write_table_csv(reports, table_csv)
    table_json.parent.mkdir(parents=True, exist_ok=True)
    table_json.write_text(
        json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return AblationResult(reports, table_csv, table_json, cell_dirs)
