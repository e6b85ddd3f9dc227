"""Ablation and few-shot protocols: several seeds per row, shared data, CSV tables."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .metrics import EvalReport
from .synthgen import SynthDataset
from .train import evaluate, train

log = logging.getLogger(__name__)

REPORT_HEADER = ["run", "pixel_p", "pixel_r", "pixel_f", "region_f"]
SEEDS = (0, 1, 2)

_OFF = {"use_lg": False, "use_vg": False, "use_aux": False, "use_bsm": False}

# Each row adds one component to the one before it; ``lp4`` drops the fixed
# "Text" token to isolate the learnable prompts.
ABLATION_ROWS: dict[str, dict] = {
    "baseline": {"use_bridge": False},
    "pp": {**_OFF, "n": 0},
    "pp_lp4": {**_OFF, "n": 4},
    "lp4": {**_OFF, "n": 4, "use_predefined": False},
    "pp_lp4_lg": {**_OFF, "n": 4, "use_lg": True},
    "pp_lp4_lg_vg": {**_OFF, "n": 4, "use_lg": True, "use_vg": True},
    "pp_lp4_lg_vg_aux": {"n": 4, "use_bsm": False},
    "fasttcm": {},
}

FEW_SHOT_MODELS = {"baseline": {"use_bridge": False}, "fasttcm": {}}
FEW_SHOT_RATIOS = (0.1, 0.25, 0.5, 1.0)


def mean_report(reports: list[EvalReport]) -> EvalReport:
    return EvalReport(*(float(np.mean([getattr(r, k) for r in reports]))
                        for k in ("pixel_precision", "pixel_recall", "pixel_f", "region_f", "loss")))


@dataclass
class ResultTable:
    """Per-seed reports for each named run, in insertion order."""

    runs: dict[str, list[EvalReport]] = field(default_factory=dict)
    seeds: tuple[int, ...] = SEEDS

    def mean(self, name: str) -> EvalReport:
        return mean_report(self.runs[name])

    def __len__(self) -> int:
        return len(self.runs)

    def write_csv(self, path: str | Path) -> Path:
        """Per-seed rows named ``run#seed`` followed by the mean row named ``run``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_HEADER)
            for name, reports in self.runs.items():
                for seed, rep in zip(self.seeds, reports):
                    w.writerow(rep.row(f"{name}#{seed}"))
                w.writerow(self.mean(name).row(name))
        return path


def read_report_csv(path: str | Path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as fh:
        return {row["run"]: {k: float(v) for k, v in row.items() if k != "run"}
                for row in csv.DictReader(fh)}


def _train_eval(cfg: Config, train_data: SynthDataset, test_data: SynthDataset) -> EvalReport:
    return evaluate(train(cfg, train_data).model, test_data)


def run_ablation(
    cfg: Config,
    train_data: SynthDataset,
    test_data: SynthDataset,
    rows: dict[str, dict] | None = None,
    seeds=SEEDS,
    out_csv: str | Path | None = None,
) -> ResultTable:
    rows = ABLATION_ROWS if rows is None else rows
    table = ResultTable(seeds=tuple(seeds))
    for name, overrides in rows.items():
        table.runs[name] = []
        for seed in seeds:
            rep = _train_eval(cfg.copy(**overrides, seed=seed), train_data, test_data)
            log.info("%s seed %d pixel_f %.4f", name, seed, rep.pixel_f)
            table.runs[name].append(rep)
    if out_csv is not None:
        table.write_csv(out_csv)
    return table


def run_few_shot(
    cfg: Config,
    train_data: SynthDataset,
    test_data: SynthDataset,
    ratios=FEW_SHOT_RATIOS,
    seeds=SEEDS,
    models: dict[str, dict] | None = None,
    out_csv: str | Path | None = None,
) -> ResultTable:
    """Train each model at each data ratio; the subsample depends only on the seed."""
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise ValueError(f"data ratio {r} outside (0, 1]")
        if round(r * len(train_data)) < 1:
            raise ValueError(f"data ratio {r} of {len(train_data)} samples leaves no training data")
    models = FEW_SHOT_MODELS if models is None else models
    table = ResultTable(seeds=tuple(seeds))
    for r in ratios:
        for name, overrides in models.items():
            run = f"{name}@{r:g}"
            table.runs[run] = [
                _train_eval(cfg.copy(**overrides, data_ratio=r, seed=s), train_data, test_data)
                for s in seeds
            ]
            log.info("%s mean pixel_f %.4f", run, table.mean(run).pixel_f)
    if out_csv is not None:
        table.write_csv(out_csv)
    return table
