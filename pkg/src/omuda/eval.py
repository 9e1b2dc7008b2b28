"""Segmentation metrics and the seeded ablation harness."""
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .datagen import IGNORE
from .errors import DataError, OmudaError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IoUResult:
    per_class: list      # IoU per class, None where the class is absent
    miou: float


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, K, counts=None):
        self.K = K
        self.counts = np.zeros((K, K), dtype=np.int64) if counts is None else np.asarray(counts, dtype=np.int64)

    def accumulate(self, pred, true, ignore_index=IGNORE):
        pred = np.asarray(pred).ravel().astype(np.int64)
        true = np.asarray(true).ravel().astype(np.int64)
        if pred.shape != true.shape:
            raise DataError(f"prediction and label sizes differ: {pred.size} vs {true.size}")
        keep = true != ignore_index
        t, p = true[keep], pred[keep]
        if t.size and (t.min() < 0 or t.max() >= self.K or p.min() < 0 or p.max() >= self.K):
            raise DataError(f"label outside [0, {self.K})")
        self.counts += np.bincount(t * self.K + p, minlength=self.K * self.K).reshape(self.K, self.K)
        return self

    @property
    def total(self):
        return int(self.counts.sum())

    def iou(self) -> IoUResult:
        inter = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - inter
        per_class = [float(inter[k] / union[k]) if union[k] > 0 else None for k in range(self.K)]
        present = [v for v in per_class if v is not None]
        return IoUResult(per_class, float(np.mean(present)) if present else 0.0)


def accumulate(cm: ConfusionMatrix, pred, true):
    return cm.accumulate(pred, true)


def iou(cm: ConfusionMatrix) -> IoUResult:
    return cm.iou()


@dataclass
class AblationGrid:
    """Named config deltas, each a mapping of dotted keys to values.

    The base configuration always runs as the first row, named ``base_name``.
    If ``expect_best`` names a row, the report checks that row's mean mIoU is
    at least every other row's.
    """
    deltas: dict = field(default_factory=dict)
    base_name: str = "base"
    expect_best: str = None
    base_overrides: dict = field(default_factory=dict)   # applied to the base config first

    @classmethod
    def from_dict(cls, d):
        from .errors import ConfigError
        if not isinstance(d, dict):
            raise ConfigError("grid must be a JSON object", "<grid>")
        unknown = set(d) - {"deltas", "base_name", "expect_best", "base_overrides"}
        if unknown:
            raise ConfigError("unknown key", f"grid.{sorted(unknown)[0]}")
        grid = cls(dict(d.get("deltas", {})), d.get("base_name", "base"), d.get("expect_best"),
                   dict(d.get("base_overrides", {})))
        if grid.expect_best is not None and grid.expect_best not in grid.deltas \
                and grid.expect_best != grid.base_name:
            raise ConfigError(f"names no row: {grid.expect_best!r}", "grid.expect_best")
        return grid


BASELINE_OVERRIDES = {
    "cam.sampling": "uniform", "cam.mask_strategy": "none", "fdm.mode": "off", "cdm.mode": "off",
}

# baseline = plain mean-teacher self-training; each row switches components back on
COMPONENT_GRID = AblationGrid(
    deltas={
        "+CAM": {"cam.sampling": "cam", "cam.mask_strategy": "cam"},
        "+FDM": {"fdm.mode": "on"},
        "+CDM": {"cdm.mode": "paper"},
        "All": {"cam.sampling": "cam", "cam.mask_strategy": "cam", "fdm.mode": "on", "cdm.mode": "paper"},
    },
    base_name="Baseline",
    expect_best="All",
    base_overrides=dict(BASELINE_OVERRIDES),
)

MASK_GRID = AblationGrid(
    deltas={"random": {"cam.mask_strategy": "random"}, "grid": {"cam.mask_strategy": "grid"},
            "none": {"cam.mask_strategy": "none"}},
    base_name="cam",
    expect_best="cam",
)

CDM_MODE_GRID = AblationGrid(
    deltas={"inverted": {"cdm.mode": "inverted"}, "off": {"cdm.mode": "off"}},
    base_name="paper",
)

GRIDS = {"components": COMPONENT_GRID, "masks": MASK_GRID, "cdm-modes": CDM_MODE_GRID}


def _run_one(config, datasets):
    from .trainer import run_training
    try:
        res = run_training(config, datasets)
        return {"mIoU": res.final_miou, "per_class_iou": res.events[-1]["per_class_iou"], "error": None}
    except OmudaError as exc:
        return {"mIoU": None, "per_class_iou": None, "error": str(exc)}


def run_ablation(base_config, grid: AblationGrid, datasets, seeds, out_dir=None, runner=None):
    """Train every (row, seed) pair and aggregate mIoU; failed runs are recorded, not raised.

    ``runner(config, datasets)`` returns ``{"mIoU", "per_class_iou", "error"}``
    and defaults to a plain training run; callers may substitute a caching one.
    """
    runner = runner or _run_one
    seeds = list(seeds)
    if len(seeds) < 3:
        from .errors import ArgumentError
        raise ArgumentError("at least three seeds are required")
    if grid.base_overrides:
        base_config = base_config.with_overrides(grid.base_overrides)
    rows = [(grid.base_name, {})] + list(grid.deltas.items())
    names = list(datasets.class_names or base_config.scene.class_names)
    report = {"seeds": seeds, "base_config": base_config.to_dict(), "rows": [], "comparisons": []}
    for name, delta in rows:
        cfg_row = base_config.with_overrides(delta) if delta else base_config
        runs = []
        for seed in seeds:
            cfg = cfg_row.with_overrides({"train.seed": seed})
            log.info("ablation row %s seed %d", name, seed)
            out = runner(cfg, datasets)
            runs.append(dict(out, seed=seed))
        ok = [r for r in runs if r["mIoU"] is not None]
        mious = np.array([r["mIoU"] for r in ok])
        per_class = {}
        for n in names:
            vals = [r["per_class_iou"][n] for r in ok if r["per_class_iou"].get(n) is not None]
            per_class[n] = {"mean": float(np.mean(vals)) if vals else None,
                            "std": float(np.std(vals)) if vals else None}
        report["rows"].append({
            "name": name, "delta": delta, "runs": runs,
            "mean_mIoU": float(mious.mean()) if ok else None,
            "std_mIoU": float(mious.std()) if ok else None,
            "per_class_iou": per_class, "failed_runs": len(runs) - len(ok),
        })
    if grid.expect_best is not None:
        by_name = {r["name"]: r for r in report["rows"]}
        best = by_name[grid.expect_best]
        for r in report["rows"]:
            if r["name"] == grid.expect_best:
                continue
            passed = (best["mean_mIoU"] is not None and r["mean_mIoU"] is not None
                      and best["mean_mIoU"] >= r["mean_mIoU"])
            report["comparisons"].append({"better": grid.expect_best, "than": r["name"],
                                          "lhs": best["mean_mIoU"], "rhs": r["mean_mIoU"],
                                          "passed": bool(passed)})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        with open(os.path.join(out_dir, "ablation.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_table(report, names))
    return report


def format_table(report, class_names):
    """Aligned text table: one row per configuration, per-class IoU then mIoU (x100)."""
    head = ["Method"] + [n[:8] for n in class_names] + ["mIoU"]
    lines = []
    body = []
    for r in report["rows"]:
        cells = [r["name"]]
        for n in class_names:
            m = r["per_class_iou"][n]["mean"]
            cells.append("--" if m is None else f"{100 * m:.1f}")
        if r["mean_mIoU"] is None:
            cells.append("failed")
        else:
            cells.append(f"{100 * r['mean_mIoU']:.1f}±{100 * r['std_mIoU']:.1f}")
        body.append(cells)
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    fmt = lambda row: " | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
    lines.append(fmt(head))
    lines.append("-+-".join("-" * w for w in widths))
    lines.extend(fmt(row) for row in body)
    for c in report["comparisons"]:
        status = "PASS" if c["passed"] else "FAIL"
        lines.append(f"{status}: {c['better']} >= {c['than']}")
    return "\n".join(lines) + "\n"
