"""Confusion-matrix IoU, forgetting and report files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError


class ConfusionMatrix:
    """``counts[i, j]`` = pixels with ground truth ``i`` predicted as ``j``."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValidationError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}")
        if pred.size == 0:
            return self
        c = self.num_classes
        if pred.min() < 0 or gt.min() < 0 or pred.max() >= c or gt.max() >= c:
            raise ValidationError(f"class index outside [0, {c})")
        idx = gt.astype(np.int64).ravel() * c + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def iou_from_confusion(cm: ConfusionMatrix):
    """Per-class IoU and mIoU, both in percent.

    Classes absent from both ground truth and prediction get ``nan`` and
    are left out of the mean.
    """
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    inter = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - np.diag(counts)
    present = union > 0
    if not present.any():
        raise ValidationError("no class present in ground truth or prediction")
    iou = np.full(len(inter), np.nan)
    iou[present] = 100.0 * inter[present] / union[present]
    return iou.tolist(), float(np.mean(iou[present]))


def forgetting(history: dict, introduced: dict | None = None, final_step: int | None = None) -> dict:
    """mIoU at a domain's introduction step minus its mIoU at the final step.

    ``history`` maps ``(step, domain_id)`` to mIoU. Unless given, a
    domain's introduction step is the first step it was evaluated at, and
    the final step is the last step in the history.
    """
    if not history:
        raise ValidationError("empty history")
    if final_step is None:
        final_step = max(step for step, _ in history)
    domains = sorted({d for _, d in history})
    out = {}
    for d in domains:
        start = introduced[d] if introduced and d in introduced else min(s for s, dd in history if dd == d)
        if (start, d) not in history or (final_step, d) not in history:
            raise ValidationError(f"domain {d!r} lacks an evaluation at step {start} or {final_step}")
        out[d] = history[(start, d)] - history[(final_step, d)]
    return out


@dataclass
class DomainResult:
    id: str
    per_class_iou: list
    miou: float


@dataclass
class MetricsReport:
    step: int
    domains: list = field(default_factory=list)
    forgetting: dict = field(default_factory=dict)

    @property
    def miou_avg(self) -> float:
        return float(np.mean([d.miou for d in self.domains]))

    @property
    def per_domain(self) -> dict:
        return {d.id: d for d in self.domains}

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "domains": [
                {"id": d.id, "per_class_iou": [None if np.isnan(v) else v for v in d.per_class_iou], "miou": d.miou}
                for d in self.domains
            ],
            "miou_avg": self.miou_avg,
            "forgetting": dict(self.forgetting),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        domains = [
            DomainResult(x["id"], [float("nan") if v is None else v for v in x["per_class_iou"]], x["miou"])
            for x in d["domains"]
        ]
        return cls(step=d["step"], domains=domains, forgetting=dict(d.get("forgetting", {})))

    def __eq__(self, other):
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return json.dumps(self.to_dict(), sort_keys=True) == json.dumps(other.to_dict(), sort_keys=True)


def history_of(reports) -> dict:
    return {(r.step, d.id): d.miou for r in reports for d in r.domains}


def format_step_table(report: MetricsReport) -> str:
    lines = [f"step {report.step}", f"{'domain':<12}{'mIoU':>8}{'forget':>8}"]
    for d in report.domains:
        f = report.forgetting.get(d.id)
        lines.append(f"{d.id:<12}{d.miou:>8.1f}{'' if f is None else f'{f:>8.1f}'}")
    lines.append(f"{'mIoU avg':<12}{report.miou_avg:>8.1f}")
    return "\n".join(lines)


METHOD_FLAGS = {
    # distribution distillation, feature distillation, multi heads
    "continual_baseline": ("", "", ""),
    "dd_only": ("x", "", ""),
    "fd_only": ("", "x", ""),
    "dd_fd": ("x", "x", ""),
    "muhdi": ("x", "x", "x"),
}


def ablation_rows(runs: dict) -> list[dict]:
    """Aggregate final-step reports per method.

    ``runs`` maps method name to a list of final ``MetricsReport`` (one per
    seed), or ``None`` for a method whose runs failed.
    """
    rows = []
    for method, reports in runs.items():
        row = {"method": method, "flags": METHOD_FLAGS.get(method, ("?", "?", "?"))}
        if not reports:
            row.update(failed=True, miou={}, forgetting={}, miou_avg=None, seeds=0)
        else:
            ids = [d.id for d in reports[0].domains]
            row.update(
                failed=False,
                seeds=len(reports),
                miou={i: float(np.mean([r.per_domain[i].miou for r in reports])) for i in ids},
                forgetting={
                    i: float(np.mean([r.forgetting[i] for r in reports]))
                    for i in ids
                    if all(i in r.forgetting for r in reports)
                },
                miou_avg=float(np.mean([r.miou_avg for r in reports])),
            )
        rows.append(row)
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    ids = []
    for r in rows:
        for i in r["miou"]:
            if i not in ids:
                ids.append(i)
    head = f"{'method':<20}{'DD':>4}{'FD':>4}{'MH':>4}" + "".join(f"{i:>10}" for i in ids) + f"{'avg':>8}"
    lines = [head]
    for r in rows:
        dd, fd, mh = r["flags"]
        cells = f"{r['method']:<20}{dd:>4}{fd:>4}{mh:>4}"
        if r["failed"]:
            lines.append(cells + "  FAILED")
            continue
        cells += "".join(f"{r['miou'][i]:>10.1f}" for i in ids)
        lines.append(cells + f"{r['miou_avg']:>8.1f}")
    return "\n".join(lines)


def emit_report(reports, out_dir, layout: str = "per-step") -> list[Path]:
    """Write report files and return their paths.

    ``per-step``: ``reports`` is a list of ``MetricsReport``; writes
    ``metrics_<t>.json`` and ``metrics.txt``. ``ablation``: ``reports``
    maps method to a list of final reports; writes ``ablation.json`` and
    ``ablation.txt``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if layout == "per-step":
        if not reports:
            raise ValidationError("no completed step to report")
        for r in reports:
            p = out / f"metrics_{r.step}.json"
            p.write_text(json.dumps(r.to_dict(), indent=2, sort_keys=True))
            written.append(p)
        p = out / "metrics.txt"
        p.write_text("\n\n".join(format_step_table(r) for r in reports) + "\n")
        written.append(p)
    elif layout == "ablation":
        rows = ablation_rows(reports)
        p = out / "ablation.json"
        p.write_text(json.dumps(rows, indent=2, sort_keys=True))
        written.append(p)
        p = out / "ablation.txt"
        p.write_text(format_ablation_table(rows) + "\n")
        written.append(p)
    else:
        raise ValidationError(f"unknown layout {layout!r}")
    return written
