"""Branch fusion, image scoring, AUROC and per-class evaluation reports."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .archive import EmbeddingArchive

__all__ = [
    "FLOOR",
    "DETECT_KERNEL",
    "fuse",
    "detect_score",
    "bilinear_resize",
    "auroc",
    "Prediction",
    "ClassMetrics",
    "EvalReport",
    "class_report",
]

FLOOR = 1e-6
DETECT_KERNEL = 16


def fuse(y_r: np.ndarray, y_s: np.ndarray, alpha: float) -> np.ndarray:
    """Elementwise weighted harmonic mean of the two branch maps.

    Inputs are floored at 1e-6 before inversion so exact zeros stay finite.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    a = np.asarray(y_r, dtype=np.float64)
    b = np.asarray(y_s, dtype=np.float64)
    if a.shape != b.shape:
        raise T.ShapeError(f"branch maps differ: {a.shape} vs {b.shape}")
    a = np.maximum(a, FLOOR)
    b = np.maximum(b, FLOOR)
    return 1.0 / (alpha / a + (1.0 - alpha) / b)


def detect_score(y_map: np.ndarray, kernel: int = DETECT_KERNEL) -> float:
    """Image score: maximum of the moving average over ``kernel``-sized windows."""
    pooled = T.avg_pool2d(T.constant(np.asarray(y_map, dtype=np.float64)), kernel)
    return float(pooled.data.max())


def bilinear_resize(y_map: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize a 2-D map with half-pixel-aligned bilinear interpolation."""
    src = np.asarray(y_map, dtype=np.float64)
    if src.ndim != 2:
        raise T.ShapeError(f"expected a 2-D map, got shape {src.shape}")
    out_h, out_w = size
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {size}")
    in_h, in_w = src.shape

    def axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, rf = axis_coords(in_h, out_h)
    c0, c1, cf = axis_coords(in_w, out_w)
    top = src[r0][:, c0] * (1 - cf) + src[r0][:, c1] * cf
    bot = src[r1][:, c0] * (1 - cf) + src[r1][:, c1] * cf
    return top * (1 - rf)[:, None] + bot * rf[:, None]


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midrank tie handling, O(n log n)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise T.ShapeError(f"scores {s.shape} vs labels {y.shape}")
    if not np.isfinite(s).all():
        raise ValueError("scores contain non-finite values")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative labels")
    order = np.argsort(s, kind="mergesort")
    bounds = np.nonzero(np.diff(s[order]))[0] + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [len(s)]])
    midranks = np.repeat((starts + ends - 1) / 2.0 + 1.0, ends - starts)
    ranks = np.empty(len(s))
    ranks[order] = midranks
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class Prediction:
    """One record's anomaly field at mask resolution plus its image score."""

    record_id: str
    y_map: np.ndarray
    score: float

    @classmethod
    def from_map(cls, record_id: str, y_map: np.ndarray,
                 kernel: int = DETECT_KERNEL) -> "Prediction":
        arr = np.asarray(y_map, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ValueError(f"prediction map for {record_id!r} is non-finite")
        return cls(record_id, arr, detect_score(arr, kernel))


@dataclass
class ClassMetrics:
    group: str
    image_auroc: float | None
    pixel_auroc: float | None


@dataclass
class EvalReport:
    """Per-class AUROCs with unweighted head/tail/overall means."""

    step: int
    per_class: dict[str, ClassMetrics]
    aggregates: dict[str, dict[str, float | None]]
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {
            "step": self.step,
            "classes": {
                name: {"group": m.group,
                       "image_auroc": m.image_auroc,
                       "pixel_auroc": m.pixel_auroc}
                for name, m in sorted(self.per_class.items())
            },
            "aggregates": self.aggregates,
            "warnings": list(self.warnings),
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        per_class = {name: ClassMetrics(group=m["group"],
                                        image_auroc=m["image_auroc"],
                                        pixel_auroc=m["pixel_auroc"])
                     for name, m in raw["classes"].items()}
        return cls(step=raw["step"], per_class=per_class,
                   aggregates=raw["aggregates"], warnings=raw["warnings"])

    def to_csv(self) -> str:
        def cell(v: float | None) -> str:
            return "" if v is None else f"{v:.10g}"

        lines = ["step,class,group,image_auroc,pixel_auroc"]
        for name in sorted(self.per_class):
            m = self.per_class[name]
            lines.append(f"{self.step},{name},{m.group},"
                         f"{cell(m.image_auroc)},{cell(m.pixel_auroc)}")
        for group in ("head", "tail", "overall"):
            agg = self.aggregates[group]
            lines.append(f"{self.step},({group}),aggregate,"
                         f"{cell(agg['image_auroc'])},{cell(agg['pixel_auroc'])}")
        return "\n".join(lines) + "\n"


def _pooled_pixel_auroc(preds: list[Prediction],
                        masks: list[np.ndarray | None]) -> tuple[float | None, str | None]:
    score_chunks, label_chunks = [], []
    for pred, mask in zip(preds, masks):
        if mask is not None and mask.shape != pred.y_map.shape:
            raise T.ShapeError(
                f"prediction {pred.record_id!r} shape {pred.y_map.shape} does not "
                f"match mask shape {mask.shape}")
        score_chunks.append(pred.y_map.ravel())
        labels = np.zeros(pred.y_map.size, dtype=np.uint8) if mask is None \
            else (mask.ravel() > 0).astype(np.uint8)
        label_chunks.append(labels)
    labels = np.concatenate(label_chunks)
    if labels.min() == labels.max():
        return None, "single-label pixel pool"
    return auroc(np.concatenate(score_chunks), labels), None


def class_report(predictions: list[Prediction], archive: EmbeddingArchive,
                 head_set: set[str], step: int = 0) -> EvalReport:
    """Score predictions against the archive's test annotations.

    Head/tail membership comes from the caller; classes whose image or
    pixel ranking is degenerate report None for that metric and drop out
    of the affected aggregate.
    """
    by_id = {r.record_id: r for r in archive.test_records()}
    notes: list[str] = []
    grouped: dict[str, list[tuple[Prediction, object]]] = {}
    for pred in predictions:
        rec = by_id.get(pred.record_id)
        if rec is None:
            raise ValueError(f"prediction {pred.record_id!r} has no test record")
        grouped.setdefault(rec.class_label, []).append((pred, rec))

    all_classes = sorted({r.class_label for r in archive.test_records()})
    per_class: dict[str, ClassMetrics] = {}
    for name in all_classes:
        pairs = grouped.get(name)
        group = "head" if name in head_set else "tail"
        if not pairs:
            notes.append(f"class {name!r} has no predictions; omitted")
            continue
        flags = [rec.anomaly_flag for _, rec in pairs]
        if min(flags) == max(flags):
            image = None
            notes.append(f"class {name!r} image AUROC undefined (single label)")
        else:
            image = auroc([p.score for p, _ in pairs], flags)
        pixel, why = _pooled_pixel_auroc([p for p, _ in pairs],
                                         [rec.mask for _, rec in pairs])
        if why is not None:
            notes.append(f"class {name!r} pixel AUROC undefined ({why})")
        per_class[name] = ClassMetrics(group=group, image_auroc=image, pixel_auroc=pixel)

    def agg(names: list[str], metric: str) -> float | None:
        vals = [getattr(per_class[n], metric) for n in names
                if getattr(per_class[n], metric) is not None]
        return float(np.mean(vals)) if vals else None

    groups = {
        "head": [n for n in per_class if per_class[n].group == "head"],
        "tail": [n for n in per_class if per_class[n].group == "tail"],
        "overall": list(per_class),
    }
    aggregates = {g: {"image_auroc": agg(ns, "image_auroc"),
                      "pixel_auroc": agg(ns, "pixel_auroc")}
                  for g, ns in groups.items()}
    for note in notes:
        warnings.warn(note, stacklevel=2)
    return EvalReport(step=step, per_class=per_class,
                      aggregates=aggregates, warnings=notes)
