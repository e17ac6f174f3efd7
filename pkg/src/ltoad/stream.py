"""Long-tailed subsets, online stream orderings, and the step-wise protocol.

Builds imbalanced training sets from a class ranking, splits the test set
into an operate stream and a held-out evaluation set, orders the stream
under one of eight configurations (blurry or disjoint-session), then
drives batch-by-batch adaptation with a full evaluation after every step.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archive import EmbeddingArchive, FeatureRecord
from .checkpoint import state_digest
from .fusion import DETECT_KERNEL, EvalReport, class_report
from .model import AnomalyModel
from .train import OnlineConfig, TrainConfig, make_learner

TAGS = ("B", "B-HF", "B-TF", "D2-HF", "D2-TF", "D5-HF", "D5-TF", "D5-M")
OPERATE_FRACTION = 0.3  # operate : evaluate = 3 : 7
EXTREME_DRAWS = 5  # uniforms per biased pick in the blurry orderings
MAX_STEPS = 33
FIVE_SESSIONS = 5


class StreamError(ValueError):
    """Invalid stream configuration or a protocol contract violation."""


# --------------------------------------------------------------------------
# long-tailed class counts


@dataclass(frozen=True)
class LongTailConfig:
    """How to thin a balanced training set into a long-tailed one."""

    imbalance_type: str  # "exp" | "step"
    imbalance_factor: float
    ranking: tuple[str, ...]  # most to least populated
    head: frozenset[str] | None = None  # defaults to the top half of ranking

    def validated(self) -> "LongTailConfig":
        if self.imbalance_type not in ("exp", "step"):
            raise StreamError(f"unknown imbalance type {self.imbalance_type!r}")
        if not self.imbalance_factor >= 1.0:
            raise StreamError("imbalance factor must be at least 1")
        if not self.ranking:
            raise StreamError("class ranking is empty")
        if len(set(self.ranking)) != len(self.ranking):
            raise StreamError("class ranking contains duplicates")
        if self.head is not None and not self.head <= set(self.ranking):
            extra = sorted(self.head - set(self.ranking))
            raise StreamError(f"head classes not in ranking: {extra}")
        return self

    def effective_head(self) -> frozenset[str]:
        if self.head is not None:
            return self.head
        return frozenset(self.ranking[: len(self.ranking) // 2])

    def counts(self, n_max: int) -> dict[str, int]:
        per_class = longtail_counts(self.ranking, self.imbalance_type,
                                    self.imbalance_factor, n_max,
                                    head=self.effective_head())
        return dict(zip(self.ranking, per_class))


def longtail_counts(ranking, imbalance_type: str, factor: float, n_max: int,
                    head=None) -> list[int]:
    """Per-class record counts for the requested imbalance profile.

    "exp" decays geometrically from n_max down to n_max/factor across the
    ranking; "step" keeps head classes at n_max and drops every tail class
    to n_max/factor. Counts round to the nearest integer, never below 1.
    """
    cfg = LongTailConfig(imbalance_type, factor, tuple(ranking),
                         None if head is None else frozenset(head)).validated()
    if n_max < 1:
        raise StreamError("n_max must be at least 1")
    k = len(cfg.ranking)
    if cfg.imbalance_type == "exp":
        if k < 2:
            raise StreamError("exp imbalance needs at least 2 classes")
        return [max(1, int(round(n_max * factor ** (-rank / (k - 1)))))
                for rank in range(k)]
    head_set = cfg.effective_head()
    tail_count = max(1, int(round(n_max / factor)))
    return [n_max if name in head_set else tail_count for name in cfg.ranking]


def longtail_subset(records: list[FeatureRecord], counts: dict[str, int],
                    seed: int) -> list[FeatureRecord]:
    """Uniform per-class subsample honouring the requested counts."""
    pools: dict[str, list[FeatureRecord]] = {}
    for rec in records:
        pools.setdefault(rec.class_label, []).append(rec)
    unknown = sorted(set(pools) - set(counts))
    if unknown:
        raise StreamError(f"counts missing for classes: {unknown}")
    rng = np.random.default_rng([seed, 0xA11])
    kept: list[FeatureRecord] = []
    for name in sorted(pools):
        members = sorted(pools[name], key=lambda r: r.record_id)
        want = counts[name]
        if want > len(members):
            raise StreamError(
                f"class {name!r} has {len(members)} records, need {want}")
        picks = rng.choice(len(members), size=want, replace=False)
        kept.extend(members[i] for i in sorted(picks))
    return kept


# --------------------------------------------------------------------------
# stratified operate / evaluate split


def _largest_remainder(quotas: list[float], total: int,
                       caps: list[int]) -> list[int]:
    """Integer apportionment: floor everything, then hand out the remainder
    by largest fractional part (ties to the lowest index)."""
    base = [min(math.floor(q), cap) for q, cap in zip(quotas, caps)]
    leftover = total - sum(base)
    if leftover < 0:
        raise StreamError("apportionment total below the summed floors")
    order = sorted(range(len(quotas)),
                   key=lambda i: (-(quotas[i] - base[i]), i))
    while leftover > 0:
        progressed = False
        for i in order:
            if leftover == 0:
                break
            if base[i] < caps[i]:
                base[i] += 1
                leftover -= 1
                progressed = True
        if not progressed:
            raise StreamError("apportionment quota exceeds available records")
    return base


def stratified_split(records: list[FeatureRecord],
                     seed: int) -> tuple[list[FeatureRecord], list[FeatureRecord]]:
    """Split test records 3:7 into (operate, evaluate), stratified per class.

    Class quotas follow floor-plus-largest-remainder against a global
    target of round(0.3 x total). Within a class the quota is apportioned
    across normal/anomalous records the same way (normals first on ties)
    so the evaluation side keeps both labels whenever the counts allow,
    and members are drawn uniformly without replacement.
    """
    if not records:
        raise StreamError("no records to split")
    by_class: dict[str, list[FeatureRecord]] = {}
    for rec in records:
        by_class.setdefault(rec.class_label, []).append(rec)
    names = sorted(by_class)
    sizes = [len(by_class[n]) for n in names]
    total = int(round(OPERATE_FRACTION * sum(sizes)))
    quotas = [OPERATE_FRACTION * s for s in sizes]
    class_take = _largest_remainder(quotas, total, sizes)

    rng = np.random.default_rng([seed, 0x511])
    operate: list[FeatureRecord] = []
    evaluate: list[FeatureRecord] = []
    for name, take in zip(names, class_take):
        members = sorted(by_class[name], key=lambda r: r.record_id)
        flags = [[r for r in members if not r.anomaly_flag],
                 [r for r in members if r.anomaly_flag]]
        share = [take * len(g) / len(members) for g in flags]
        per_flag = _largest_remainder(share, take, [len(g) for g in flags])
        for group, want in zip(flags, per_flag):
            if not group:
                continue
            picks = set(rng.choice(len(group), size=want, replace=False).tolist())
            for i, rec in enumerate(group):
                (operate if i in picks else evaluate).append(rec)
    operate.sort(key=lambda r: r.record_id)
    evaluate.sort(key=lambda r: r.record_id)
    return operate, evaluate


# --------------------------------------------------------------------------
# session rosters

# Curated five-session rosters for the standard industrial benchmarks,
# keyed by their (normalised) class vocabularies. Sessions group classes
# so each session carries a roughly equal share of the stream.
_MVTEC_FIVE = {
    "D5-HF": (("carpet", "hazelnut", "metal nut"),
              ("tile", "leather", "wood"),
              ("bottle", "screw", "capsule"),
              ("zipper", "cable", "toothbrush"),
              ("pill", "transistor", "grid")),
    "D5-TF": (("pill", "transistor", "grid"),
              ("zipper", "cable", "toothbrush"),
              ("screw", "capsule", "bottle"),
              ("tile", "leather", "wood"),
              ("carpet", "hazelnut", "metal nut")),
    "D5-M": (("carpet", "cable", "grid"),
             ("hazelnut", "transistor", "capsule"),
             ("metal nut", "wood", "screw"),
             ("leather", "pill", "toothbrush"),
             ("bottle", "tile", "zipper")),
}
_VISA_FIVE = {
    "D5-HF": (("pcb3", "pcb4"),
              ("pcb1", "pcb2"),
              ("macaroni1", "macaroni2"),
              ("chewinggum", "fryum", "pipe fryum"),
              ("candle", "capsules", "cashew")),
    "D5-TF": (("candle", "capsules", "cashew"),
              ("chewinggum", "fryum", "pipe fryum"),
              ("macaroni1", "macaroni2"),
              ("pcb1", "pcb2"),
              ("pcb3", "pcb4")),
    "D5-M": (("candle", "macaroni1"),
             ("capsules", "macaroni2", "pcb1"),
             ("cashew", "pcb2"),
             ("chewinggum", "pcb3"),
             ("fryum", "pipe fryum", "pcb4")),
}
_DAGM_FIVE = {
    "D5-HF": (("Class9", "Class10"),
              ("Class7", "Class8"),
              ("Class2", "Class6"),
              ("Class4", "Class5"),
              ("Class1", "Class3")),
    "D5-TF": (("Class1", "Class3"),
              ("Class4", "Class5"),
              ("Class6", "Class2"),
              ("Class7", "Class8"),
              ("Class9", "Class10")),
    "D5-M": (("Class2", "Class1"),
             ("Class7", "Class3"),
             ("Class8", "Class4"),
             ("Class9", "Class5"),
             ("Class10", "Class6")),
}


def _norm(name: str) -> str:
    return " ".join(name.lower().replace("_", " ").split())


def _vocab_key(table: dict) -> frozenset[str]:
    return frozenset(_norm(c) for sess in table["D5-HF"] for c in sess)


CURATED_SESSIONS = {_vocab_key(t): t for t in (_MVTEC_FIVE, _VISA_FIVE, _DAGM_FIVE)}


def _curated_for(classes: set[str], tag: str) -> list[tuple[str, ...]] | None:
    by_norm = {_norm(c): c for c in classes}
    if len(by_norm) != len(classes):
        return None
    table = CURATED_SESSIONS.get(frozenset(by_norm))
    if table is None:
        return None
    return [tuple(by_norm[_norm(c)] for c in sess) for sess in table[tag]]


def _balanced_partition(ranked: list[str], weights: dict[str, int],
                        parts: int) -> list[tuple[str, ...]]:
    """Contiguous partition of the ranked list into record-balanced groups."""
    parts = min(parts, len(ranked))
    remaining = sum(weights[c] for c in ranked)
    sessions: list[tuple[str, ...]] = []
    i = 0
    for s in range(parts):
        left = parts - s
        take = [ranked[i]]
        weight = weights[ranked[i]]
        i += 1
        while i < len(ranked) and len(ranked) - i > left - 1:
            target = remaining / left
            nxt = weights[ranked[i]]
            if weight + nxt / 2.0 > target:
                break
            take.append(ranked[i])
            weight += nxt
            i += 1
        remaining -= weight
        sessions.append(tuple(take))
    if i < len(ranked):
        sessions[-1] = sessions[-1] + tuple(ranked[i:])
    return sessions


def _snake_deal(ranked: list[str], parts: int) -> list[tuple[str, ...]]:
    """Boustrophedon deal, spreading head and tail across every group."""
    parts = min(parts, len(ranked))
    bins: list[list[str]] = [[] for _ in range(parts)]
    for j, name in enumerate(ranked):
        k = j % (2 * parts)
        bins[k if k < parts else 2 * parts - 1 - k].append(name)
    return [tuple(b) for b in bins]


def _session_rosters(tag: str, classes: set[str], head: frozenset[str],
                     weights: dict[str, int]) -> list[tuple[str, ...]]:
    ranked = sorted(classes, key=lambda c: (c not in head, -weights[c], c))
    if tag in ("D2-HF", "D2-TF"):
        first = tuple(c for c in ranked if c in head)
        second = tuple(c for c in ranked if c not in head)
        sessions = [s for s in (first, second) if s]
        return sessions if tag == "D2-HF" else sessions[::-1]
    curated = _curated_for(classes, tag)
    if curated is not None:
        return curated
    if tag == "D5-M":
        return _snake_deal(ranked, FIVE_SESSIONS)
    sessions = _balanced_partition(ranked, weights, FIVE_SESSIONS)
    return sessions if tag == "D5-HF" else sessions[::-1]


# --------------------------------------------------------------------------
# stream plans


@dataclass(frozen=True)
class StreamPlan:
    """An ordered operate stream plus its session layout and step budget."""

    tag: str
    order: tuple[str, ...]  # record ids, stream order
    sessions: tuple[tuple[int, tuple[str, ...]], ...]  # (start index, classes)
    head: tuple[str, ...]
    delta: int
    steps: int
    seed: int

    def __post_init__(self):
        if self.tag not in TAGS:
            raise StreamError(f"unknown stream tag {self.tag!r}")
        if self.delta < 1:
            raise StreamError("delta must be at least 1")
        if self.steps < 0:
            raise StreamError("steps must be non-negative")
        if self.steps * self.delta > len(self.order):
            raise StreamError(
                f"{self.steps} steps x delta {self.delta} exceeds "
                f"{len(self.order)} stream records")
        if len(set(self.order)) != len(self.order):
            raise StreamError("stream order repeats a record")
        starts = [s for s, _ in self.sessions]
        if starts and (starts[0] != 0 or starts != sorted(starts)):
            raise StreamError("session starts must begin at 0 and ascend")
        if self.tag.startswith("D"):
            seen: set[str] = set()
            for _, names in self.sessions:
                if seen & set(names):
                    raise StreamError("disjoint sessions share a class")
                seen |= set(names)

    def to_json(self) -> str:
        payload = {
            "tag": self.tag,
            "order": list(self.order),
            "sessions": [{"start": s, "classes": list(names)}
                         for s, names in self.sessions],
            "head": list(self.head),
            "delta": self.delta,
            "steps": self.steps,
            "seed": self.seed,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "StreamPlan":
        raw = json.loads(text)
        return cls(tag=raw["tag"], order=tuple(raw["order"]),
                   sessions=tuple((s["start"], tuple(s["classes"]))
                                  for s in raw["sessions"]),
                   head=tuple(raw["head"]), delta=raw["delta"],
                   steps=raw["steps"], seed=raw["seed"])


def extreme_uniform_pick(rng: np.random.Generator, n_head: int, n_tail: int,
                         order: str, draws: int = EXTREME_DRAWS) -> str:
    """Biased head/tail choice: keep the extreme of several uniform draws.

    Head-first keeps the largest of `draws` uniforms and picks head when it
    reaches the remaining head fraction; tail-first keeps the smallest and
    picks tail when it falls below that fraction. More draws push the
    extreme further out, strengthening the bias.
    """
    if order not in ("head-first", "tail-first"):
        raise StreamError(f"unknown pick order {order!r}")
    if draws < 1:
        raise StreamError("draws must be at least 1")
    if n_head < 0 or n_tail < 0 or n_head + n_tail == 0:
        raise StreamError("pick needs a non-empty pool")
    if n_head == 0:
        return "tail"
    if n_tail == 0:
        return "head"
    fraction = n_head / (n_head + n_tail)
    us = rng.random(draws)
    if order == "head-first":
        return "head" if us.max() >= fraction else "tail"
    return "tail" if us.min() <= fraction else "head"


def _shuffled(records: list[FeatureRecord],
              rng: np.random.Generator) -> list[FeatureRecord]:
    perm = rng.permutation(len(records))
    return [records[i] for i in perm]


def _biased_order(operate: list[FeatureRecord], head: frozenset[str],
                  order: str, rng: np.random.Generator,
                  draws: int) -> list[FeatureRecord]:
    pools = {"head": [r for r in operate if r.class_label in head],
             "tail": [r for r in operate if r.class_label not in head]}
    out: list[FeatureRecord] = []
    while pools["head"] or pools["tail"]:
        side = extreme_uniform_pick(rng, len(pools["head"]),
                                    len(pools["tail"]), order, draws)
        pool = pools[side]
        out.append(pool.pop(int(rng.integers(len(pool)))))
    return out


def make_stream(records: list[FeatureRecord], tag: str, head, seed: int,
                delta: int = 16, max_steps: int = MAX_STEPS,
                draws: int = EXTREME_DRAWS,
                ) -> tuple[StreamPlan, list[FeatureRecord]]:
    """Split test records and order the operate side under one config.

    Returns the plan (record ids, session layout, step budget) together
    with the held-out evaluation records. The step budget is the number
    of full delta-sized batches, capped at max_steps.
    """
    if tag not in TAGS:
        raise StreamError(f"unknown stream tag {tag!r}")
    if delta < 1:
        raise StreamError("delta must be at least 1")
    if max_steps < 0:
        raise StreamError("max_steps must be non-negative")
    classes = {r.class_label for r in records}
    head = frozenset(head)
    unknown = sorted(head - classes)
    if unknown:
        raise StreamError(f"head classes not in the test set: {unknown}")

    operate, evaluate = stratified_split(records, seed)
    rng = np.random.default_rng([seed, 0x0D3])
    if tag == "B":
        ordered = _shuffled(operate, rng)
        sessions = [(0, tuple(sorted(classes)))]
    elif tag in ("B-HF", "B-TF"):
        order = "head-first" if tag == "B-HF" else "tail-first"
        ordered = _biased_order(operate, head, order, rng, draws)
        sessions = [(0, tuple(sorted(classes)))]
    else:
        weights = {c: 0 for c in classes}
        for rec in operate:
            weights[rec.class_label] += 1
        rosters = _session_rosters(tag, classes, head, weights)
        ordered, sessions = [], []
        for names in rosters:
            sessions.append((len(ordered), tuple(names)))
            members = [r for r in operate if r.class_label in set(names)]
            ordered.extend(_shuffled(members, rng))

    steps = min(len(ordered) // delta, max_steps)
    plan = StreamPlan(tag=tag, order=tuple(r.record_id for r in ordered),
                      sessions=tuple(sessions),
                      head=tuple(sorted(head)), delta=delta, steps=steps,
                      seed=seed)
    return plan, evaluate


# --------------------------------------------------------------------------
# protocol driver


def _resolve(plan: StreamPlan,
             archive: EmbeddingArchive) -> tuple[dict[str, FeatureRecord],
                                                 list[FeatureRecord]]:
    by_id = {r.record_id: r for r in archive.test_records()}
    missing = [rid for rid in plan.order if rid not in by_id]
    if missing:
        raise StreamError(f"stream refs missing from the archive: {missing[:5]}")
    eval_records = sorted((r for r in archive.test_records()
                           if r.record_id not in set(plan.order)),
                          key=lambda r: r.record_id)
    if not eval_records:
        raise StreamError("no evaluation records left outside the stream")
    return by_id, eval_records


def run_protocol(model: AnomalyModel, plan: StreamPlan,
                 archive: EmbeddingArchive, online_cfg: OnlineConfig,
                 train_cfg: TrainConfig | None = None, *,
                 steps: int | None = None,
                 out_size: tuple[int, int] | None = None,
                 kernel: int = DETECT_KERNEL,
                 workers: int = 1,
                 on_report=None) -> list[EvalReport]:
    """Adapt on the stream batch by batch, evaluating after every step.

    Produces a baseline report for the unadapted model and one report per
    consumed batch, always scoring the learner's published parameters on
    the full evaluation set. A digest audit guarantees evaluation never
    changes what it measures. When given, on_report(step, report, model)
    runs after each evaluation with the published model of that step.
    """
    train_cfg = (train_cfg or TrainConfig()).validated()
    online_cfg = online_cfg.validated()
    by_id, eval_records = _resolve(plan, archive)
    head_set = set(plan.head)
    if out_size is None:
        out_size = next((r.mask.shape for r in eval_records
                         if r.mask is not None), None)

    requested = plan.steps if steps is None else steps
    capacity = len(plan.order) // plan.delta
    total = min(requested, capacity)
    if total < requested:
        warnings.warn(f"stream exhausted after {total} steps "
                      f"(requested {requested})", stacklevel=2)

    learner = make_learner(model, train_cfg, online_cfg)

    def evaluate(step: int) -> EvalReport:
        published = learner.published
        before = state_digest(published.state())
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                preds = list(pool.map(
                    lambda r: published.predict(r, out_size, kernel),
                    eval_records))
        else:
            preds = [published.predict(r, out_size, kernel)
                     for r in eval_records]
        if state_digest(published.state()) != before:
            raise StreamError("evaluation mutated the published parameters")
        return class_report(preds, archive, head_set, step=step)

    reports = [evaluate(0)]
    if on_report is not None:
        on_report(0, reports[0], learner.published)
    for t in range(1, total + 1):
        batch = [by_id[rid]
                 for rid in plan.order[(t - 1) * plan.delta: t * plan.delta]]
        learner.observe(batch)
        reports.append(evaluate(t))
        if on_report is not None:
            on_report(t, reports[t], learner.published)
    return reports


# --------------------------------------------------------------------------
# report emission

_SERIES = (("head", "#2b6cb0"), ("tail", "#c53030"), ("overall", "#4a5568"))


def _render_curves(reports: list[EvalReport]) -> str:
    width, height = 640, 400
    left, right, top, bottom = 60, 150, 30, 50
    span_x = width - left - right
    span_y = height - top - bottom
    max_step = max(r.step for r in reports) or 1

    def x(step: int) -> float:
        return left + span_x * step / max_step

    def y(value: float) -> float:
        return top + span_y * (1.0 - value)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" '
             f'width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="12">',
             f'<text x="{left}" y="18">pixel AUROC over stream steps</text>']
    for i in range(5):
        v = i / 4.0
        gy = y(v)
        parts.append(f'<line x1="{left}" y1="{gy:.1f}" '
                     f'x2="{width - right}" y2="{gy:.1f}" '
                     f'stroke="#dddddd"/>')
        parts.append(f'<text x="{left - 8}" y="{gy + 4:.1f}" '
                     f'text-anchor="end">{v:.2f}</text>')
    for step in {0, max_step} | {r.step for r in reports[:: max(1, len(reports) // 8)]}:
        parts.append(f'<text x="{x(step):.1f}" y="{height - bottom + 18}" '
                     f'text-anchor="middle">{step}</text>')
    for idx, (group, color) in enumerate(_SERIES):
        points = [(r.step, r.aggregates[group]["pixel_auroc"])
                  for r in reports
                  if r.aggregates[group]["pixel_auroc"] is not None]
        parts.append(f'<g class="series" id="series-{group}" fill="{color}" '
                     f'stroke="{color}">')
        if len(points) > 1:
            coords = " ".join(f"{x(s):.1f},{y(v):.1f}" for s, v in points)
            parts.append(f'<polyline points="{coords}" fill="none" '
                         f'stroke-width="1.5"/>')
        for s, v in points:
            parts.append(f'<circle class="pt" cx="{x(s):.1f}" '
                         f'cy="{y(v):.1f}" r="3"/>')
        parts.append('</g>')
        ly = top + 16 * idx
        parts.append(f'<rect x="{width - right + 16}" y="{ly}" width="10" '
                     f'height="10" fill="{color}"/>')
        parts.append(f'<text x="{width - right + 32}" y="{ly + 9}">'
                     f'{group}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(reports: list[EvalReport], out_dir) -> list[str]:
    """Write the protocol's reports as CSV, JSON, and an SVG chart."""
    if not reports:
        raise StreamError("no reports to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "report.csv"
    json_path = out / "report.json"
    svg_path = out / "curves.svg"

    chunks = []
    for i, rep in enumerate(reports):
        text = rep.to_csv()
        chunks.append(text if i == 0 else text.split("\n", 1)[1])
    csv_path.write_text("".join(chunks))

    payload = {"reports": [json.loads(r.to_json()) for r in reports]}
    json_path.write_text(json.dumps(payload, sort_keys=True,
                                    separators=(",", ":")) + "\n")
    svg_path.write_text(_render_curves(reports))
    return [str(csv_path), str(json_path), str(svg_path)]
