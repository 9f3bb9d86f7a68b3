"""Held-out evaluation: ranked candidates, PR curve, AUC, P@N, diagnostics.

Every test bag yields one candidate record per non-NA relation, scored
with the model's class probability and marked gold when the triplet is
in the held-out KG set. Records sort by descending score with a fixed
(pair, relation) tie key, so all metrics are deterministic.

Precision and recall along the rank sweep are integer ratios; the AUC
integrators work on exact rationals and convert to float once at the
end, which lets independently coded oracles match them exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction

from .attention_model import Model, forward_bag
from .data_io import Bag, NA_RELATION
from .ug_store import PATH_TYPES


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    e1: str
    e2: str
    relation: str
    score: float
    gold: bool


def rank_key(record: EvalRecord):
    return (-record.score, record.e1, record.e2, record.relation)


def predict_all(
    model: Model, bags: list[Bag], gold_triplets: set[tuple[str, str, str]]
) -> list[EvalRecord]:
    """Score every (bag, non-NA relation) candidate, ranked by probability."""
    records: list[EvalRecord] = []
    candidates = model.relations[1:]
    if model.relations[0] != NA_RELATION:
        raise EvalError(f"relation vocabulary must start with {NA_RELATION}")
    for bag in bags:
        fwd = forward_bag(None, model, bag)
        probs = fwd.class_probs
        for rel in candidates:
            ridx = model.relation_idx(rel)
            records.append(
                EvalRecord(
                    e1=bag.e1,
                    e2=bag.e2,
                    relation=rel,
                    score=float(probs[ridx]),
                    gold=(bag.e1, rel, bag.e2) in gold_triplets,
                )
            )
    records.sort(key=rank_key)
    return records


@dataclass
class PRCurve:
    """Rank-sweep points plus the integer counters behind them."""

    points: list[tuple[float, float]]
    true_positives: list[int]
    total_gold: int


def pr_curve(records: list[EvalRecord]) -> PRCurve:
    ranked = sorted(records, key=rank_key)
    total_gold = sum(1 for r in ranked if r.gold)
    if total_gold == 0:
        raise EvalError("cannot draw a PR curve with zero gold-positive records")
    tps: list[int] = []
    points: list[tuple[float, float]] = []
    tp = 0
    for n, rec in enumerate(ranked, start=1):
        if rec.gold:
            tp += 1
        tps.append(tp)
        points.append((tp / total_gold, tp / n))
    return PRCurve(points=points, true_positives=tps, total_gold=total_gold)


def auc(curve: PRCurve, method: str = "trapezoid") -> float:
    """Area under the rank-sweep PR points over recall [0, max reached].

    ``trapezoid`` anchors at (0, first precision) and integrates
    linearly; ``step`` sums precision * recall increments. Both run on
    exact rationals and round to float once.
    """
    g = curve.total_gold
    if method == "trapezoid":
        area = Fraction(0)
        prev_r = Fraction(0)
        prev_p = Fraction(curve.true_positives[0], 1)
        for n, tp in enumerate(curve.true_positives, start=1):
            r = Fraction(tp, g)
            p = Fraction(tp, n)
            area += (r - prev_r) * (prev_p + p) / 2
            prev_r, prev_p = r, p
        return float(area)
    if method == "step":
        area = Fraction(0)
        prev_r = Fraction(0)
        for n, tp in enumerate(curve.true_positives, start=1):
            r = Fraction(tp, g)
            area += (r - prev_r) * Fraction(tp, n)
            prev_r = r
        return float(area)
    raise EvalError(f"unknown AUC method {method!r}")


def precision_at_n(records: list[EvalRecord], n: int) -> float:
    if n < 1:
        raise EvalError(f"precision@N needs N >= 1, got {n}")
    if n > len(records):
        raise EvalError(f"precision@{n} asked of only {len(records)} records")
    ranked = sorted(records, key=rank_key)
    return sum(1 for r in ranked[:n] if r.gold) / n


PN_GRID = (100, 200, 300, 500, 1000, 2000)


def precision_grid(records: list[EvalRecord]) -> list[tuple[int, float]]:
    out = [(n, precision_at_n(records, n)) for n in PN_GRID if n <= len(records)]
    if not out and records:
        out = [(len(records), precision_at_n(records, len(records)))]
    return out


# ---------------------------------------------------------------------------
# Attention-bias diagnostics.
# ---------------------------------------------------------------------------


@dataclass
class BiasReport:
    """Mean global path-attention weight by path type and by length bucket."""

    by_type: list[tuple[str, int, float]]
    by_length: list[tuple[str, int, float]]
    raw: list[tuple[str, int, float]]


def attention_bias_report(model: Model, bags: list[Bag], bucket_width: int = 10) -> BiasReport:
    if bucket_width < 1:
        raise EvalError(f"bucket width must be >= 1, got {bucket_width}")
    raw: list[tuple[str, int, float]] = []
    for bag in bags:
        if not bag.paths:
            continue
        fwd = forward_bag(None, model, bag)
        for p, w in zip(bag.paths, fwd.path_weights):
            raw.append((p.path_type, p.num_tokens, float(w)))

    by_type = []
    for ptype in PATH_TYPES:
        ws = [w for t, _, w in raw if t == ptype]
        if ws:
            by_type.append((ptype, len(ws), sum(ws) / len(ws)))

    buckets: dict[int, list[float]] = {}
    for _, ntok, w in raw:
        buckets.setdefault(ntok // bucket_width, []).append(w)
    by_length = []
    for b in sorted(buckets):
        ws = buckets[b]
        label = f"{b * bucket_width}-{(b + 1) * bucket_width - 1}"
        by_length.append((label, len(ws), sum(ws) / len(ws)))
    return BiasReport(by_type=by_type, by_length=by_length, raw=raw)


# ---------------------------------------------------------------------------
# Report files.
# ---------------------------------------------------------------------------


def write_pr_csv(curve: PRCurve, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("recall,precision\n")
        for r, p in curve.points:
            fh.write(f"{r!r},{p!r}\n")


def write_metrics(path, curve: PRCurve, records: list[EvalRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"auc\t{auc(curve, 'trapezoid')!r}\n")
        fh.write(f"auc_step\t{auc(curve, 'step')!r}\n")
        for n, p in precision_grid(records):
            fh.write(f"p@{n}\t{p!r}\n")


def write_bias_csv(report: BiasReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("section,group,count,mean_weight\n")
        for name, count, mean in report.by_type:
            fh.write(f"type,{name},{count},{mean!r}\n")
        for name, count, mean in report.by_length:
            fh.write(f"length,{name},{count},{mean!r}\n")


def write_pr_svg(curve: PRCurve, path) -> None:
    """Minimal deterministic SVG rendering of the PR curve."""
    width, height, margin = 640, 480, 50
    span_x, span_y = width - 2 * margin, height - 2 * margin

    def sx(r: float) -> float:
        return margin + r * span_x

    def sy(p: float) -> float:
        return height - margin - p * span_y

    pts = " ".join(f"{sx(r):.2f},{sy(p):.2f}" for r, p in curve.points)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 10}" text-anchor="middle" '
        f'font-size="14">recall</text>',
        f'<text x="15" y="{height // 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 15 {height // 2})">precision</text>',
        f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="1.5"/>',
        "</svg>",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_eval_outputs(out_dir, model: Model, bags: list[Bag], gold_triplets) -> dict:
    """Run the full held-out evaluation and write all report files."""
    os.makedirs(out_dir, exist_ok=True)
    records = predict_all(model, bags, gold_triplets)
    curve = pr_curve(records)
    write_pr_csv(curve, os.path.join(out_dir, "pr_curve.csv"))
    write_metrics(os.path.join(out_dir, "metrics.txt"), curve, records)
    report = attention_bias_report(model, bags)
    write_bias_csv(report, os.path.join(out_dir, "attention_bias.csv"))
    write_pr_svg(curve, os.path.join(out_dir, "pr_curve.svg"))
    return {
        "auc": auc(curve, "trapezoid"),
        "auc_step": auc(curve, "step"),
        "precision_at": precision_grid(records),
        "records": len(records),
    }
