"""Data-support estimation: budgeted bisection over ranked prefixes.

For a target and a ranking of training samples, the support is the
smallest prefix size M whose removal (or relabeling) makes the average
retrained model misclassify the target. Probing one M costs n_test model
trainings, so the search is a bisection with a fixed probe budget: the
first probe at M = k settles whether the target is flippable at all, and
each later probe halves the bracket. Results are therefore upper bounds
within ceil(k / 2^budget) of the true minimal prefix for monotone oracles.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from joblib import Parallel, delayed

from .attribution import RankedIndices
from .oracle import (
    ModKind,
    Modification,
    TrainConfig,
    counterfactual_test,
    derive_seed,
    highest_incorrect_class,
    unmodified_models,
)
from .store import EmbeddingSet, TargetSample

# A probe maps a prefix size M to the fraction of retrained runs that
# still classify the target correctly.
ProbeFn = Callable[[int], float]

NOT_FOUND = -1  # CSV serialization of "no support within k"


@dataclass(frozen=True)
class SupportQuery:
    target: TargetSample
    ranked: RankedIndices
    mode: ModKind
    budget: int = 7
    n_test: int = 5

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.n_test < 1:
            raise ValueError("n_test must be >= 1")
        object.__setattr__(self, "mode", ModKind(self.mode))

    @property
    def k(self) -> int:
        return self.ranked.k


@dataclass(frozen=True)
class SupportResult:
    """Outcome of one search: the estimate plus every probe actually run."""

    target_id: int
    mode: ModKind
    support: int | None
    probes: tuple[tuple[int, float], ...]
    error: str | None = None

    @property
    def found(self) -> bool:
        return self.support is not None


def compute_support(query: SupportQuery, probe: ProbeFn) -> SupportResult:
    """Budgeted bisection for the smallest misclassifying prefix.

    The search never runs more than budget + 1 oracle probes: repeated
    midpoints are memoized, and the empty prefix counts as correct without
    a probe (a size-0 subset cannot cause the flip). A tie at exactly 0.5
    counts as misclassified.
    """
    memo: dict[int, float] = {}
    probes: list[tuple[int, float]] = []

    def run(m: int) -> float:
        if m == 0:
            return 1.0
        if m not in memo:
            value = float(probe(m))
            memo[m] = value
            probes.append((m, value))
        return memo[m]

    low, high = 0, query.k
    m = high
    if run(m) > 0.5:
        return SupportResult(
            target_id=query.target.id, mode=query.mode, support=None, probes=tuple(probes)
        )
    support = m
    for _ in range(query.budget):
        m = (low + high) // 2
        if run(m) > 0.5:
            low = m
        else:
            high = m
            support = min(m, support)
    return SupportResult(
        target_id=query.target.id, mode=query.mode, support=support, probes=tuple(probes)
    )


def brute_force_support(query: SupportQuery, probe: ProbeFn) -> SupportResult:
    """Scan prefixes M = 1..k in order; reference for small k only."""
    probes: list[tuple[int, float]] = []
    for m in range(1, query.k + 1):
        value = float(probe(m))
        probes.append((m, value))
        if value <= 0.5:
            return SupportResult(
                target_id=query.target.id, mode=query.mode, support=m, probes=tuple(probes)
            )
    return SupportResult(
        target_id=query.target.id, mode=query.mode, support=None, probes=tuple(probes)
    )


def make_prefix_probe(
    dataset: EmbeddingSet,
    target: TargetSample,
    ranked: RankedIndices,
    mode: ModKind,
    cfg: TrainConfig,
    n_test: int,
    mislabel_to: int | None = None,
    trainer=None,
) -> ProbeFn:
    """Bind a ranking prefix to retraining runs of the oracle.

    Training seeds derive from (cfg.seed, target id, M, trial), so serial
    and concurrent sweeps produce identical results. ``trainer`` may
    substitute a heavier oracle with the (set, mod, cfg) -> model signature.
    """
    mode = ModKind(mode)
    if mode is ModKind.MISLABEL and mislabel_to is None:
        raise ValueError("mislabel probes need the precomputed relabel class")

    def probe(m: int) -> float:
        mod = Modification(kind=mode, indices=ranked.indices[:m], new_label=mislabel_to)
        probe_cfg = replace(cfg, seed=derive_seed(cfg.seed, target.id, m))
        return counterfactual_test(dataset, mod, target, probe_cfg, n_test, trainer=trainer)

    return probe


def _search_one(dataset, target, ranked, mode, cfg, budget, n_test, mislabel_to,
                fail_fast, trainer):
    query = SupportQuery(target=target, ranked=ranked, mode=mode, budget=budget, n_test=n_test)
    probe = make_prefix_probe(dataset, target, ranked, mode, cfg, n_test, mislabel_to, trainer)
    try:
        return compute_support(query, probe)
    except Exception as exc:
        if fail_fast:
            raise
        return SupportResult(
            target_id=target.id, mode=mode, support=None, probes=(), error=str(exc)
        )


def support_sweep(
    dataset: EmbeddingSet,
    targets: Sequence[TargetSample],
    rankings: Sequence[RankedIndices],
    mode: ModKind,
    cfg: TrainConfig,
    budget: int = 7,
    n_test: int = 5,
    n_jobs: int = 1,
    fail_fast: bool = True,
    trainer=None,
) -> list[SupportResult]:
    """Run one search per target; targets are independent and parallelize.

    In mislabel mode the relabel class is computed per target from n_test
    unmodified training runs, which are shared across all targets.
    """
    mode = ModKind(mode)
    if len(targets) != len(rankings):
        raise ValueError("need exactly one ranking per target")
    mislabel_to: list[int | None] = [None] * len(targets)
    if mode is ModKind.MISLABEL:
        # The relabel class comes from the same n_test baseline models for
        # every target, so train them once.
        baseline = unmodified_models(dataset, cfg, n_test, trainer=trainer)
        mislabel_to = [highest_incorrect_class(baseline, t) for t in targets]
    jobs = (
        delayed(_search_one)(
            dataset, target, ranked, mode, cfg, budget, n_test, new_label, fail_fast, trainer
        )
        for target, ranked, new_label in zip(targets, rankings, mislabel_to)
    )
    return list(Parallel(n_jobs=n_jobs)(jobs))


@dataclass(frozen=True)
class BrittlenessReport:
    """CDF of found supports over [0, k] plus its normalized area."""

    results: tuple[SupportResult, ...]
    cdf: tuple[tuple[int, float], ...]
    auc: float
    k: int


def cdf_and_auc(results: Sequence[SupportResult], k: int) -> BrittlenessReport:
    """Right-continuous step CDF of support sizes and its exact area / k.

    Not-found targets contribute zero everywhere, so the CDF saturates at
    the fraction of flippable targets, not at 1.
    """
    if not results:
        raise ValueError("results list is empty")
    total = len(results)
    found = sorted(r.support for r in results if r.found)
    if any(s > k for s in found):
        raise ValueError(f"found a support larger than k={k}")
    points: list[tuple[int, float]] = []
    seen = 0
    for value in found:
        seen += 1
        if points and points[-1][0] == value:
            points[-1] = (value, seen / total)
        else:
            points.append((value, seen / total))
    area = 0.0
    for i, (x, frac) in enumerate(points):
        x_next = points[i + 1][0] if i + 1 < len(points) else k
        area += frac * (x_next - x)
    return BrittlenessReport(
        results=tuple(results), cdf=tuple(points), auc=area / k if k > 0 else 0.0, k=k
    )


def win_rate(
    a: Sequence[SupportResult], b: Sequence[SupportResult]
) -> tuple[int, int, int]:
    """Per-target comparison of two support estimates: (smaller, equal, larger).

    Not-found compares larger than any found value; two not-founds are equal.
    """
    if len(a) != len(b):
        raise ValueError(f"mismatched target counts: {len(a)} vs {len(b)}")
    for ra, rb in zip(a, b):
        if ra.target_id != rb.target_id:
            raise ValueError(
                f"misaligned target ids: {ra.target_id} vs {rb.target_id}"
            )
    smaller = equal = larger = 0
    for ra, rb in zip(a, b):
        va = ra.support if ra.found else np.inf
        vb = rb.support if rb.found else np.inf
        if va < vb:
            smaller += 1
        elif va > vb:
            larger += 1
        else:
            equal += 1
    return smaller, equal, larger


def write_support_csv(path, results: Sequence[SupportResult], comment: str | None = None) -> None:
    """Per-target outcomes as target_id,mode,support (-1 when not found)."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["target_id", "mode", "support"])
        for result in results:
            if result.error is not None:
                writer.writerow([result.target_id, result.mode.value, f"error:{result.error}"])
            else:
                writer.writerow(
                    [
                        result.target_id,
                        result.mode.value,
                        result.support if result.found else NOT_FOUND,
                    ]
                )


def read_support_csv(path) -> list[SupportResult]:
    """Inverse of write_support_csv (probe lists are not round-tripped)."""
    results: list[SupportResult] = []
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    for record in csv.DictReader(rows):
        raw = record["support"]
        if raw.startswith("error:"):
            results.append(
                SupportResult(
                    target_id=int(record["target_id"]),
                    mode=ModKind(record["mode"]),
                    support=None,
                    probes=(),
                    error=raw[len("error:") :],
                )
            )
            continue
        value = int(raw)
        results.append(
            SupportResult(
                target_id=int(record["target_id"]),
                mode=ModKind(record["mode"]),
                support=None if value == NOT_FOUND else value,
                probes=(),
            )
        )
    return results


def write_report_csv(path, report: BrittlenessReport, comment: str | None = None) -> None:
    """CDF points as x,fraction rows followed by a one-line auc summary."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["x", "fraction"])
        for x, frac in report.cdf:
            writer.writerow([x, repr(frac)])
        writer.writerow(["auc", repr(report.auc)])


def cdf_svg(report: BrittlenessReport, title: str = "support CDF",
            comment: str | None = None) -> str:
    """Deterministic standalone SVG of the step CDF (no plotting deps)."""
    width, height = 640, 400
    left, right, top, bottom = 60, 20, 30, 40
    plot_w = width - left - right
    plot_h = height - top - bottom

    def sx(x: float) -> float:
        return left + (x / report.k) * plot_w if report.k else left

    def sy(frac: float) -> float:
        return top + (1.0 - frac) * plot_h

    points: list[tuple[float, float]] = [(sx(0), sy(0.0))]
    level = 0.0
    for x, frac in report.cdf:
        points.append((sx(x), sy(level)))
        points.append((sx(x), sy(frac)))
        level = frac
    points.append((sx(report.k), sy(level)))
    path = " ".join(f"{px:.2f},{py:.2f}" for px, py in points)

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
    ]
    if comment:
        lines.append(f"<!-- {comment} -->")
    lines += [
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-size="14">{title} '
        f"(auc={report.auc:.4f})</text>",
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" '
        'stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(frac)
        lines.append(
            f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>'
        )
        lines.append(
            f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end" font-size="11">{frac:g}</text>'
        )
    for tick in (0, report.k // 2, report.k):
        x = sx(tick)
        lines.append(
            f'<line x1="{x:.2f}" y1="{top + plot_h}" x2="{x:.2f}" y2="{top + plot_h + 4}" '
            'stroke="black"/>'
        )
        lines.append(
            f'<text x="{x:.2f}" y="{top + plot_h + 18}" text-anchor="middle" '
            f'font-size="11">{tick}</text>'
        )
    lines.append(f'<polyline points="{path}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
