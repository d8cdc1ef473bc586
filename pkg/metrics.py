"""
Ranking Metrics
NDCG@k and ERR@k per query, aggregate reports and paired t-tests between systems.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import betainc

from letor_data import Dataset
from model import RsaModel, score_group

logger = logging.getLogger(__name__)

CUTOFFS: Tuple[int, ...] = (1, 3, 5, 10)

# Column order of the results table: ERR@1, NDCG@1, ERR@3, NDCG@3, ...
METRIC_NAMES: Tuple[str, ...] = tuple(
    name for k in CUTOFFS for name in (f"ERR@{k}", f"NDCG@{k}")
)

# Grade scale of the ERR stopping probabilities
ERR_G_MAX = 4

SELECTION_METRIC = "NDCG@10"


class MetricError(ValueError):
    """Raised for invalid metric arguments."""


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    mean_diff: float = 0.0


@dataclass(frozen=True)
class MetricReport:
    """Per-query ERR/NDCG values at 1, 3, 5 and 10, keyed by metric name."""

    qids: Tuple[str, ...]
    values: Dict[str, np.ndarray]

    @property
    def query_count(self) -> int:
        return len(self.qids)

    @property
    def means(self) -> Dict[str, float]:
        return {name: float(np.mean(self.values[name])) if self.query_count else 0.0
                for name in METRIC_NAMES}

    def mean(self, name: str) -> float:
        return self.means[name]

    def format_table(self, system: str = "model") -> str:
        """Tab-delimited one-row results table in ERR@1, NDCG@1, ..., NDCG@10 order."""
        header = "system\t" + "\t".join(METRIC_NAMES)
        means = self.means
        row = system + "\t" + "\t".join(f"{means[n]:.4f}" for n in METRIC_NAMES)
        return f"{header}\n{row}\n"

    def format_per_query(self) -> str:
        """Tab-delimited per-query values with full float precision."""
        lines = ["qid\t" + "\t".join(METRIC_NAMES)]
        for i, qid in enumerate(self.qids):
            lines.append(qid + "\t" + "\t".join(repr(float(self.values[n][i])) for n in METRIC_NAMES))
        return "\n".join(lines) + "\n"


def parse_per_query(text: str) -> MetricReport:
    """Inverse of MetricReport.format_per_query."""
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise MetricError("empty per-query table")
    header = lines[0].split("\t")
    if header[0] != "qid" or tuple(header[1:]) != METRIC_NAMES:
        raise MetricError(f"unexpected per-query header {header}")
    qids: List[str] = []
    columns: Dict[str, List[float]] = {n: [] for n in METRIC_NAMES}
    for line in lines[1:]:
        cells = line.split("\t")
        if len(cells) != len(header):
            raise MetricError(f"per-query row has {len(cells)} cells, expected {len(header)}")
        qids.append(cells[0])
        for name, cell in zip(METRIC_NAMES, cells[1:]):
            columns[name].append(float(cell))
    return MetricReport(tuple(qids), {n: np.asarray(v) for n, v in columns.items()})


def read_per_query(path: Union[str, Path]) -> MetricReport:
    with open(path, "r", encoding="utf-8") as f:
        return parse_per_query(f.read())


def _check_k(k: int) -> None:
    if k < 1:
        raise MetricError(f"cutoff k must be >= 1, got {k}")


def _dcg(grades: np.ndarray, k: int) -> float:
    top = grades[:k].astype(np.float64)
    discounts = np.log2(np.arange(2, top.size + 2))
    return float(((2.0 ** top - 1.0) / discounts).sum())


def ndcg_at_k(ranked_rels: Sequence[int], k: int) -> float:
    """
    NDCG@k with gain 2^g - 1 and discount log2(i + 1).

    Args:
        ranked_rels: grades in predicted order
        k: cutoff

    Returns:
        value in [0, 1]; 0 when the ideal DCG is 0
    """
    _check_k(k)
    grades = np.asarray(ranked_rels, dtype=np.int64)
    if grades.size and grades.min() < 0:
        raise MetricError("grades must be non-negative")
    ideal = _dcg(np.sort(grades)[::-1], k)
    if ideal == 0.0:
        return 0.0
    return _dcg(grades, k) / ideal


def err_at_k(ranked_rels: Sequence[int], k: int, g_max: int = ERR_G_MAX) -> float:
    """Expected reciprocal rank under the cascade model, stop probability (2^g - 1) / 2^g_max."""
    _check_k(k)
    grades = np.asarray(ranked_rels, dtype=np.int64)
    if grades.size and (grades.min() < 0 or grades.max() > g_max):
        raise MetricError(f"grades must lie in [0, {g_max}]")
    stop = (2.0 ** grades[:k] - 1.0) / 2.0 ** g_max
    value = 0.0
    not_stopped = 1.0
    for rank, r in enumerate(stop, 1):
        value += not_stopped * r / rank
        not_stopped *= 1.0 - r
    return value


def rank_by_scores(scores: Sequence[float], rels: Sequence[int]) -> np.ndarray:
    """Grades sorted by descending score; ties keep document order."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return np.asarray(rels)[order]


def evaluate_scores(qids: Sequence[str], scores: Sequence[np.ndarray],
                    rels: Sequence[np.ndarray], g_max: int = ERR_G_MAX) -> MetricReport:
    values: Dict[str, List[float]] = {n: [] for n in METRIC_NAMES}
    for s, r in zip(scores, rels):
        ranked = rank_by_scores(s, r)
        for k in CUTOFFS:
            values[f"ERR@{k}"].append(err_at_k(ranked, k, g_max))
            values[f"NDCG@{k}"].append(ndcg_at_k(ranked, k))
    return MetricReport(tuple(qids), {n: np.asarray(v, dtype=np.float64) for n, v in values.items()})


def evaluate_scorer(scorer: Callable, dataset: Dataset, g_max: Optional[int] = None) -> MetricReport:
    """Evaluate any callable mapping a QueryGroup to an n-vector of scores."""
    g_max = max(ERR_G_MAX, dataset.k_max) if g_max is None else g_max
    groups = dataset.groups
    return evaluate_scores(
        [g.qid for g in groups],
        [np.asarray(scorer(g), dtype=np.float64) for g in groups],
        [g.relevance for g in groups],
        g_max,
    )


def evaluate(model: RsaModel, dataset: Dataset, g_max: Optional[int] = None) -> MetricReport:
    """Score every group with a model and compute ERR/NDCG at 1, 3, 5 and 10."""
    report = evaluate_scorer(lambda g: score_group(model, g), dataset, g_max)
    logger.debug(f"Evaluated {report.query_count} queries: NDCG@10 {report.mean(SELECTION_METRIC):.4f}")
    return report


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """
    Two-sided paired t-test on d = a - b.

    Zero-variance differences give p = 1 when their mean is 0 and p = 0 otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"paired samples differ in length: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise MetricError(f"paired t-test needs at least 2 pairs, got {n}")
    d = a - b
    df = n - 1
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, df=df, p=1.0, mean_diff=mean)
        return TTestResult(t=math.copysign(math.inf, mean), df=df, p=0.0, mean_diff=mean)
    t = mean / (sd / math.sqrt(n))
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TTestResult(t=t, df=df, p=min(max(p, 0.0), 1.0), mean_diff=mean)


def significance_table(a: MetricReport, b: MetricReport) -> str:
    """Paired t-test of system a against system b for every metric and cutoff."""
    _check_paired(a, b)
    lines = ["metric\tmean_a\tmean_b\tt\tdf\tp"]
    for name in METRIC_NAMES:
        result = paired_t_test(a.values[name], b.values[name])
        lines.append(
            f"{name}\t{a.mean(name):.6f}\t{b.mean(name):.6f}\t{result.t:.6f}\t{result.df}\t{result.p:.6g}"
        )
    return "\n".join(lines) + "\n"


def significance_marker(p: float) -> str:
    if p < 0.01:
        return "*"
    if p < 0.05:
        return "+"
    return ""


def compare_systems(reports: Dict[str, MetricReport], reference: str) -> str:
    """
    Results table of several systems; each non-reference cell carries * (p < 0.01)
    or + (0.01 <= p < 0.05) when it differs significantly from the reference.
    """
    if reference not in reports:
        raise MetricError(f"reference system {reference!r} not among {list(reports)}")
    ref = reports[reference]
    lines = ["system\t" + "\t".join(METRIC_NAMES)]
    for system, report in reports.items():
        if system != reference:
            _check_paired(report, ref)
        cells = []
        for name in METRIC_NAMES:
            marker = ""
            if system != reference:
                marker = significance_marker(paired_t_test(report.values[name], ref.values[name]).p)
            cells.append(f"{report.mean(name):.4f}{marker}")
        lines.append(system + "\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"


def _check_paired(a: MetricReport, b: MetricReport) -> None:
    if a.qids != b.qids:
        raise MetricError("per-query tables cover different queries; cannot pair them")
