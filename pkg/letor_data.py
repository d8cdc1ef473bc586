"""
LETOR Data
Parse, validate, normalize and summarize LETOR / SVM-light ranking datasets.

Line format: <grade> qid:<id> <fid>:<val> ... [# comment]
Feature ids are 1-based and sparse; absent features read as 0.0.
"""

import asyncio
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Union

import numpy as np

logger = logging.getLogger(__name__)

# Dense feature matrices are allocated up to the largest id seen
MAX_FEATURE_ID = 100_000


class LetorParseError(ValueError):
    """Raised for a malformed LETOR line; carries the 1-based line number."""

    def __init__(self, line_number: int, reason: str):
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number
        self.reason = reason


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class QueryGroup:
    """One query: an (n, d) feature matrix and n integer relevance grades."""

    qid: str
    features: np.ndarray
    relevance: np.ndarray

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64, ndmin=2)
        relevance = np.array(self.relevance, dtype=np.int64).reshape(-1)
        if features.shape[0] < 1:
            raise ValueError(f"query {self.qid}: a group needs at least one document")
        if features.shape[0] != relevance.shape[0]:
            raise ValueError(
                f"query {self.qid}: {features.shape[0]} feature rows but {relevance.shape[0]} grades"
            )
        if not np.all(np.isfinite(features)):
            raise ValueError(f"query {self.qid}: non-finite feature values")
        if np.any(relevance < 0):
            raise ValueError(f"query {self.qid}: negative relevance grade")
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "relevance", _frozen(relevance))

    @property
    def num_docs(self) -> int:
        return int(self.features.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True)
class Dataset:
    """Ordered query groups sharing one feature dimension."""

    groups: tuple
    feature_dim: int
    k_max: int

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        seen = set()
        for group in self.groups:
            if group.num_features != self.feature_dim:
                raise ValueError(
                    f"query {group.qid}: {group.num_features} features, dataset has {self.feature_dim}"
                )
            if group.qid in seen:
                raise ValueError(f"duplicate qid {group.qid}")
            seen.add(group.qid)
            top = int(group.relevance.max())
            if top > self.k_max:
                raise ValueError(f"query {group.qid}: grade {top} exceeds k_max {self.k_max}")

    def __len__(self) -> int:
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    def group(self, qid: str) -> QueryGroup:
        for g in self.groups:
            if g.qid == qid:
                return g
        raise KeyError(f"unknown qid {qid}")

    @property
    def num_documents(self) -> int:
        return sum(g.num_docs for g in self.groups)

    def with_feature_dim(self, feature_dim: int) -> "Dataset":
        """Pad every group with zero columns up to feature_dim."""
        if feature_dim < self.feature_dim:
            raise ValueError(
                f"cannot shrink feature_dim from {self.feature_dim} to {feature_dim}"
            )
        if feature_dim == self.feature_dim:
            return self
        groups = []
        for g in self.groups:
            padded = np.zeros((g.num_docs, feature_dim))
            padded[:, : self.feature_dim] = g.features
            groups.append(QueryGroup(g.qid, padded, g.relevance))
        return Dataset(tuple(groups), feature_dim, self.k_max)

    def with_k_max(self, k_max: int) -> "Dataset":
        return Dataset(self.groups, self.feature_dim, k_max)


@dataclass(frozen=True)
class DatasetStats:
    num_queries: int
    num_documents: int
    avg_docs_per_query: float
    grade_histogram: Dict[int, int] = field(default_factory=dict)
    all_zero_queries: int = 0


def _parse_line(line: str, line_number: int):
    body = line.split("#", 1)[0].strip()
    if not body:
        return None
    tokens = body.split()
    if len(tokens) < 2:
        raise LetorParseError(line_number, f"expected '<grade> qid:<id> ...', got {body!r}")

    grade_token = tokens[0]
    try:
        grade = int(grade_token)
    except ValueError:
        raise LetorParseError(line_number, f"non-integer grade {grade_token!r}") from None
    if grade < 0:
        raise LetorParseError(line_number, f"negative grade {grade}")

    if not tokens[1].startswith("qid:") or len(tokens[1]) == 4:
        raise LetorParseError(line_number, f"expected qid:<id>, got {tokens[1]!r}")
    qid = tokens[1][4:]

    values: Dict[int, float] = {}
    for token in tokens[2:]:
        fid_text, sep, value_text = token.partition(":")
        if not sep:
            raise LetorParseError(line_number, f"malformed feature {token!r}")
        try:
            fid = int(fid_text)
            value = float(value_text)
        except ValueError:
            raise LetorParseError(line_number, f"malformed feature {token!r}") from None
        if fid < 1:
            raise LetorParseError(line_number, f"feature id must be positive, got {fid}")
        if fid > MAX_FEATURE_ID:
            raise LetorParseError(line_number, f"feature id {fid} exceeds the supported maximum {MAX_FEATURE_ID}")
        if fid in values:
            raise LetorParseError(line_number, f"duplicate feature id {fid}")
        if not math.isfinite(value):
            raise LetorParseError(line_number, f"non-finite value for feature {fid}")
        values[fid] = value
    return grade, qid, values


def parse_letor(
    text_stream: Union[TextIO, Iterable[str]],
    k_max_floor: Optional[int] = None,
    feature_dim: Optional[int] = None,
) -> Dataset:
    """
    Parse LETOR text into a Dataset.

    Documents are grouped by qid in order of first appearance, keeping file order
    within each group. A qid that reappears after another qid is merged into its
    earlier group.

    Args:
        text_stream: file object or any iterable of lines
        k_max_floor: k_max is at least this value (4 pins the usual 0..4 scale)
        feature_dim: fixed feature count; defaults to the largest feature id seen

    Returns:
        Dataset
    """
    rows: Dict[str, List[Dict[int, float]]] = {}
    grades: Dict[str, List[int]] = {}
    last_qid = None
    max_fid = 0
    max_grade = 0

    for line_number, line in enumerate(text_stream, 1):
        parsed = _parse_line(line.rstrip("\r\n"), line_number)
        if parsed is None:
            continue
        grade, qid, values = parsed
        if qid in rows and qid != last_qid:
            logger.warning(f"line {line_number}: qid {qid} is not contiguous; merging into its earlier group")
        if values:
            top = max(values)
            if feature_dim is not None and top > feature_dim:
                raise LetorParseError(line_number, f"feature id {top} exceeds feature_dim {feature_dim}")
            max_fid = max(max_fid, top)
        max_grade = max(max_grade, grade)
        rows.setdefault(qid, []).append(values)
        grades.setdefault(qid, []).append(grade)
        last_qid = qid

    dim = feature_dim if feature_dim is not None else max_fid
    groups = []
    for qid, docs in rows.items():
        features = np.zeros((len(docs), dim))
        for i, values in enumerate(docs):
            for fid, value in values.items():
                features[i, fid - 1] = value
        groups.append(QueryGroup(qid, features, np.asarray(grades[qid])))

    k_max = max_grade if k_max_floor is None else max(max_grade, k_max_floor)
    dataset = Dataset(tuple(groups), dim, k_max)
    logger.debug(f"Parsed {len(dataset)} queries, {dataset.num_documents} documents, d={dim}")
    return dataset


def read_letor(path: Union[str, Path], k_max_floor: Optional[int] = None,
               feature_dim: Optional[int] = None) -> Dataset:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        dataset = parse_letor(f, k_max_floor=k_max_floor, feature_dim=feature_dim)
    logger.info(f"Loaded {path}: {len(dataset)} queries, {dataset.num_documents} documents")
    return dataset


async def read_letor_async(path: Union[str, Path], k_max_floor: Optional[int] = None) -> Dataset:
    """Async wrapper for read_letor."""
    return await asyncio.to_thread(read_letor, path, k_max_floor)


def read_letor_files(paths: Sequence[Union[str, Path]], k_max_floor: Optional[int] = None) -> List[Dataset]:
    """Parse several files concurrently; results follow the order of paths."""

    async def _gather():
        return await asyncio.gather(*(read_letor_async(p, k_max_floor) for p in paths))

    return list(asyncio.run(_gather()))


def align_feature_dims(datasets: Sequence[Dataset]) -> List[Dataset]:
    """Pad every dataset to the widest feature dimension among them."""
    if not datasets:
        return []
    dim = max(ds.feature_dim for ds in datasets)
    return [ds.with_feature_dim(dim) for ds in datasets]


def serialize_letor(dataset: Dataset, stream: TextIO) -> None:
    """
    Write a Dataset as LETOR text.

    Zero features are omitted except the last one, so the feature dimension
    survives a re-parse. Values use repr and round-trip exactly.
    """
    d = dataset.feature_dim
    for group in dataset.groups:
        for row, grade in zip(group.features, group.relevance):
            parts = [str(int(grade)), f"qid:{group.qid}"]
            for j, value in enumerate(row, 1):
                if value != 0.0 or j == d:
                    parts.append(f"{j}:{float(value)!r}")
            stream.write(" ".join(parts) + "\n")


def normalize_query_minmax(dataset: Dataset) -> Dataset:
    """Rescale every feature column of every query into [0, 1]; constant columns become 0."""
    groups = []
    for g in dataset.groups:
        lo = g.features.min(axis=0)
        hi = g.features.max(axis=0)
        span = hi - lo
        degenerate = span == 0
        normalized = (g.features - lo) / np.where(degenerate, 1.0, span)
        normalized[:, degenerate] = 0.0
        groups.append(QueryGroup(g.qid, normalized, g.relevance))
    return Dataset(tuple(groups), dataset.feature_dim, dataset.k_max)


def dataset_stats(dataset: Dataset) -> DatasetStats:
    num_queries = len(dataset)
    num_documents = dataset.num_documents
    histogram: Counter = Counter()
    all_zero = 0
    for g in dataset.groups:
        histogram.update(int(x) for x in g.relevance)
        if not np.any(g.relevance):
            all_zero += 1
    if all_zero:
        logger.warning(f"{all_zero} of {num_queries} queries have only zero grades")
    return DatasetStats(
        num_queries=num_queries,
        num_documents=num_documents,
        avg_docs_per_query=num_documents / num_queries if num_queries else 0.0,
        grade_histogram=dict(sorted(histogram.items())),
        all_zero_queries=all_zero,
    )


def format_stats_table(named_stats: Dict[str, DatasetStats]) -> str:
    """Tab-delimited characteristics table, one row per named file."""
    lines = ["split\tqueries\tdocuments\tavg_docs_per_query\tall_zero_queries\tgrades"]
    for name, s in named_stats.items():
        grades = ",".join(f"{g}:{c}" for g, c in s.grade_histogram.items())
        lines.append(
            f"{name}\t{s.num_queries}\t{s.num_documents}\t{s.avg_docs_per_query:.2f}\t"
            f"{s.all_zero_queries}\t{grades}"
        )
    return "\n".join(lines) + "\n"
