"""
Synthetic LETOR Data
Seeded generator of small ranking datasets with a context-dependent signal.

Per query a hidden sign s in {-1, +1} flips the direction of the strongest feature.
The sign is only recoverable from the query's documents taken together (the mean of
the context feature), so a per-document linear scorer cannot exploit it while a model
that looks across the group can.
"""

import logging
from typing import Optional, Tuple

import numpy as np

from letor_data import Dataset, QueryGroup

logger = logging.getLogger(__name__)

GRADE_PROBS = (0.35, 0.30, 0.20, 0.10, 0.05)
SYNTHETIC_K_MAX = 4

LATENT_NOISE = 0.5
GLOBAL_NOISE = 1.0
SIGNED_NOISE = 0.3
CONTEXT_SHIFT = 0.8
CONTEXT_NOISE = 1.0
MIXED_NOISE = 0.1


def _mixing_map(num_extra: int, map_seed: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(map_seed)
    return rng.normal(0.0, 1.0, size=(2, num_extra)), rng.normal(0.0, 0.5, size=num_extra)


def generate_synthetic(
    seed: int,
    num_queries: int,
    docs_per_query: int,
    num_features: int,
    map_seed: int = 0,
    qid_offset: int = 0,
) -> Dataset:
    """
    Draw a synthetic dataset.

    Features, in column order:
      0  grade latent plus heavy noise (weak, context-free signal)
      1  s * latent plus light noise (strong signal whose sign depends on the query)
      2  s * 0.8 plus noise (the context indicator, useful only averaged over a query)
      3+ tanh of a fixed random map of (latent, distractor) plus noise

    Args:
        seed: fixes grades, noise and query signs
        num_queries: number of query groups
        docs_per_query: documents per group
        num_features: feature count (columns beyond the first num_features are dropped)
        map_seed: fixes the nonlinear map, shared between splits of one dataset
        qid_offset: qids run from qid_offset + 1

    Returns:
        Dataset with k_max = 4
    """
    if num_queries < 1 or docs_per_query < 1 or num_features < 1:
        raise ValueError(
            f"sizes must be positive: queries={num_queries}, docs={docs_per_query}, features={num_features}"
        )
    rng = np.random.default_rng(seed)
    num_extra = max(num_features - 3, 0)
    mix_w, mix_b = _mixing_map(num_extra, map_seed)
    n = docs_per_query

    groups = []
    for q in range(num_queries):
        sign = rng.choice((-1.0, 1.0))
        grades = rng.choice(len(GRADE_PROBS), size=n, p=GRADE_PROBS)
        latent = grades + rng.normal(0.0, LATENT_NOISE, size=n)
        columns = [
            latent + rng.normal(0.0, GLOBAL_NOISE, size=n),
            sign * latent + rng.normal(0.0, SIGNED_NOISE, size=n),
            sign * CONTEXT_SHIFT + rng.normal(0.0, CONTEXT_NOISE, size=n),
        ]
        if num_extra:
            inputs = np.column_stack([latent, rng.normal(0.0, 1.0, size=n)])
            mixed = np.tanh(inputs @ mix_w + mix_b) + rng.normal(0.0, MIXED_NOISE, size=(n, num_extra))
            columns.extend(mixed.T)
        features = np.column_stack(columns)[:, :num_features]
        groups.append(QueryGroup(str(qid_offset + q + 1), features, grades))

    dataset = Dataset(tuple(groups), num_features, SYNTHETIC_K_MAX)
    logger.debug(f"Generated {num_queries} synthetic queries x {n} documents (seed {seed})")
    return dataset


def synthetic_splits(
    seed: int,
    num_train: int,
    num_valid: int,
    num_test: int,
    docs_per_query: int = 20,
    num_features: int = 10,
    map_seed: Optional[int] = None,
) -> Tuple[Dataset, Dataset, Dataset]:
    """Train/valid/test splits drawn from one seed, sharing the feature map, with disjoint qids."""
    map_seed = seed if map_seed is None else map_seed
    children = np.random.SeedSequence(seed).spawn(3)
    sizes = (num_train, num_valid, num_test)
    splits = []
    offset = 0
    for child, size in zip(children, sizes):
        split_seed = int(child.generate_state(1)[0])
        splits.append(generate_synthetic(split_seed, size, docs_per_query, num_features,
                                         map_seed=map_seed, qid_offset=offset))
        offset += size
    return splits[0], splits[1], splits[2]
