"""
Training Objective
ListNet top-one cross entropy, ideal attention matrices and the attention regularizers.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Sequence, Union

import numpy as np

from diff_engine import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    bce,
    cross_entropy,
    scale,
    softmax_rowless,
)
from letor_data import QueryGroup
from model import ENCODER_KINDS, RsaModel, forward

logger = logging.getLogger(__name__)


class GradeError(ValueError):
    """Raised for a grade outside [0, k] or an unknown encoder kind."""


@dataclass(frozen=True)
class IdealAttentionMatrix:
    kind: str
    matrix: np.ndarray
    k: int


def attention_normalizer(k: int) -> float:
    """Z = sum_{m=0}^{k} e^m, the shared denominator of the exponential kinds."""
    return float(np.exp(np.arange(k + 1, dtype=np.float64)).sum())


def top_one_prob(values: Union[Tensor, np.ndarray, Sequence[float]]) -> Tensor:
    """Top-one probabilities p_j = e^{v_j} / sum_k e^{v_k}."""
    if not isinstance(values, Tensor):
        values = np.asarray(values, dtype=np.float64)
    return softmax_rowless(values)


def listnet_loss(scores: Union[Tensor, np.ndarray], rels: Sequence[int]) -> Tensor:
    """Cross entropy between the top-one distributions of the grades and the scores."""
    p_true = top_one_prob(np.asarray(rels, dtype=np.float64))
    p_pred = top_one_prob(scores)
    return cross_entropy(p_true, p_pred)


def ideal_attention(rels: Sequence[int], kind: str, k: int) -> IdealAttentionMatrix:
    """
    Target attention matrix for one encoder kind.

    Row i holds the weights document i should place on every document j:
      +  1 where r_j > r_i
      >  e^{r_j - r_i} / Z where r_j > r_i
      -  1 where r_j < r_i
      <  e^{r_i - r_j} / Z where r_j < r_i
    and 0 elsewhere, with Z = sum_{m=0}^{k} e^m.
    """
    if kind not in ENCODER_KINDS:
        raise GradeError(f"unknown encoder kind {kind!r}")
    r = np.asarray(rels, dtype=np.int64).reshape(-1)
    if r.size and (r.min() < 0 or r.max() > k):
        raise GradeError(f"grades must lie in [0, {k}], got range [{r.min()}, {r.max()}]")

    # diff[i, j] = r_j - r_i
    diff = r[None, :] - r[:, None]
    if kind == "+":
        matrix = (diff > 0).astype(np.float64)
    elif kind == "-":
        matrix = (diff < 0).astype(np.float64)
    else:
        z = attention_normalizer(k)
        magnitude = np.exp(np.abs(diff).astype(np.float64)) / z
        mask = diff > 0 if kind == ">" else diff < 0
        matrix = np.where(mask, magnitude, 0.0)
    return IdealAttentionMatrix(kind=kind, matrix=matrix, k=k)


def attention_regularizer(sigma: Union[Tensor, np.ndarray],
                          ideal: Union[IdealAttentionMatrix, np.ndarray]) -> Tensor:
    """Average binary cross entropy between an attention matrix and its ideal matrix."""
    target = ideal.matrix if isinstance(ideal, IdealAttentionMatrix) else np.asarray(ideal)
    sigma = as_tensor(sigma)
    if sigma.shape != target.shape:
        raise ShapeError(f"attention_regularizer: incompatible shapes {sigma.shape} and {target.shape}")
    return bce(sigma, target)


def regularizer_terms(sigma_map: Dict[str, Tensor], rels: Sequence[int], k: int) -> Dict[str, Tensor]:
    """One regularizer per encoder kind, each paired with that encoder's attention."""
    return {kind: attention_regularizer(sigma, ideal_attention(rels, kind, k))
            for kind, sigma in sigma_map.items()}


def total_loss(model: RsaModel, group: QueryGroup, k: int) -> Tensor:
    """
    ListNet loss plus, for the regularized variant, the weighted sum of the
    attention regularizers of every active encoder.
    """
    scores, sigma_map = forward(model, group)
    loss = listnet_loss(scores, group.relevance)
    if not model.config.regularized:
        return loss
    terms = regularizer_terms(sigma_map, group.relevance, k)
    reg = None
    for kind in model.config.encoders:
        reg = terms[kind] if reg is None else add(reg, terms[kind])
    if reg is None:
        return loss
    return add(loss, scale(reg, model.config.attention_weight))
