"""
Trainer
Mini-batch training over query groups with validation NDCG@10 model selection.

Each step averages the total loss over a batch of groups. Per-group gradients come
from independent tapes (optionally computed concurrently) and are reduced in
ascending qid order, so a (seed, config, data) triple fixes every bit of the result.
"""

import asyncio
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from diff_engine import backward, collect_grads
from file_lock import atomic_write_text
from letor_data import Dataset, QueryGroup
from metrics import SELECTION_METRIC, evaluate
from model import RsaModel
from objective import total_loss

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


class TrainingError(RuntimeError):
    """Raised when training cannot proceed (non-finite loss, incompatible data)."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    selection_metric: str = SELECTION_METRIC
    workers: int = 1

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.selection_metric != SELECTION_METRIC:
            raise ValueError(f"model selection is fixed to {SELECTION_METRIC}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    valid_ndcg10: float
    timestamp: str


@dataclass
class TrainHistory:
    """Per-epoch training loss and validation NDCG@10; best_epoch is 1-based."""

    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_valid_ndcg10(self) -> float:
        return self.epochs[self.best_epoch - 1].valid_ndcg10 if self.best_epoch else float("nan")

    @property
    def train_losses(self) -> List[float]:
        return [r.train_loss for r in self.epochs]

    @property
    def valid_scores(self) -> List[float]:
        return [r.valid_ndcg10 for r in self.epochs]

    def to_tsv(self) -> str:
        """epoch, train_loss, valid_ndcg10 with round-trip float precision."""
        lines = ["epoch\ttrain_loss\tvalid_ndcg10"]
        for r in self.epochs:
            lines.append(f"{r.epoch}\t{r.train_loss!r}\t{r.valid_ndcg10!r}")
        return "\n".join(lines) + "\n"


@dataclass
class OptimizerState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             state: OptimizerState, config: TrainConfig) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    updated = {name: value - config.learning_rate * grads[name] for name, value in params.items()}
    return updated, OptimizerState(step=state.step + 1)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: OptimizerState, config: TrainConfig) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """Adam with bias-corrected first and second moments."""
    step = state.step + 1
    b1, b2 = config.beta1, config.beta2
    updated, m_new, v_new = {}, {}, {}
    for name, value in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(value)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(value)) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        updated[name] = value - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        m_new[name], v_new[name] = m, v
    return updated, OptimizerState(step=step, m=m_new, v=v_new)


def optimizer_step(params, grads, state, config):
    step_fn = adam_step if config.optimizer == "adam" else sgd_step
    return step_fn(params, grads, state, config)


def group_gradients(model: RsaModel, group: QueryGroup, k: int) -> Tuple[float, Dict[str, np.ndarray]]:
    """Total loss of one group and its gradient for every parameter, on a fresh tape."""
    bound, leaves = model.bind()
    loss = total_loss(bound, group, k)
    backward(loss)
    return loss.item(), collect_grads(leaves.items())


async def _gather_gradients(model: RsaModel, groups: Sequence[QueryGroup], k: int, workers: int):
    semaphore = asyncio.Semaphore(workers)

    async def one(group: QueryGroup):
        async with semaphore:
            return await asyncio.to_thread(group_gradients, model, group, k)

    return await asyncio.gather(*(one(g) for g in groups))


def batch_gradients(model: RsaModel, groups: Sequence[QueryGroup], k: int,
                    workers: int = 1) -> Tuple[List[float], Dict[str, np.ndarray]]:
    """
    Per-group losses and the batch-mean gradient.

    Returns:
        (losses in ascending qid order, mean gradient by parameter name)
    """
    if workers > 1 and len(groups) > 1:
        results = asyncio.run(_gather_gradients(model, groups, k, workers))
    else:
        results = [group_gradients(model, g, k) for g in groups]

    ordered = sorted(zip(groups, results), key=lambda item: item[0].qid)
    losses: List[float] = []
    summed: Dict[str, np.ndarray] = {}
    for group, (loss, grads) in ordered:
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"non-finite loss or gradient on query {group.qid} (loss={loss})")
        losses.append(loss)
        for name, g in grads.items():
            summed[name] = g.copy() if name not in summed else summed[name] + g
    count = float(len(ordered))
    return losses, {name: g / count for name, g in summed.items()}


def _check_dims(model: RsaModel, *datasets: Dataset) -> None:
    for ds in datasets:
        if len(ds) and ds.feature_dim != model.config.d:
            raise TrainingError(
                f"dataset has {ds.feature_dim} features but the model expects {model.config.d}"
            )


def train(
    model: RsaModel,
    train_ds: Dataset,
    valid_ds: Dataset,
    config: TrainConfig,
    k: Optional[int] = None,
    show_progress: bool = False,
) -> Tuple[RsaModel, TrainHistory]:
    """
    Train with early stopping on validation NDCG@10.

    Args:
        model: initial parameters
        train_ds: training queries
        valid_ds: validation queries used for model selection
        config: optimizer and schedule
        k: maximum grade for the ideal attention matrices; defaults to train_ds.k_max
        show_progress: draw a tqdm bar per epoch

    Returns:
        (model from the best epoch, TrainHistory)
    """
    config.validate()
    _check_dims(model, train_ds, valid_ds)
    if not len(train_ds):
        raise TrainingError("training set is empty")
    k = train_ds.k_max if k is None else k

    rng = np.random.default_rng(config.seed)
    params = {name: np.asarray(value, dtype=np.float64) for name, value in model.parameters().items()}
    state = OptimizerState()
    history = TrainHistory()
    best_model = model
    best_score = -math.inf
    bad_epochs = 0

    logger.info(
        f"Training {model.config.variant} ({model.num_parameters()} parameters) on {len(train_ds)} queries | "
        f"optimizer {config.optimizer} lr {config.learning_rate} batch {config.batch_size} "
        f"epochs {config.max_epochs} patience {config.patience}"
    )

    for epoch in range(1, config.max_epochs + 1):
        start = time.time()
        order = rng.permutation(len(train_ds))
        batches = [order[i:i + config.batch_size] for i in range(0, len(order), config.batch_size)]
        epoch_losses: List[float] = []

        for batch in tqdm(batches, desc=f"epoch {epoch}", disable=not show_progress, leave=False):
            current = model.with_parameters(params)
            losses, grads = batch_gradients(current, [train_ds.groups[i] for i in batch], k, config.workers)
            params, state = optimizer_step(params, grads, state, config)
            epoch_losses.extend(losses)
            logger.debug(f"epoch {epoch} step {state.step}: batch loss {np.mean(losses):.6f}")

        model = model.with_parameters(params)
        train_loss = float(np.mean(epoch_losses))
        valid_score = evaluate(model, valid_ds).mean(SELECTION_METRIC) if len(valid_ds) else 0.0
        history.epochs.append(EpochRecord(epoch, train_loss, valid_score, datetime.now().isoformat()))

        improved = valid_score > best_score
        if improved:
            best_score = valid_score
            best_model = model
            history.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1

        logger.info(
            f"Epoch [{epoch:3d}/{config.max_epochs}] train loss {train_loss:.6f} | "
            f"valid {SELECTION_METRIC} {valid_score:.4f} | {time.time() - start:.1f}s"
            f"{' * BEST' if improved else ''}"
        )
        if bad_epochs >= config.patience:
            logger.info(f"Early stopping after epoch {epoch}: no improvement for {bad_epochs} epoch(s)")
            break

    logger.info(f"Best epoch {history.best_epoch}: valid {SELECTION_METRIC} {best_score:.6f}")
    return best_model, history


def write_history(history: TrainHistory, path: Union[str, Path]) -> Path:
    path = atomic_write_text(path, history.to_tsv())
    logger.info(f"Saved training history ({len(history.epochs)} epochs) to {path}")
    return path


def config_snapshot(config: TrainConfig) -> Dict[str, object]:
    return asdict(config)
