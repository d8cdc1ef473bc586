"""
Attention Export
Write learned attention matrices and their ideal targets as CSV grids and P2 graymaps.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

from file_lock import atomic_write_text
from letor_data import QueryGroup
from model import KIND_NAMES, ModelConfigError, RsaModel, forward
from objective import attention_regularizer, ideal_attention

logger = logging.getLogger(__name__)

PGM_MAX = 255


@dataclass(frozen=True)
class AttentionExport:
    kind: str
    sigma: np.ndarray
    ideal: np.ndarray
    mean_bce: float
    files: Dict[str, Path]


def format_grid(matrix: np.ndarray) -> str:
    """Comma-delimited rows with round-trip float precision."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    return "\n".join(",".join(repr(float(x)) for x in row) for row in matrix) + "\n"


def parse_grid(text: str) -> np.ndarray:
    rows = [line for line in text.splitlines() if line.strip()]
    grid = [[float(cell) for cell in row.split(",")] for row in rows]
    widths = {len(row) for row in grid}
    if len(widths) > 1:
        raise ValueError(f"ragged grid: row widths {sorted(widths)}")
    return np.asarray(grid, dtype=np.float64)


def read_grid(path: Union[str, Path]) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        return parse_grid(f.read())


def format_pgm(matrix: np.ndarray) -> str:
    """
    Plain (P2) portable graymap, one pixel per entry, value round(255 * x).

    Entries are clipped to [0, 1] first.
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    pixels = np.rint(np.clip(matrix, 0.0, 1.0) * PGM_MAX).astype(np.int64)
    height, width = pixels.shape
    lines = ["P2", f"{width} {height}", str(PGM_MAX)]
    lines.extend(" ".join(str(v) for v in row) for row in pixels)
    return "\n".join(lines) + "\n"


def mean_bce(sigma: np.ndarray, ideal: np.ndarray) -> float:
    return attention_regularizer(np.asarray(sigma, dtype=np.float64), np.asarray(ideal)).item()


def attention_maps(model: RsaModel, group: QueryGroup, k: int) -> Dict[str, Dict[str, np.ndarray]]:
    """Learned and ideal matrices per active encoder kind, in canonical order."""
    if not model.config.uses_encoders:
        raise ModelConfigError("the listnet variant has no attention matrices")
    _, sigma_map = forward(model, group)
    return {
        kind: {"sigma": sigma.numpy(), "ideal": ideal_attention(group.relevance, kind, k).matrix}
        for kind, sigma in sigma_map.items()
    }


def export_attention(model: RsaModel, group: QueryGroup, k: int,
                     out_dir: Union[str, Path]) -> List[AttentionExport]:
    """
    Write <kind>_sigma.csv, <kind>_ideal.csv and matching .pgm files plus bce.tsv.

    Args:
        model: any self-attention variant
        group: the query to visualize
        k: maximum grade for the ideal matrices
        out_dir: target directory (created if missing)

    Returns:
        one AttentionExport per active encoder kind
    """
    out_dir = Path(out_dir)
    exports = []
    for kind, maps in attention_maps(model, group, k).items():
        name = KIND_NAMES[kind]
        files = {}
        for label, matrix in maps.items():
            files[f"{label}_csv"] = atomic_write_text(out_dir / f"{name}_{label}.csv", format_grid(matrix))
            files[f"{label}_pgm"] = atomic_write_text(out_dir / f"{name}_{label}.pgm", format_pgm(matrix))
        bce_value = mean_bce(maps["sigma"], maps["ideal"])
        exports.append(AttentionExport(kind, maps["sigma"], maps["ideal"], bce_value, files))
        logger.info(f"Encoder {kind} on query {group.qid}: mean BCE to ideal {bce_value:.6f}")

    summary = ["kind\tmean_bce"] + [f"{e.kind}\t{e.mean_bce!r}" for e in exports]
    atomic_write_text(out_dir / "bce.tsv", "\n".join(summary) + "\n")
    logger.info(f"Exported attention for query {group.qid} ({len(exports)} encoders) to {out_dir}")
    return exports
