"""
Run History Module
Handles saving, loading and listing training run records.
Each run directory holds a run.json next to its checkpoint; writes go through a file lock.
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from file_lock import FileLock, atomic_write_text
from trainer import TrainHistory

logger = logging.getLogger(__name__)

RUN_FILE = "run.json"


class RunHistory:
    """Manages run records under one base directory (one sub-directory per run)."""

    def __init__(self, base_dir: Union[str, Path] = "runs"):
        """
        Args:
            base_dir: directory whose sub-directories are training runs
        """
        self.base_dir = Path(base_dir)

    def save_run(
        self,
        run_dir: Union[str, Path],
        config: Dict[str, Any],
        history: TrainHistory,
        started_at: str,
        artifacts: Optional[Dict[str, str]] = None,
    ) -> Path:
        """
        Write run.json for a finished training run.

        Args:
            run_dir: output directory of the run
            config: merged run configuration snapshot
            history: training history returned by trainer.train
            started_at: ISO timestamp taken before training
            artifacts: file names written by the run (checkpoint, history, ...)

        Returns:
            Path of the written run.json
        """
        run_dir = Path(run_dir)
        record = {
            "run_id": run_dir.name,
            "started_at": started_at,
            "finished_at": datetime.now().isoformat(),
            "config": config,
            "epochs_run": len(history.epochs),
            "best_epoch": history.best_epoch,
            "best_valid_ndcg10": history.best_valid_ndcg10,
            "artifacts": artifacts or {},
        }
        try:
            path = atomic_write_text(run_dir / RUN_FILE, json.dumps(record, indent=2, sort_keys=True))
        except (OSError, TimeoutError) as e:
            logger.error(f"Error saving run record in {run_dir}: {e}")
            raise
        logger.info(f"Saved run {record['run_id']} (best epoch {history.best_epoch}) to {path}")
        return path

    def load_run(self, run_dir: Union[str, Path]) -> Optional[Dict[str, Any]]:
        """
        Load a run record.

        Returns:
            The record, or None when run.json is missing or unreadable
        """
        path = Path(run_dir) / RUN_FILE
        if not path.exists():
            logger.warning(f"Run record {path} not found")
            return None
        try:
            with FileLock(path, timeout=5.0):
                with open(path, "r", encoding="utf-8") as f:
                    return json.load(f)
        except (OSError, TimeoutError, json.JSONDecodeError) as e:
            logger.error(f"Error loading run record {path}: {e}")
            return None

    def list_runs(self) -> List[Dict[str, Any]]:
        """
        All run records under base_dir (base_dir itself included), newest first.
        """
        runs = []
        if not self.base_dir.is_dir():
            logger.warning(f"Run directory {self.base_dir} does not exist")
            return runs
        candidates = [self.base_dir] + sorted(p for p in self.base_dir.iterdir() if p.is_dir())
        for run_dir in candidates:
            if not (run_dir / RUN_FILE).exists():
                continue
            record = self.load_run(run_dir)
            if record is not None:
                record["run_dir"] = str(run_dir)
                runs.append(record)
        runs.sort(key=lambda r: r.get("finished_at", ""), reverse=True)
        return runs

    def format_runs(self) -> str:
        """Tab-delimited summary of list_runs()."""
        lines = ["run_id\tfinished_at\tvariant\tencoders\tepochs\tbest_epoch\tbest_valid_ndcg10"]
        for r in self.list_runs():
            cfg = r.get("config", {})
            lines.append(
                f"{r.get('run_id', '')}\t{r.get('finished_at', '')}\t{cfg.get('variant', '')}\t"
                f"{cfg.get('encoders', '')}\t{r.get('epochs_run', 0)}\t{r.get('best_epoch', 0)}\t"
                f"{r.get('best_valid_ndcg10', float('nan')):.6f}"
            )
        return "\n".join(lines) + "\n"
