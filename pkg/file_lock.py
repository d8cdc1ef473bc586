"""
File Locking and Atomic Writes
Checkpoints, histories, metric tables and run records are written through here so
that concurrent runs sharing an output directory never observe half-written files.
"""

import logging
import os
import time
from pathlib import Path
from typing import Union

logger = logging.getLogger(__name__)

try:
    import msvcrt
    WINDOWS = True
except ImportError:
    WINDOWS = False
    try:
        import fcntl
    except ImportError:
        fcntl = None


def _lock_path(target: Path) -> Path:
    return target.parent / f"{target.name}.lock"


def _try_lock(handle) -> None:
    if WINDOWS:
        msvcrt.locking(handle.fileno(), msvcrt.LK_NBLCK, 1)
    elif fcntl is not None:
        fcntl.flock(handle.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
    else:
        logger.warning("File locking not available on this platform")


def _unlock(handle) -> None:
    try:
        if WINDOWS:
            msvcrt.locking(handle.fileno(), msvcrt.LK_UNLCK, 1)
        elif fcntl is not None:
            fcntl.flock(handle.fileno(), fcntl.LOCK_UN)
    except OSError:
        pass  # already released


def _still_linked(handle, path: Path) -> bool:
    if WINDOWS:
        return True
    try:
        return os.fstat(handle.fileno()).st_ino == os.stat(path).st_ino
    except FileNotFoundError:
        return False


class FileLock:
    """
    Exclusive lock on `<target>.lock`, held for the duration of a with-block.

    Raises TimeoutError when the lock cannot be taken within `timeout` seconds.
    """

    def __init__(self, target: Union[str, Path], timeout: float = 10.0, retry_interval: float = 0.05):
        self.target = Path(target)
        self.timeout = timeout
        self.retry_interval = retry_interval
        self._handle = None

    def __enter__(self) -> "FileLock":
        path = _lock_path(self.target)
        deadline = time.monotonic() + self.timeout
        while True:
            handle = open(path, "w")
            try:
                _try_lock(handle)
                if not _still_linked(handle, path):
                    # locked a file the previous holder already unlinked
                    _unlock(handle)
                    raise BlockingIOError(f"{path} was replaced")
            except OSError as e:
                handle.close()
                if time.monotonic() >= deadline:
                    logger.error(f"Failed to acquire lock on {path} after {self.timeout}s")
                    raise TimeoutError(f"Could not acquire lock on {path}") from e
                time.sleep(self.retry_interval)
                continue
            self._handle = handle
            logger.debug(f"Acquired lock on {path}")
            return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> bool:
        if self._handle is None:
            return False
        _unlock(self._handle)
        self._handle.close()
        self._handle = None
        try:
            _lock_path(self.target).unlink()
        except OSError:
            pass  # another writer may hold a fresh lock file
        return False


def atomic_write_bytes(path: Union[str, Path], payload: bytes) -> Path:
    """Write payload to a temporary sibling and rename it over path, under a lock."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(f".{path.name}.tmp")
    with FileLock(path):
        with open(tmp_path, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
    logger.debug(f"Wrote {len(payload)} bytes to {path}")
    return path


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))
