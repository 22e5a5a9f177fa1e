"""
Progress bar utilities with logging support
"""
import logging
from pathlib import Path
from typing import Optional

from tqdm import tqdm


def setup_progress_logger(log_dir: str) -> logging.Logger:
    """File logger that receives every progress-bar update"""
    log_path = Path(log_dir)
    log_path.mkdir(parents=True, exist_ok=True)
    progress_logger = logging.getLogger("progress")
    for handler in list(progress_logger.handlers):
        progress_logger.removeHandler(handler)
        handler.close()
    handler = logging.FileHandler(log_path / "progress.log", encoding="utf-8")
    handler.setLevel(logging.INFO)
    handler.setFormatter(logging.Formatter(fmt="%(asctime)s | %(message)s", datefmt="%Y-%m-%d %H:%M:%S"))
    progress_logger.setLevel(logging.INFO)
    progress_logger.addHandler(handler)
    progress_logger.propagate = False
    return progress_logger


class LoggingTqdm(tqdm):
    """tqdm that mirrors its state to a progress logger"""

    def __init__(self, *args, progress_logger: Optional[logging.Logger] = None, **kwargs):
        self.progress_logger = progress_logger
        super().__init__(*args, **kwargs)
        if self.progress_logger:
            self.progress_logger.info(f"Started: {getattr(self, 'desc', '')}")

    def update(self, n=1):
        result = super().update(n)
        if self.progress_logger and self.n > 0:
            total = f"/{self.total}" if self.total else ""
            postfix = f" {self.postfix}" if getattr(self, "postfix", None) else ""
            self.progress_logger.info(f"{self.desc}: {self.n}{total} {self.unit}{postfix}")
        return result

    def set_description(self, desc=None, refresh=True):
        result = super().set_description(desc, refresh=refresh)
        if self.progress_logger and desc:
            self.progress_logger.info(f"Status: {desc}")
        return result

    def close(self):
        if self.progress_logger and not self.disable:
            self.progress_logger.info(f"Completed: {self.desc}")
        return super().close()
