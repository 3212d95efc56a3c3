import glob
import logging
import os
import sys
from datetime import datetime
from typing import Iterable, Optional

LOG_ENV = "SUBOPT_LOG"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
_LEVELS = {"DEBUG": logging.DEBUG, "INFO": logging.INFO, "WARNING": logging.WARNING, "ERROR": logging.ERROR}


def level_from_env(default: int = logging.INFO) -> int:
    name = (os.getenv(LOG_ENV) or "").strip().upper()
    if name == "WARN":
        name = "WARNING"
    return _LEVELS.get(name, default)


def setup_logging(run_name: str = "run", logs_dir: str = "logs", level: Optional[int] = None) -> str:
    """Console + per-run file logging; returns the log file path."""
    if hasattr(sys.stderr, "reconfigure"):
        sys.stderr.reconfigure(encoding="utf-8")
    os.makedirs(logs_dir, exist_ok=True)
    stamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    path = os.path.join(logs_dir, f"{run_name}_{stamp}.log")
    logging.basicConfig(
        level=level if level is not None else level_from_env(),
        format=LOG_FORMAT,
        handlers=[
            logging.StreamHandler(sys.stderr),
            logging.FileHandler(path, encoding="utf-8"),
        ],
        force=True,
    )
    return path


def _iter_log_files(paths: Iterable[str]) -> list[tuple[str, int, float]]:
    files: list[tuple[str, int, float]] = []
    for p in paths:
        try:
            st = os.stat(p)
            files.append((p, int(st.st_size), float(st.st_mtime)))
        except OSError:
            continue
    return files


def enforce_logs_quota(limit_mb: float = 300.0, logs_dir: str = "logs", keep: Iterable[str] = ()) -> None:
    """Delete the oldest run logs until logs_dir fits in limit_mb.

    Files listed in keep (the active run log) are never removed.
    """
    try:
        limit_bytes = int(max(0, limit_mb) * 1024 * 1024)
        if limit_bytes <= 0 or not os.path.isdir(logs_dir):
            return
        protected = {os.path.abspath(p) for p in keep}
        items = _iter_log_files(glob.glob(os.path.join(logs_dir, "*.log")))
        total = sum(sz for _, sz, _ in items)
        if total <= limit_bytes:
            return
        items.sort(key=lambda t: t[2])
        for p, sz, _ in items:
            if total <= limit_bytes:
                break
            if os.path.abspath(p) in protected:
                continue
            try:
                os.remove(p)
                total -= sz
            except OSError:
                pass
    except Exception:
        # best-effort
        return
