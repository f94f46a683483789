"""
Logging Configuration
Console logging for the process plus the per-run log.jsonl training ledger
"""
import json
import logging
import sys
from pathlib import Path

from pythonjsonlogger import jsonlogger

from vesseladapt.config import get_settings

RUN_LOG_NAME = "log.jsonl"
_RUN_LOGGER_PREFIX = "vesseladapt.runlog"


def setup_logging():
    """Configure application logging"""
    settings = get_settings()

    # Create logger
    logger = logging.getLogger()
    logger.setLevel(getattr(logging, settings.log_level.upper()))

    if any(getattr(h, "_vesseladapt", False) for h in logger.handlers):
        return logger

    # Create console handler
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(getattr(logging, settings.log_level.upper()))
    console_handler._vesseladapt = True

    # Create formatter
    if settings.environment == "production":
        # Use JSON formatter for production
        formatter = jsonlogger.JsonFormatter(
            '%(asctime)s %(name)s %(levelname)s %(message)s'
        )
    else:
        # Use standard formatter for development
        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )

    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    return logger


def open_run_log(rundir: Path) -> logging.Logger:
    """
    Logger appending one JSON object per record to <rundir>/log.jsonl.

    Loss values travel as `extra` fields, so each line is a flat LossReport.
    """
    rundir = Path(rundir)
    rundir.mkdir(parents=True, exist_ok=True)
    logger = logging.getLogger(f"{_RUN_LOGGER_PREFIX}.{rundir.resolve()}")
    logger.setLevel(logging.INFO)
    logger.propagate = False
    for handler in list(logger.handlers):
        handler.close()
        logger.removeHandler(handler)

    handler = logging.FileHandler(rundir / RUN_LOG_NAME, mode="a", encoding="utf-8")
    handler.setFormatter(jsonlogger.JsonFormatter('%(message)s'))
    logger.addHandler(handler)
    return logger


def close_run_log(logger: logging.Logger) -> None:
    for handler in list(logger.handlers):
        handler.close()
        logger.removeHandler(handler)


def read_run_log(rundir: Path) -> list:
    path = Path(rundir) / RUN_LOG_NAME
    if not path.exists():
        return []
    with path.open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def truncate_run_log(rundir: Path, phase_order: list, phase: str, iteration: int) -> None:
    """Drop records written after (phase, iteration), the point a resumed run restarts from."""
    path = Path(rundir) / RUN_LOG_NAME
    if not path.exists():
        return
    cutoff = (phase_order.index(phase), iteration)
    kept = []
    for record in read_run_log(rundir):
        if record.get("phase") not in phase_order or "iteration" not in record:
            kept.append(record)
            continue
        position = (phase_order.index(record["phase"]), record["iteration"])
        if position <= cutoff:
            kept.append(record)
    with path.open("w", encoding="utf-8") as fh:
        for record in kept:
            fh.write(json.dumps(record) + "\n")
