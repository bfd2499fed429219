import logging

from config import LOG_LEVEL

logger = logging.getLogger("vertexdet")
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)


def get_logger(name: str) -> logging.Logger:
    """Child logger under the package logger, e.g. vertexdet.trainer."""
    return logger.getChild(name)


def log_stage_event(stage, event, duration_ms, extra=None):
    logger.info(f"Stage: {stage}, Event: {event}, Duration: {duration_ms:.1f}ms, Extra: {extra}")
