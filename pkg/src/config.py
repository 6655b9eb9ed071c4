"""
Central configuration loaded from environment variables / .env file, plus the
optional YAML experiment file accepted by every CLI command.

Precedence for experiment settings: CLI flags > YAML file > built-in defaults.
"""
import logging
import os
from typing import Any

import yaml
from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)


class Config:
    # ── Execution ──────────────────────────────────────────────────────────────
    # Worker threads used by batch commands (dataset generation, campaigns).
    THREADS: int = int(os.getenv("AXMUL_THREADS", "1"))
    LOG_LEVEL: str = os.getenv("AXMUL_LOG_LEVEL", "INFO")

    # ── Slack ──────────────────────────────────────────────────────────────────
    # Optional. If not set, campaign summaries are not posted
    SLACK_BOT_TOKEN: str | None = os.getenv("SLACK_BOT_TOKEN")
    SLACK_REPORT_CHANNEL: str = os.getenv("SLACK_REPORT_CHANNEL", "#axmul-runs")


cfg = Config()


def load_experiment_file(path: str | None) -> dict[str, Any]:
    """
    Read a flat YAML mapping of flag values.
    Keys may use dashes or underscores (`epsilon-pct` == `epsilon_pct`).
    """
    if not path:
        return {}
    with open(path, "r") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    normalised = {str(k).replace("-", "_"): v for k, v in data.items()}
    logger.info("Loaded %d setting(s) from %s", len(normalised), path)
    return normalised


def merge_settings(
    defaults: dict[str, Any],
    file_values: dict[str, Any],
    flags: dict[str, Any],
) -> dict[str, Any]:
    """
    Resolve settings with precedence flags > file > defaults.
    A flag left at None counts as "not given".
    """
    merged = dict(defaults)
    for key, value in file_values.items():
        if key in defaults:
            merged[key] = value
        else:
            logger.warning("Ignoring unknown setting %r in config file", key)
    for key, value in flags.items():
        if value is not None and key in defaults:
            merged[key] = value
    return merged
