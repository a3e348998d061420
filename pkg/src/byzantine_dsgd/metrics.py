"""Prometheus metrics for simulation runs.

Collectors live in the default registry so ``start_metrics_server`` exposes
them. Pushing to a Pushgateway only happens when one is configured, either
with ``configure_pushgateway`` or the ``BDSGD_PUSHGATEWAY`` variable.
"""

import logging
import os
from typing import Dict, Optional

from prometheus_client import REGISTRY, Counter, Gauge, Histogram, push_to_gateway, start_http_server

logger = logging.getLogger(__name__)

PUSHGATEWAY_URL: Optional[str] = os.environ.get("BDSGD_PUSHGATEWAY") or None

ROUND_COUNT = Counter(
    "bdsgd_rounds_total",
    "Total count of simulated rounds",
)
MESSAGE_COUNT = Counter(
    "bdsgd_messages_total",
    "Total count of delivered messages",
    ["origin"],  # honest or byzantine
)
ROUND_DURATION = Histogram(
    "bdsgd_round_duration_seconds",
    "Wall time of one synchronous round",
)
DISAGREEMENT = Gauge(
    "bdsgd_disagreement",
    "Disagreement of honest models at the last recorded step",
)
RUN_COUNT = Counter(
    "bdsgd_runs_total",
    "Total count of simulation runs",
    ["status"],
)


def start_metrics_server(port: int = 8001) -> None:
    """Start a Prometheus metrics server on the specified port.

    Args:
        port: The port to listen on (default: 8001)
    """
    start_http_server(port)
    logger.info("Prometheus metrics server started on port %d", port)


def push_metrics(job_name: str = "byzantine_dsgd", grouping_key: Optional[Dict[str, str]] = None) -> None:
    """Push metrics to the configured Pushgateway, if any.

    Args:
        job_name: The name of the job
        grouping_key: Optional grouping key (e.g., {'axis': 'rule'})
    """
    if not PUSHGATEWAY_URL:
        return
    safe_grouping_key = {k: str(v) for k, v in (grouping_key or {}).items()}
    try:
        push_to_gateway(
            PUSHGATEWAY_URL,
            job=job_name,
            registry=REGISTRY,
            grouping_key=safe_grouping_key,
        )
    except Exception as e:
        logger.warning("Error pushing metrics to Pushgateway: %s", e)


def configure_pushgateway(url: Optional[str]) -> None:
    """Configure the Pushgateway URL; ``None`` disables pushing.

    Args:
        url: The URL of the Pushgateway (e.g., 'localhost:9091')
    """
    global PUSHGATEWAY_URL
    PUSHGATEWAY_URL = url
