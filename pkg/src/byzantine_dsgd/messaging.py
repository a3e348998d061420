"""In-memory message passing between simulated agents."""

import logging
from typing import Dict, List

from byzantine_dsgd.metrics import MESSAGE_COUNT
from byzantine_dsgd.sim_models import HalfStepMessage

logger = logging.getLogger(__name__)


def topic_for(agent_id: int) -> str:
    return f"agent.{agent_id}"


class RoundBroker:
    """Topic-based broker for one simulation.

    Messages are kept per topic in publish order until drained.
    """

    def __init__(self) -> None:
        self.topics: Dict[str, List[HalfStepMessage]] = {}

    def publish(self, topic: str, message: HalfStepMessage) -> None:
        """Publish a message to a topic.

        Args:
            topic: The topic to publish to
            message: The message to publish
        """
        self.topics.setdefault(topic, []).append(message)
        MESSAGE_COUNT.labels(origin="byzantine" if message.byzantine else "honest").inc()

    def drain(self, topic: str) -> List[HalfStepMessage]:
        """Return and remove every message queued on ``topic``."""
        return self.topics.pop(topic, [])

    def pending(self) -> int:
        return sum(len(v) for v in self.topics.values())
