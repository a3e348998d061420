"""Honest and Byzantine participants of a simulation round."""

import logging
from typing import Dict, List, Mapping, Optional

import numpy as np

from byzantine_dsgd.aggregation import InboundSet, aggregate
from byzantine_dsgd.attacks import AttackContext, craft
from byzantine_dsgd.learner import STREAM_ATTACK, LocalDataset, batch_grad, keyed_rng, sample_indices
from byzantine_dsgd.messaging import RoundBroker, topic_for
from byzantine_dsgd.models import AggregationSpec, AttackSpec, LossSpec
from byzantine_dsgd.sim_models import HalfStepMessage


class BaseAgent:
    """State shared by every simulated agent."""

    def __init__(self, agent_id: int, broker: RoundBroker, neighbors: List[int]) -> None:
        self.agent_id = agent_id
        self.broker = broker
        self.neighbors = list(neighbors)
        self.logger = logging.getLogger(f"agent.{agent_id}")

    @property
    def topic(self) -> str:
        return topic_for(self.agent_id)


class HonestAgent(BaseAgent):
    """Runs the local SGD half-step and the robust aggregation.

    Args:
        agent_id: The ID of this agent
        broker: Broker shared by the simulation
        neighbors: Every neighbour id, honest or not
        honest_neighbors: Neighbours that receive this agent's half-steps
        byzantine_neighbors: Number of Byzantine neighbours, sizes tm/ios
        dataset: Local training samples
        model: Initial model (copied)
        weights: Aggregation weight per sender, own id included
        rule: Aggregation rule
        loss: Resolved loss spec
        seed: Run seed keying the sampling stream
        batch_size: Mini-batch size
    """

    def __init__(
        self,
        agent_id: int,
        broker: RoundBroker,
        neighbors: List[int],
        honest_neighbors: List[int],
        byzantine_neighbors: int,
        dataset: LocalDataset,
        model: np.ndarray,
        weights: Mapping[int, float],
        rule: AggregationSpec,
        loss: LossSpec,
        seed: int,
        batch_size: int,
    ) -> None:
        super().__init__(agent_id, broker, neighbors)
        self.honest_neighbors = list(honest_neighbors)
        self.byzantine_neighbors = byzantine_neighbors
        self.dataset = dataset
        self.model = np.array(model, dtype=float)
        self.weights = dict(weights)
        self.rule = rule
        self.loss = loss
        self.seed = seed
        self.batch_size = batch_size
        self.half: Optional[np.ndarray] = None
        self.last_gradient: Optional[np.ndarray] = None

    def half_step(self, k: int, alpha: float) -> np.ndarray:
        """Local SGD step; the result is sent to every honest neighbour."""
        idx = sample_indices(self.seed, self.agent_id, k, len(self.dataset), self.batch_size)
        g = batch_grad(self.loss, self.model, self.dataset.features[idx], self.dataset.labels[idx])
        self.last_gradient = g
        self.half = self.model - alpha * g
        for m in self.honest_neighbors:
            self.broker.publish(
                topic_for(m),
                HalfStepMessage(sender=self.agent_id, receiver=m, step=k, vector=self.half),
            )
        return self.half

    def _weights_for(self, senders: List[int]) -> Dict[int, float]:
        # Missing senders hand their weight to the agent itself.
        w = {s: self.weights.get(s, 0.0) for s in senders}
        missing = sum(v for s, v in self.weights.items() if s != self.agent_id and s not in w)
        w[self.agent_id] = self.weights.get(self.agent_id, 0.0) + missing
        return w

    def aggregate(self, k: int) -> np.ndarray:
        """Combine the own half-step with this round's inbound messages."""
        if self.half is None:
            raise RuntimeError(f"agent {self.agent_id} aggregated before its half-step")
        received = [m for m in self.broker.drain(self.topic) if m.step == k]
        messages = [(m.sender, m.vector) for m in received]
        inbound = InboundSet(
            own_id=self.agent_id,
            own=self.half,
            messages=messages,
            weights=self._weights_for([s for s, _ in messages]),
        )
        self.model = aggregate(self.rule, inbound, byz_neighbours=self.byzantine_neighbors)
        self.logger.debug("step %d aggregated %d messages", k, len(messages))
        return self.model


class ByzantineAgent(BaseAgent):
    """Sends a crafted vector to each honest neighbour.

    ``emit`` sees all honest half-steps of the round but only uses the ones
    of each target's neighbourhood.
    """

    def __init__(
        self,
        agent_id: int,
        broker: RoundBroker,
        neighbors: List[int],
        honest_neighborhoods: Mapping[int, List[int]],
        attack: AttackSpec,
        seed: int,
        dim: int,
        victim: Optional[int] = None,
    ) -> None:
        super().__init__(agent_id, broker, neighbors)
        self.targets = sorted(t for t in neighbors if t in honest_neighborhoods)
        self.honest_neighborhoods = honest_neighborhoods
        self.attack = attack
        self.seed = seed
        self.dim = dim
        self.victim = victim

    def _visible(self, target: int, half_steps: Mapping[int, np.ndarray]) -> List[int]:
        members = list(self.honest_neighborhoods[target])
        if self.attack.include_target or not members:
            members = [target] + members
        if self.attack.kind == "duplicate" and self.victim == target and target not in members:
            members = [target] + members
        return [m for m in members if m in half_steps]

    def emit(self, k: int, half_steps: Mapping[int, np.ndarray]) -> int:
        """Publish this round's messages; returns how many were sent."""
        sent = 0
        for target in self.targets:
            visible = self._visible(target, half_steps)
            if self.attack.kind == "duplicate" and self.victim not in visible:
                # the victim is outside the target's neighbourhood
                continue
            ctx = AttackContext(
                target=target,
                honest_msgs=[(m, half_steps[m]) for m in visible],
                step=k,
                rng=keyed_rng(self.seed, STREAM_ATTACK, self.agent_id, target, k),
                dim=self.dim,
            )
            vector = craft(self.attack, ctx, self.victim)
            if vector is None:
                continue
            self.broker.publish(
                topic_for(target),
                HalfStepMessage(
                    sender=self.agent_id, receiver=target, step=k, vector=vector, byzantine=True
                ),
            )
            sent += 1
        return sent
