"""Communication graphs, Byzantine roles and mixing matrices.

Graphs are undirected and simple. A ``MixingMatrix`` is indexed by the
honest agents in ascending id order; ``agents`` records that order.
"""

import logging
import math
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from pydantic import BaseModel, Field, PrivateAttr, validator

from byzantine_dsgd.aggregation import check_contraction
from byzantine_dsgd.errors import BetaOutOfRange, DisconnectedHonestSubgraph, NoValidTrial
from byzantine_dsgd.models import AggregationSpec

logger = logging.getLogger(__name__)

Edge = Tuple[int, int]


class Role(str, Enum):
    """Behaviour of an agent."""

    HONEST = "honest"
    BYZANTINE = "byzantine"


class Graph(BaseModel):
    """Undirected simple graph over agents ``0..n_agents-1``."""

    n_agents: int = Field(..., ge=1, description="Number of agents")
    edges: List[Edge] = Field(default_factory=list, description="Unordered agent pairs")

    _adjacency: Dict[int, List[int]] = PrivateAttr(default_factory=dict)

    @validator("edges", each_item=False)
    def normalise_edges(cls, v, values):
        n = values.get("n_agents", 0)
        seen = set()
        for a, b in v:
            if a == b:
                raise ValueError(f"self-loop at agent {a}")
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"edge ({a}, {b}) outside [0, {n})")
            seen.add((min(a, b), max(a, b)))
        return sorted(seen)

    def __init__(self, **data) -> None:
        super().__init__(**data)
        adjacency: Dict[int, List[int]] = {i: [] for i in range(self.n_agents)}
        for a, b in self.edges:
            adjacency[a].append(b)
            adjacency[b].append(a)
        self._adjacency = {i: sorted(nbrs) for i, nbrs in adjacency.items()}

    def neighbors(self, n: int) -> List[int]:
        return self._adjacency[n]

    def degree(self, n: int) -> int:
        return len(self._adjacency[n])

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n_agents))
        g.add_edges_from(self.edges)
        return g

    @classmethod
    def from_networkx(cls, g: nx.Graph) -> "Graph":
        return cls(n_agents=g.number_of_nodes(), edges=[(int(a), int(b)) for a, b in g.edges()])


class RoleAssignment(BaseModel):
    """Per-agent honest/Byzantine labels."""

    roles: List[Role]

    @property
    def n_agents(self) -> int:
        return len(self.roles)

    @property
    def honest(self) -> List[int]:
        return [i for i, r in enumerate(self.roles) if r is Role.HONEST]

    @property
    def byzantine(self) -> List[int]:
        return [i for i, r in enumerate(self.roles) if r is Role.BYZANTINE]

    def is_honest(self, n: int) -> bool:
        return self.roles[n] is Role.HONEST

    @classmethod
    def all_honest(cls, n_agents: int) -> "RoleAssignment":
        return cls(roles=[Role.HONEST] * n_agents)

    @classmethod
    def from_byzantine(cls, n_agents: int, byzantine: Sequence[int]) -> "RoleAssignment":
        byz = set(byzantine)
        return cls(roles=[Role.BYZANTINE if i in byz else Role.HONEST for i in range(n_agents)])

    @classmethod
    def random(cls, n_agents: int, count: int, seed: int) -> "RoleAssignment":
        rng = np.random.default_rng(seed)
        byz = rng.choice(n_agents, size=count, replace=False) if count else []
        return cls.from_byzantine(n_agents, [int(i) for i in byz])


class MixingMatrix(BaseModel):
    """Row-stochastic weights over honest agents."""

    agents: List[int] = Field(..., description="Honest agent ids, row/column order")
    weights: np.ndarray = Field(..., description="|R| x |R| weight matrix")

    class Config:
        arbitrary_types_allowed = True

    @validator("weights")
    def row_stochastic(cls, v, values):
        v = np.asarray(v, dtype=float)
        size = len(values.get("agents", []))
        if v.shape != (size, size):
            raise ValueError(f"weights must be {size}x{size}, got {v.shape}")
        if np.any(v < -1e-15) or np.any(v > 1 + 1e-12):
            raise ValueError("weights must lie in [0, 1]")
        if size and np.max(np.abs(v.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("rows must sum to 1")
        return v

    @property
    def size(self) -> int:
        return len(self.agents)

    def row(self, agent: int) -> Dict[int, float]:
        """Nonzero weights of ``agent``'s row keyed by agent id."""
        i = self.agents.index(agent)
        return {m: float(w) for m, w in zip(self.agents, self.weights[i]) if w != 0.0}


class SpectralSummary(BaseModel):
    beta: float
    chi: float
    rho_star: float


def gen_erdos_renyi(n: int, p: float, seed: int) -> Graph:
    """G(n, p) graph; deterministic for fixed ``(n, p, seed)``."""
    if n < 2:
        raise ValueError("n must be at least 2")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    return Graph.from_networkx(nx.gnp_random_graph(n, p, seed=seed))


def complete_graph(n: int) -> Graph:
    return Graph.from_networkx(nx.complete_graph(n))


def honest_subgraph(g: Graph, r: RoleAssignment) -> nx.Graph:
    return g.to_networkx().subgraph(r.honest).copy()


def honest_subgraph_connected(g: Graph, r: RoleAssignment) -> bool:
    sub = honest_subgraph(g, r)
    if sub.number_of_nodes() == 0:
        return False
    return nx.is_connected(sub)


def _metropolis_rows(g: nx.Graph) -> Dict[int, Dict[int, float]]:
    rows: Dict[int, Dict[int, float]] = {}
    for n in sorted(g.nodes()):
        row: Dict[int, float] = {}
        for m in sorted(g.neighbors(n)):
            row[m] = 1.0 / (1.0 + max(g.degree(n), g.degree(m)))
        row[n] = 1.0 - sum(row.values())
        rows[n] = row
    return rows


def _rows_to_matrix(agents: List[int], rows: Dict[int, Dict[int, float]]) -> MixingMatrix:
    index = {a: i for i, a in enumerate(agents)}
    w = np.zeros((len(agents), len(agents)))
    for n, row in rows.items():
        for m, v in row.items():
            w[index[n], index[m]] = v
    return MixingMatrix(agents=agents, weights=w)


def build_metropolis_weights(g: Graph, r: RoleAssignment) -> MixingMatrix:
    """Metropolis-Hastings weights over the honest subgraph (doubly stochastic)."""
    if not honest_subgraph_connected(g, r):
        raise DisconnectedHonestSubgraph("honest subgraph is not connected")
    return _rows_to_matrix(r.honest, _metropolis_rows(honest_subgraph(g, r)))


def uniform_weights(g: Graph, r: RoleAssignment) -> MixingMatrix:
    """Row n puts 1/(|R_n|+1) on itself and each honest neighbour."""
    if not honest_subgraph_connected(g, r):
        raise DisconnectedHonestSubgraph("honest subgraph is not connected")
    sub = honest_subgraph(g, r)
    rows = {}
    for n in sub.nodes():
        members = [n] + list(sub.neighbors(n))
        rows[n] = {m: 1.0 / len(members) for m in members}
    return _rows_to_matrix(r.honest, rows)


def baseline_weights(g: Graph, kind: str = "metropolis") -> Dict[int, Dict[int, float]]:
    """Per-agent weights over own and all neighbour messages, roles ignored."""
    if kind == "metropolis":
        return _metropolis_rows(g.to_networkx())
    if kind == "uniform":
        rows = {}
        for n in range(g.n_agents):
            members = [n] + g.neighbors(n)
            rows[n] = {m: 1.0 / len(members) for m in members}
        return rows
    raise ValueError(f"unknown weight kind {kind!r}")


def spectral_beta(W: MixingMatrix) -> float:
    """``1 - ||(I - 11^T/|R|) W||^2`` with the spectral norm.

    A single honest agent has a zero centering projector and beta = 1.
    Values at or below 1e-12 are treated as out of range.
    """
    size = W.size
    if size == 1:
        return 1.0
    centred = W.weights - W.weights.mean(axis=0, keepdims=True)
    beta = 1.0 - float(np.linalg.norm(centred, 2)) ** 2
    if beta <= 1e-12:
        raise BetaOutOfRange(beta)
    return beta


def skewness_chi(W: MixingMatrix) -> float:
    col = W.weights.sum(axis=0)
    return math.sqrt(float(np.sum((col - 1.0) ** 2)) / W.size)


def spectral_summary(W: MixingMatrix) -> SpectralSummary:
    beta = spectral_beta(W)
    return SpectralSummary(
        beta=beta, chi=skewness_chi(W), rho_star=beta / (8.0 * math.sqrt(W.size))
    )


def ios_complete_reference(honest_count: int, byz_count: int) -> Tuple[MixingMatrix, float, float]:
    """Analytic (W, rho, chi) for IOS with uniform weights on the complete graph."""
    w = np.full((honest_count, honest_count), 1.0 / honest_count)
    return MixingMatrix(agents=list(range(honest_count)), weights=w), byz_count / honest_count, 0.0


def _byzantine_placements(
    kind: int, honest: np.ndarray, centre: np.ndarray, spread: float,
    count: int, rng: np.random.Generator,
) -> List[np.ndarray]:
    d = honest.shape[1]
    if kind == 0:
        # uniform in a ball of radius 10 x spread
        points = []
        for _ in range(count):
            u = rng.standard_normal(d)
            u /= np.linalg.norm(u)
            radius = 10.0 * spread * rng.random() ** (1.0 / d)
            points.append(centre + radius * u)
        return points
    if kind == 1:
        _, _, vt = np.linalg.svd(honest - centre, full_matrices=False)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        return [centre + sign * 10.0 * spread * vt[0] for _ in range(count)]
    if kind == 2:
        far = honest[int(np.argmax(np.linalg.norm(honest - centre, axis=1)))]
        return [far.copy() for _ in range(count)]
    # inliers near the weighted average
    return [centre + 0.1 * spread * rng.standard_normal(d) for _ in range(count)]


def estimate_contraction(
    rule: AggregationSpec,
    g: Graph,
    r: RoleAssignment,
    W: MixingMatrix,
    trials: int,
    seed: int,
    dim: int = 3,
) -> float:
    """Empirical lower bound on the contraction constant of ``rule``.

    Each trial picks an honest agent, places its honest neighbourhood at
    random and its Byzantine neighbours by one of four heuristics (ball,
    top spread direction, duplicated farthest point, inliers), and measures
    ``||A_n - x_hat_n|| / max ||x_m - x_hat_n||``. The maximum ratio over
    trials is returned; configurations with zero spread are skipped.

    The weights the rule sees come from ``W``: Byzantine neighbours get
    their ``rule.weights`` share of the full-graph row and the honest
    entries are row ``n`` of ``W`` scaled to the remaining mass. Without
    Byzantine neighbours the rule sees exactly ``W[n]``.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    full_rows = baseline_weights(g, rule.weights)
    honest_ids = W.agents
    best = -math.inf
    for t in range(trials):
        n = honest_ids[int(rng.integers(len(honest_ids)))]
        w_row = W.row(n)
        honest_members = [n] + [m for m in g.neighbors(n) if r.is_honest(m)]
        byz_members = [m for m in g.neighbors(n) if not r.is_honest(m)]
        scale = math.exp(rng.uniform(-2.0, 2.0))
        honest_pts = scale * rng.standard_normal((len(honest_members), dim))
        w = np.array([w_row.get(m, 0.0) for m in honest_members])
        centre = w @ honest_pts
        spread = float(np.max(np.linalg.norm(honest_pts - centre, axis=1)))
        byz_pts = _byzantine_placements(t % 4, honest_pts, centre, spread, len(byz_members), rng)
        byz_w = [full_rows[n][m] for m in byz_members]
        inbound_w = list((1.0 - sum(byz_w)) * w) + byz_w
        lhs, sp = check_contraction(
            rule, list(honest_pts), byz_pts, list(w), inbound_weights=inbound_w
        )
        if sp == 0.0:
            if lhs == 0.0:
                continue
            best = math.inf
            continue
        best = max(best, lhs / sp)
    if best == -math.inf:
        raise NoValidTrial(f"all {trials} sampled configurations were degenerate")
    logger.debug("contraction estimate for %s over %d trials: %.6g", rule.rule, trials, best)
    return best


# Plain-text serialisation

def write_graph(g: Graph, path: Union[str, Path]) -> None:
    lines = [f"graph n={g.n_agents}"] + [f"edge {a} {b}" for a, b in g.edges]
    Path(path).write_text("\n".join(lines) + "\n")


def read_graph(path: Union[str, Path]) -> Graph:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("graph n="):
        raise ValueError(f"{path}: missing 'graph n=<N>' header")
    n = int(lines[0].split("=", 1)[1])
    edges = []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 3 or parts[0] != "edge":
            raise ValueError(f"{path}: bad line {ln!r}")
        edges.append((int(parts[1]), int(parts[2])))
    return Graph(n_agents=n, edges=edges)


def write_matrix(W: MixingMatrix, path: Union[str, Path]) -> None:
    """CSV, one row per line in row-major order; agent ids in the first line."""
    lines = [",".join(str(a) for a in W.agents)]
    lines += [",".join(repr(float(v)) for v in row) for row in W.weights]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix(path: Union[str, Path], agents: Optional[List[int]] = None) -> MixingMatrix:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    header = [int(x) for x in lines[0].split(",")]
    rows = [[float(x) for x in ln.split(",")] for ln in lines[1:]]
    return MixingMatrix(agents=agents or header, weights=np.array(rows))
