# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

"""Consensus over the coordination states that drive the virtual targets."""
import logging
from dataclasses import dataclass, replace
from typing import FrozenSet, Iterable, List, Optional, Sequence, Tuple

from typing_extensions import Self

from safeswarm.utils import ConfigurationError, ContractError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CoordGraph:
    n_agents: int
    edges: FrozenSet[Tuple[int, int]]

    def __post_init__(self) -> None:
        normalized = set()
        for i, j in self.edges:
            if i == j:
                raise ConfigurationError(f"Self-loop on agent {i} is not allowed")
            if not (0 <= i < self.n_agents and 0 <= j < self.n_agents):
                raise ConfigurationError(f"Edge ({i}, {j}) references an agent outside 0..{self.n_agents - 1}")
            normalized.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(normalized))
        if self.n_agents > 1 and not self.is_connected():
            log.warning("The coordination graph over %d agents is not connected", self.n_agents)

    @classmethod
    def complete(cls, n_agents: int) -> Self:
        return cls(n_agents, frozenset((i, j) for i in range(n_agents) for j in range(i + 1, n_agents)))

    @classmethod
    def line(cls, n_agents: int) -> Self:
        return cls(n_agents, frozenset((i, i + 1) for i in range(n_agents - 1)))

    @classmethod
    def from_adjacency(cls, adjacency: Sequence[Iterable[int]]) -> Self:
        edges = set()
        for i, neighbors in enumerate(adjacency):
            for j in neighbors:
                if not 0 <= j < len(adjacency):
                    raise ConfigurationError(f"Agent {i} lists neighbor {j} outside 0..{len(adjacency) - 1}")
                if i not in adjacency[j]:
                    raise ConfigurationError(f"Adjacency is not symmetric: {j} is listed under {i} but not vice versa")
                edges.add((i, j))
        return cls(len(adjacency), frozenset(edges))

    def neighbors(self, i: int) -> List[int]:
        return sorted({b for a, b in self.edges if a == i} | {a for a, b in self.edges if b == i})

    def adjacency(self) -> List[List[int]]:
        return [self.neighbors(i) for i in range(self.n_agents)]

    def is_connected(self) -> bool:
        if self.n_agents == 0:
            return True
        seen, frontier = {0}, [0]
        while frontier:
            i = frontier.pop()
            for j in self.neighbors(i):
                if j not in seen:
                    seen.add(j)
                    frontier.append(j)
        return len(seen) == self.n_agents


@dataclass(frozen=True)
class CoordState:
    s: Tuple[float, ...]
    k_e: float = 0.005
    k_s: float = 0.005
    rho: float = 1 / 1200

    def __post_init__(self) -> None:
        object.__setattr__(self, "s", tuple(float(v) for v in self.s))
        if any(not 0.0 <= v <= 1.0 for v in self.s):
            raise ConfigurationError(f"Coordination states must lie in [0, 1], got {self.s}")
        if self.k_e <= 0 or self.k_s <= 0 or self.rho <= 0:
            raise ConfigurationError(f"k_e, k_s and rho must be positive, got {self.k_e}, {self.k_s}, {self.rho}")

    @classmethod
    def start(cls, n_agents: int, **gains: float) -> Self:
        return cls(tuple(0.0 for _ in range(n_agents)), **gains)

    @property
    def complete(self) -> bool:
        return all(v >= 1.0 for v in self.s)

    def spread(self) -> float:
        return max(self.s) - min(self.s) if self.s else 0.0


def coord_input(
    i: int, coord: CoordState, graph: CoordGraph, tracking_error: float, attacked: bool = False
) -> float:
    """Progress of agent ``i``'s coordination state for this tick.

    The tracking-error term slows the virtual target down until the agent catches up. While the agent is attacked the
    same term is added back, so the target keeps moving away from the spoofing device.
    """
    if tracking_error < 0:
        raise ContractError(f"tracking_error must be non-negative, got {tracking_error}")
    disagreement = sum(coord.s[i] - coord.s[j] for j in graph.neighbors(i))
    z = -coord.k_e * tracking_error - coord.k_s * disagreement + coord.rho
    if attacked:
        z += coord.k_e * tracking_error
    return max(z, 0.0)


def coord_inputs(
    coord: CoordState,
    graph: CoordGraph,
    tracking_errors: Sequence[float],
    attacked: Optional[Sequence[bool]] = None,
) -> List[float]:
    """``coord_input`` for every agent against the same snapshot of ``coord``."""
    attacked = attacked or [False] * graph.n_agents
    return [coord_input(i, coord, graph, tracking_errors[i], attacked[i]) for i in range(graph.n_agents)]


def advance(coord: CoordState, z: Sequence[float]) -> CoordState:
    if len(z) != len(coord.s):
        raise ContractError(f"Expected {len(coord.s)} coordination inputs, got {len(z)}")
    if any(v < 0 for v in z):
        raise ContractError(f"Coordination inputs must be non-negative, got {list(z)}")
    return replace(coord, s=tuple(min(s + v, 1.0) for s, v in zip(coord.s, z)))
