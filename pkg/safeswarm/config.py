# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

import math
from copy import deepcopy
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml
from typing_extensions import Self

from safeswarm.args import (
    AttackerArgs,
    DetectorArgs,
    EscapeArgs,
    EstimatorArgs,
    GainArgs,
    LocalizationArgs,
    ModelArgs,
    NoiseArgs,
)
from safeswarm.coordination import CoordGraph
from safeswarm.dynamics import AgentModel
from safeswarm.trajectory import TABLE_PATHS, BezierPath
from safeswarm.utils import ConfigurationError, atomic_write

REQUIRED = ("agents", "seed")


@dataclass
class AgentConfig:
    control_points: List[List[float]]
    """Four Bézier control points in m"""
    initial_state: Optional[List[float]] = None
    """Initial [x, y, vx, vy]. Defaults to the first control point at rest"""


@dataclass
class ScenarioConfig:
    seed: int = 42
    agents: List[AgentConfig] = field(default_factory=list)
    name: str = ""
    max_ticks: int = 20000
    graph: Optional[List[List[int]]] = None
    """Adjacency list over agent indices. ``None`` connects every pair"""
    model: ModelArgs = field(default_factory=ModelArgs)
    noise: NoiseArgs = field(default_factory=NoiseArgs)
    gains: GainArgs = field(default_factory=GainArgs)
    attacker: AttackerArgs = field(default_factory=AttackerArgs)
    detector: DetectorArgs = field(default_factory=DetectorArgs)
    escape: EscapeArgs = field(default_factory=EscapeArgs)
    estimator: EstimatorArgs = field(default_factory=EstimatorArgs)
    localization: LocalizationArgs = field(default_factory=LocalizationArgs)

    @classmethod
    def from_dict(cls, data: Any) -> Self:
        issues: List[str] = []
        config = _build(cls, data, "", issues)
        if issues:
            raise ConfigurationError("\n".join(issues))
        return config

    @classmethod
    def from_name(cls, name: str, **kwargs: Any) -> Self:
        if name not in name_to_scenario:
            raise ConfigurationError(f"{name!r} is not a supported scenario name. Choose from {sorted(name_to_scenario)}")
        data = deepcopy(name_to_scenario[name])
        data.setdefault("agents", [{"control_points": points} for points in TABLE_PATHS])
        data.setdefault("seed", 42)
        data.update(kwargs)
        return cls.from_dict(data)

    @classmethod
    def from_file(cls, path: Union[str, Path], **kwargs: Any) -> Self:
        with open(path, encoding="utf-8") as fp:
            data = yaml.safe_load(fp)
        if data is None:
            raise ConfigurationError(f"{path} is empty. Missing required fields: {', '.join(REQUIRED)}")
        if isinstance(data, dict):
            data.update(kwargs)
        return cls.from_dict(data)

    def validate(self, require_agents: bool = True) -> None:
        issues = []
        if require_agents and not self.agents:
            issues.append("agents: at least one agent is required")
        if self.max_ticks < 1:
            issues.append(f"max_ticks: must be positive, got {self.max_ticks}")
        for i, agent in enumerate(self.agents):
            points = agent.control_points
            if len(points) != 4 or any(len(p) != 2 for p in points):
                issues.append(f"agents[{i}].control_points: expected 4 points of 2 coordinates")
            elif not all(math.isfinite(v) for p in points for v in p):
                issues.append(f"agents[{i}].control_points: must be finite")
            if agent.initial_state is not None and len(agent.initial_state) != 4:
                issues.append(f"agents[{i}].initial_state: expected 4 values, got {len(agent.initial_state)}")
        if self.graph is not None:
            if len(self.graph) != len(self.agents):
                issues.append(f"graph: expected {len(self.agents)} adjacency rows, got {len(self.graph)}")
            else:
                try:
                    CoordGraph.from_adjacency(self.graph)
                except ConfigurationError as ex:
                    issues.append(f"graph: {ex}")
        positive = [
            ("model", self.model, ("dt", "v_max", "a_max")),
            ("noise", self.noise, ("sigma_g", "sigma_i")),
            ("gains", self.gains, ("rho", "k_e", "k_s", "k_p", "k_i")),
            ("escape", self.escape, ("beta", "q", "r", "max_iters", "tol")),
            ("estimator", self.estimator, ("p0",)),
            ("localization", self.localization, ("window", "sigma_v", "prior_var")),
            ("attacker", self.attacker, ("d0",)),
        ]
        for prefix, args, names in positive:
            for name in names:
                if getattr(args, name) <= 0:
                    issues.append(f"{prefix}.{name}: must be positive, got {getattr(args, name)}")
        non_negative = [
            ("noise", self.noise, ("sigma_w",)),
            ("attacker", self.attacker, ("r_effect",)),
            ("escape", self.escape, ("horizon_slack", "buffer", "speed_penalty")),
            ("localization", self.localization, ("sigma_wp",)),
        ]
        for prefix, args, names in non_negative:
            for name in names:
                if getattr(args, name) < 0:
                    issues.append(f"{prefix}.{name}: must be non-negative, got {getattr(args, name)}")
        for prefix, value in (("detector.alpha", self.detector.alpha), ("escape.alpha", self.escape.alpha)):
            if not 0 < value < 1:
                issues.append(f"{prefix}: must lie in (0, 1), got {value}")
        if not 0 < self.detector.delta < 1:
            issues.append(f"detector.delta: must lie in (0, 1), got {self.detector.delta}")
        if self.detector.df is not None and self.detector.df < 1:
            issues.append(f"detector.df: must be a positive integer, got {self.detector.df}")
        if len(self.escape.zeta) not in (2, 4) or any(v <= 0 for v in self.escape.zeta):
            issues.append(f"escape.zeta: expected 2 or 4 strictly positive values, got {self.escape.zeta}")
        sizes = [
            ("attacker.position", self.attacker.position, 2),
            ("attacker.signal", self.attacker.signal, 2),
            ("attacker.bias", self.attacker.bias, 2),
            ("estimator.initial_offset", self.estimator.initial_offset, 4),
        ]
        for prefix, values, size in sizes:
            if len(values) != size:
                issues.append(f"{prefix}: expected {size} values, got {len(values)}")
        if issues:
            raise ConfigurationError("\n".join(issues))

    def agent_model(self) -> AgentModel:
        return AgentModel.double_integrator(
            dt=self.model.dt,
            sigma_w=self.noise.sigma_w,
            sigma_g=self.noise.sigma_g,
            sigma_i=self.noise.sigma_i,
            v_max=self.model.v_max,
            a_max=self.model.a_max,
        )

    def coord_graph(self) -> CoordGraph:
        if self.graph is None:
            return CoordGraph.complete(len(self.agents))
        return CoordGraph.from_adjacency(self.graph)

    def paths(self) -> List[BezierPath]:
        return [BezierPath.from_points(agent.control_points) for agent in self.agents]

    def initial_states(self) -> List[List[float]]:
        states = []
        for agent in self.agents:
            if agent.initial_state is not None:
                states.append(list(agent.initial_state))
            else:
                states.append([*agent.control_points[0], 0.0, 0.0])
        return states


def _default_of(f) -> Any:
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return MISSING


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _coerce(value: Any, default: Any, path: str, issues: List[str]) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            issues.append(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) or (default is None and path.endswith(".df")):
        if value is None and default is None:
            return value
        if not isinstance(value, int) or isinstance(value, bool):
            issues.append(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not _is_number(value):
            issues.append(f"{path}: expected a number, got {value!r}")
            return value
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            issues.append(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not all(_is_number(v) for v in value):
            issues.append(f"{path}: expected a list of numbers, got {value!r}")
            return value
        return [float(v) for v in value]
    return value


def _build_agent(data: Any, path: str, issues: List[str]) -> AgentConfig:
    if not isinstance(data, dict):
        issues.append(f"{path}: expected a mapping, got {data!r}")
        return AgentConfig(control_points=[])
    unknown = set(data) - {"control_points", "initial_state"}
    issues.extend(f"{path}.{key}: unknown field" for key in sorted(unknown))
    if "control_points" not in data:
        issues.append(f"{path}.control_points: missing required field")
    points = data.get("control_points", [])
    if not isinstance(points, list) or not all(
        isinstance(p, list) and all(_is_number(v) for v in p) for p in points
    ):
        issues.append(f"{path}.control_points: expected a list of [x, y] points, got {points!r}")
        points = []
    initial = data.get("initial_state")
    if initial is not None:
        initial = _coerce(initial, [], f"{path}.initial_state", issues)
    return AgentConfig(control_points=[[float(v) for v in p] for p in points], initial_state=initial)


def _build_graph(data: Any, issues: List[str]) -> Optional[List[List[int]]]:
    if data is None:
        return None
    if not isinstance(data, list) or not all(
        isinstance(row, list) and all(isinstance(j, int) and not isinstance(j, bool) for j in row) for row in data
    ):
        issues.append(f"graph: expected an adjacency list of agent indices, got {data!r}")
        return None
    return [list(row) for row in data]


def _build(cls, data: Any, prefix: str, issues: List[str]):
    if not isinstance(data, dict):
        issues.append(f"{prefix or 'config'}: expected a mapping, got {data!r}")
        return cls()
    names = {f.name: f for f in fields(cls)}
    for key in sorted(set(data) - set(names)):
        issues.append(f"{prefix}{key}: unknown field")
    if cls is ScenarioConfig:
        issues.extend(f"{key}: missing required field" for key in REQUIRED if key not in data)
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            continue
        path = f"{prefix}{key}"
        default = _default_of(names[key])
        if key == "agents" and cls is ScenarioConfig:
            if not isinstance(value, list):
                issues.append(f"agents: expected a list, got {value!r}")
                continue
            kwargs[key] = [_build_agent(agent, f"agents[{i}]", issues) for i, agent in enumerate(value)]
        elif key == "graph" and cls is ScenarioConfig:
            kwargs[key] = _build_graph(value, issues)
        elif hasattr(default, "__dataclass_fields__"):
            kwargs[key] = _build(type(default), value, f"{path}.", issues)
        else:
            kwargs[key] = _coerce(value, default, path, issues)
    return cls(**kwargs)


def load_config(path: Union[str, Path]) -> ScenarioConfig:
    config = ScenarioConfig.from_file(path)
    config.validate()
    return config


def save_config(config: ScenarioConfig, path: Path) -> None:
    atomic_write(path, yaml.safe_dump(asdict(config), sort_keys=False))


###########################
# Reference missions
###########################
scenarios: List[Dict[str, Any]] = [
    # three agents on the reference paths, no spoofing device
    dict(name="nominal"),
    # a spoofing device sits close to agent 1's path
    dict(name="attack", attacker=dict(enabled=True)),
]
for r_effect in (15, 50, 60, 70):
    scenarios.append(dict(name=f"attack-r{r_effect}", attacker=dict(enabled=True, r_effect=float(r_effect))))
# the same missions with GPS and IMU noise low enough for the coordination law to keep pace. the tolerable error
# shrinks with the noise so that the escape time stays in the tens of ticks
quiet = dict(noise=dict(sigma_w=1e-4, sigma_g=0.01, sigma_i=1e-4), escape=dict(zeta=[0.5, 0.5, 0.05, 0.05]))
for scenario in list(scenarios):
    scenarios.append(dict(scenario, name=f"{scenario['name']}-quiet", **quiet))

name_to_scenario = {scenario["name"]: scenario for scenario in scenarios}
