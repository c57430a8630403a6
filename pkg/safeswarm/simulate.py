# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

import csv
import io
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import lightning as L
import torch
import yaml

from safeswarm.config import ScenarioConfig, load_config
from safeswarm.control import RobustController, avoid_reentry, pd_control
from safeswarm.coordination import CoordGraph, CoordState, advance, coord_inputs
from safeswarm.detection import Decision, DetectorState, cusum_step, estimate_attack, innovation_cov
from safeswarm.dynamics import POSITION, AgentModel, NoiseStreams, TrueState, distance, in_spoof_range, measure, step
from safeswarm.estimation import EstimatorState, ResilientEstimator
from safeswarm.localization import Localizer, SignalModel
from safeswarm.safety import EscapeQuery, EscProblem, EscSolution, escape_time, safety_margin, solve_esc
from safeswarm.trajectory import BezierPath, virtual_target
from safeswarm.utils import (
    DTYPE,
    CLI,
    ConfigurationError,
    ContractError,
    NumericalError,
    as_tensor,
    atomic_write,
    choose_logger,
    exit_with,
    format_float,
    init_out_dir,
)

log = logging.getLogger(__name__)

TRACE_COLUMNS = (
    ["tick", "agent", "x1", "x2", "x3", "x4", "xhat1", "xhat2", "xhat3", "xhat4", "P11", "P22", "P33", "P44"]
    + ["s", "z", "S", "mode", "u1", "u2", "margin", "ax", "ay"]
)
ROLLOUT_COLUMNS = ["tick", "agent", "index", "x1", "x2", "x3", "x4"]

ROBUST = "robust"
ESC = "esc"


@dataclass(frozen=True)
class TraceRow:
    tick: int
    agent: int
    x: Tuple[float, ...]
    x_hat: Tuple[float, ...]
    P_diag: Tuple[float, ...]
    s: float
    z: float
    S: float
    mode: str
    u: Tuple[float, ...]
    margin: float
    """Distance to the spoofing device minus its effective range, ``nan`` without a device"""
    attacker_estimate: Tuple[float, float] = (math.nan, math.nan)

    def cells(self) -> List[str]:
        floats = [*self.x, *self.x_hat, *self.P_diag, self.s, self.z, self.S]
        return (
            [str(self.tick), str(self.agent)]
            + [format_float(v) for v in floats]
            + [self.mode]
            + [format_float(v) for v in (*self.u, self.margin, *self.attacker_estimate)]
        )


@dataclass
class Episode:
    """Bookkeeping of one attacked stretch of one agent."""

    agent: int
    k_a: int
    """Detection tick"""
    k_esc: int
    horizon: int
    margin: Optional[float] = None
    """Safety margin at ``k_a + k_esc``, filled once that tick is reached"""
    end: Optional[int] = None
    """Tick at which the detector trusted the GPS again"""

    @property
    def violated(self) -> bool:
        return self.margin is not None and self.margin <= 0


@dataclass(frozen=True)
class Event:
    tick: int
    agent: int
    kind: Literal["degraded_solve", "input_clamped", "speed_clipped"]
    detail: str = ""


@dataclass
class SimTrace:
    config: ScenarioConfig
    rows: List[TraceRow] = field(default_factory=list)
    episodes: List[Episode] = field(default_factory=list)
    events: List[Event] = field(default_factory=list)
    rollouts: List[Tuple[int, int, torch.Tensor]] = field(default_factory=list)
    ticks: int = 0

    @property
    def violations(self) -> List[Episode]:
        return [episode for episode in self.episodes if episode.violated]


class _AgentRun:
    """Mutable per-agent state of one run. Only the agent's own tick reads or writes it."""

    def __init__(self, index: int, config: ScenarioConfig, model: AgentModel, path: BezierPath, x0: List[float]) -> None:
        self.index = index
        self.config = config
        self.model = model
        self.path = path
        noise = config.noise
        # the injected signal is received through the GPS front end and shares its switch
        self.rng = NoiseStreams(
            config.seed, index, {"process": noise.process, "gps": noise.gps, "imu": noise.imu, "signal": noise.gps}
        )
        self.x = TrueState(as_tensor(x0))
        self.x_prev: Optional[TrueState] = None
        self.trajectory: List[torch.Tensor] = [self.x.x]
        x_hat0 = self.x.x + as_tensor(config.estimator.initial_offset)
        self.estimator = ResilientEstimator(
            model,
            x_hat0,
            config.estimator.p0 * torch.eye(model.n, dtype=DTYPE),
            drop_gps_when_attacked=config.detector.drop_gps_when_attacked,
        )
        self.detector = DetectorState.for_model(model, config.detector.delta, config.detector.alpha, config.detector.df)
        self.u_prev = torch.zeros(model.m, dtype=DTYPE)
        self.episode: Optional[Episode] = None
        self.ever_attacked = False
        self.warm_start: Optional[torch.Tensor] = None
        self.localizer: Optional[Localizer] = None
        self.warned_degraded = False

    @property
    def attacked(self) -> bool:
        return self.detector.decision is Decision.ATTACKED

    def tracking_error(self, s: float) -> float:
        x = self.x.x if self.config.estimator.coordinate_on_truth else self.estimator.control_estimate.x_hat
        target = virtual_target(self.path, s, 0.0, self.model.dt)[0]
        return distance(x[POSITION], target)

    def attacker_estimate(self) -> Optional[torch.Tensor]:
        attacker = self.config.attacker
        if not attacker.enabled:
            return None
        if self.config.localization.enabled and self.localizer is not None:
            return self.localizer.estimate
        return as_tensor(attacker.position) + as_tensor(attacker.bias)


class _Mission:
    def __init__(self, config: ScenarioConfig, controller: RobustController, verbose_rollouts: bool) -> None:
        self.config = config
        self.controller = controller
        self.verbose_rollouts = verbose_rollouts
        self.model = config.agent_model()
        self.graph: CoordGraph = config.coord_graph()
        self.coord = CoordState.start(
            len(config.agents), k_e=config.gains.k_e, k_s=config.gains.k_s, rho=config.gains.rho
        )
        self.agents = [
            _AgentRun(i, config, self.model, path, x0)
            for i, (path, x0) in enumerate(zip(config.paths(), config.initial_states()))
        ]
        self.attacker = as_tensor(config.attacker.position)
        self.signal = SignalModel(p0=config.attacker.power, d0=config.attacker.d0)
        self.trace = SimTrace(config=config)

    def agent_tick(self, agent: _AgentRun, k: int, s: float, z: float) -> Tuple[TraceRow, torch.Tensor, List[Any]]:
        """Everything one agent does at tick ``k`` before the plant moves. Reads no other agent's tick-``k`` output."""
        config, model = self.config, self.model
        notes: List[Any] = []
        if agent.x_prev is not None:
            in_range = config.attacker.enabled and in_spoof_range(self.attacker, agent.x, config.attacker.r_effect)
            d = as_tensor(config.attacker.signal) if in_range else None
            y = measure(model, agent.x, agent.x_prev, d, agent.rng)
            est1 = agent.estimator.est1
            d_hat = estimate_attack(y.y_g, est1.x_hat, agent.u_prev, model)
            was_attacked = agent.attacked
            agent.detector, decision = cusum_step(agent.detector, d_hat, innovation_cov(model, est1.P))
            attacked = decision is Decision.ATTACKED
            agent.estimator.step(agent.u_prev, y, attacked)
            if attacked and not was_attacked:
                notes.append(self.start_episode(agent, k, est1.P))
            elif was_attacked and not attacked:
                agent.episode.end = k
                agent.episode = None
                agent.warm_start = None
            if in_range and agent.localizer is not None:
                power = self.signal(self.attacker.unsqueeze(0), agent.x.position).squeeze(0)
                power = power + agent.rng.gaussian("signal", config.localization.sigma_v * torch.eye(1, dtype=DTYPE))[0]
                agent.localizer.push(power.item(), agent.estimator.control_estimate.x_hat[POSITION])

        est = agent.estimator.control_estimate
        attacker = agent.attacker_estimate()
        if agent.attacked:
            u, solution = self.escape(agent, k, s, est, attacker)
            if solution.degraded:
                notes.append(Event(k, agent.index, "degraded_solve", f"{solution.iterations} iterations"))
                if not agent.warned_degraded:
                    log.warning("agent %d: escape solve at tick %d stopped before stationarity", agent.index, k)
                    agent.warned_degraded = True
            if self.verbose_rollouts:
                notes.append((k, agent.index, solution.rollout))
        else:
            target_pos, target_vel = virtual_target(agent.path, s, z, model.dt)
            u = self.controller(target_pos, target_vel, est, config.gains.k_p, config.gains.k_i, model.a_max)
            if agent.ever_attacked:
                radius = config.attacker.r_effect + config.escape.buffer
                u = avoid_reentry(u, est, attacker, radius, config.escape.beta, model.a_max)

        margin = math.nan
        if config.attacker.enabled:
            margin = distance(agent.x.position, self.attacker) - config.attacker.r_effect
        row = TraceRow(
            tick=k,
            agent=agent.index,
            x=tuple(agent.x.x.tolist()),
            x_hat=tuple(est.x_hat.tolist()),
            P_diag=tuple(torch.diagonal(est.P).tolist()),
            s=s,
            z=z,
            S=agent.detector.S,
            mode=ESC if agent.attacked else ROBUST,
            u=tuple(u.tolist()),
            margin=margin,
            attacker_estimate=tuple(attacker.tolist()) if attacker is not None else (math.nan, math.nan),
        )
        return row, u, notes

    def start_episode(self, agent: _AgentRun, k: int, P_at_attack: torch.Tensor) -> Episode:
        escape = self.config.escape
        query = EscapeQuery(as_tensor(escape.zeta), P_at_attack, escape.alpha, k_a=k)
        k_esc = escape_time(self.model, None, query)
        episode = Episode(agent=agent.index, k_a=k, k_esc=k_esc, horizon=max(k_esc + escape.horizon_slack, 1))
        agent.episode = episode
        agent.ever_attacked = True
        if agent.localizer is None and self.config.attacker.enabled:
            loc = self.config.localization
            agent.localizer = Localizer(
                as_tensor(self.config.attacker.position) + as_tensor(self.config.attacker.bias),
                prior_var=loc.prior_var,
                sigma_v=loc.sigma_v,
                sigma_wp=loc.sigma_wp,
                window=loc.window,
                signal=self.signal,
            )
        log.info("agent %d: attack detected at tick %d, escape time %d ticks", agent.index, k, k_esc)
        return episode

    def escape(
        self, agent: _AgentRun, k: int, s: float, est: EstimatorState, attacker: Optional[torch.Tensor]
    ) -> Tuple[torch.Tensor, EscSolution]:
        escape, model, path = self.config.escape, self.model, agent.path
        episode = agent.episode
        rho = self.config.gains.rho

        def goal(i: int) -> torch.Tensor:
            s_i = min(s + i * rho, 1.0)
            position, velocity = virtual_target(path, s_i, rho if s_i < 1.0 else 0.0, model.dt)
            return torch.cat([position, velocity])

        problem = EscProblem(
            horizon=episode.horizon,
            Q=escape.q * torch.eye(model.n, dtype=DTYPE),
            R=escape.r * torch.eye(model.m, dtype=DTYPE),
            beta=escape.beta,
            r_effect=self.config.attacker.r_effect,
            attacker=attacker,
            goal_provider=goal,
            k_esc=max(episode.k_a + episode.k_esc - k, 0),
            v_max=model.v_max,
            a_max=model.a_max,
            buffer=escape.buffer,
            speed_penalty=escape.speed_penalty,
            max_iters=escape.max_iters,
            tol=escape.tol,
        )
        solution = solve_esc(problem, est, model, warm_start=agent.warm_start)
        agent.warm_start = solution.controls[1:]
        return solution.controls[0], solution

    def plant_step(self, agent: _AgentRun, k: int, u: torch.Tensor) -> None:
        model = self.model
        norm = torch.linalg.vector_norm(u).item()
        if norm > model.a_max + 1e-9:
            self.trace.events.append(Event(k, agent.index, "input_clamped", format_float(norm)))
        x_next = step(model, agent.x, u, agent.rng, enforce_speed=self.config.model.enforce_speed)
        if x_next.clipped:
            self.trace.events.append(Event(k + 1, agent.index, "speed_clipped"))
        agent.x_prev, agent.x = agent.x, x_next
        agent.u_prev = u
        agent.trajectory.append(x_next.x)


def run(
    config: ScenarioConfig,
    controller: RobustController = pd_control,
    order: Optional[Sequence[int]] = None,
    workers: int = 1,
    verbose_rollouts: bool = False,
    metrics_logger: Optional[Any] = None,
) -> SimTrace:
    """Runs the mission tick by tick until every coordination state reaches 1 or ``max_ticks`` elapse.

    Args:
        config: The scenario.
        controller: Robust tracking controller, any callable with the signature of ``pd_control``.
        order: Evaluation order of the agents inside a tick. The trace does not depend on it.
        workers: Number of threads the per-agent work of a tick fans out to.
        verbose_rollouts: Keep the planned rollout of every escape solve.
        metrics_logger: Optional lightning logger that receives per-tick scalars.
    """
    config.validate(require_agents=False)
    mission = _Mission(config, controller, verbose_rollouts)
    n_agents = len(mission.agents)
    order = list(range(n_agents)) if order is None else list(order)
    if sorted(order) != list(range(n_agents)):
        raise ContractError(f"order must be a permutation of 0..{n_agents - 1}, got {order}")
    trace = mission.trace
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    try:
        k = 0
        while k < config.max_ticks and not mission.coord.complete:
            snapshot = mission.coord
            errors = [agent.tracking_error(snapshot.s[agent.index]) for agent in mission.agents]
            z = coord_inputs(snapshot, mission.graph, errors, [agent.attacked for agent in mission.agents])
            mission.coord = advance(snapshot, z)

            def work(i: int) -> Tuple[TraceRow, torch.Tensor, List[Any]]:
                return mission.agent_tick(mission.agents[i], k, mission.coord.s[i], z[i])

            results = dict(zip(order, pool.map(work, order) if pool is not None else map(work, order)))

            for i in range(n_agents):
                row, u, notes = results[i]
                agent = mission.agents[i]
                trace.rows.append(row)
                for note in notes:
                    if isinstance(note, Episode):
                        trace.episodes.append(note)
                    elif isinstance(note, Event):
                        trace.events.append(note)
                    else:
                        trace.rollouts.append(note)
                mission.plant_step(agent, k, u)
                if metrics_logger is not None:
                    metrics_logger.log_metrics(
                        {
                            f"agent{i}/s": row.s,
                            f"agent{i}/S": row.S,
                            f"agent{i}/margin": row.margin,
                            f"agent{i}/esc": float(row.mode == ESC),
                        },
                        step=k,
                    )
            k += 1
            if config.attacker.enabled:
                for episode in trace.episodes:
                    if episode.margin is None and episode.k_a + episode.k_esc < k:
                        episode.margin = safety_margin(
                            mission.agents[episode.agent].trajectory,
                            mission.attacker,
                            config.attacker.r_effect,
                            episode.k_a,
                            episode.k_esc,
                        )
        trace.ticks = k
    finally:
        if pool is not None:
            pool.shutdown()
        if metrics_logger is not None:
            metrics_logger.finalize("success")

    if not mission.coord.complete:
        log.warning("The mission did not complete within %d ticks", config.max_ticks)
    return trace


def arrival_ticks(trace: SimTrace) -> Dict[int, Optional[int]]:
    """First tick at which each agent's coordination state reached 1."""
    arrivals: Dict[int, Optional[int]] = {i: None for i in range(len(trace.config.agents))}
    for row in trace.rows:
        if row.s >= 1.0 and arrivals[row.agent] is None:
            arrivals[row.agent] = row.tick
    return arrivals


def path_lengths(trace: SimTrace) -> Dict[int, float]:
    lengths: Dict[int, float] = {}
    last: Dict[int, Tuple[float, float]] = {}
    for row in trace.rows:
        if row.agent in last:
            lengths[row.agent] += math.dist(last[row.agent], row.x[:2])
        else:
            lengths[row.agent] = 0.0
        last[row.agent] = row.x[:2]
    return lengths


def summarize(trace: SimTrace) -> Dict[str, Any]:
    arrivals = arrival_ticks(trace)
    reached = [tick for tick in arrivals.values() if tick is not None]
    complete = bool(arrivals) and len(reached) == len(arrivals)
    lengths = path_lengths(trace)
    kinds: Dict[str, int] = {}
    for event in trace.events:
        kinds[event.kind] = kinds.get(event.kind, 0) + 1
    return {
        "name": trace.config.name,
        "seed": trace.config.seed,
        "ticks": trace.ticks,
        "completed": complete,
        "arrival_spread": (max(reached) - min(reached)) if complete else None,
        "agents": [
            {
                "agent": i,
                "arrival_tick": arrivals[i],
                "path_length": round(lengths.get(i, 0.0), 6),
                "detection_ticks": [episode.k_a for episode in trace.episodes if episode.agent == i],
            }
            for i in arrivals
        ],
        "episodes": [
            {
                "agent": episode.agent,
                "k_a": episode.k_a,
                "k_esc": episode.k_esc,
                "horizon": episode.horizon,
                "margin": None if episode.margin is None else round(episode.margin, 6),
                "end": episode.end,
            }
            for episode in trace.episodes
        ],
        "safety_violations": len(trace.violations),
        "degraded_solves": kinds.get("degraded_solve", 0),
        "events": kinds,
        "gains": asdict(trace.config.gains),
    }


def emit_trace(trace: SimTrace, out_dir: Path) -> None:
    """Writes ``trace.csv`` and ``summary.yaml`` (and ``rollouts.csv`` when rollouts were kept) into ``out_dir``."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    writer.writerows(row.cells() for row in trace.rows)
    atomic_write(out_dir / "trace.csv", buffer.getvalue())
    atomic_write(out_dir / "summary.yaml", yaml.safe_dump(summarize(trace), sort_keys=False))
    if trace.rollouts:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(ROLLOUT_COLUMNS)
        for tick, agent, states in trace.rollouts:
            for index, state in enumerate(states.tolist()):
                writer.writerow([tick, agent, index] + [format_float(v) for v in state])
        atomic_write(out_dir / "rollouts.csv", buffer.getvalue())


def resolve_config(scenario: Optional[Path], preset: Optional[str], **overrides: Any) -> ScenarioConfig:
    """Loads a scenario file or builds a named preset, then applies the non-``None`` overrides."""
    if scenario is not None and preset is not None:
        raise ConfigurationError("Only one of `scenario` or `preset` can be set.")
    config = load_config(scenario) if scenario is not None else ScenarioConfig.from_name(preset or "nominal")
    overrides = {key: value for key, value in overrides.items() if value is not None}
    if overrides:
        config = replace(config, **overrides)
    config.validate()
    return config


def setup(
    scenario: Optional[Path] = None,
    preset: Optional[str] = None,
    seed: Optional[int] = None,
    out_dir: Path = Path("out/run"),
    max_ticks: Optional[int] = None,
    verbose_rollouts: bool = False,
    logger_name: Optional[Literal["csv", "tensorboard"]] = None,
    workers: int = 1,
) -> None:
    """Simulate a mission and write its trace.

    Arguments:
        scenario: Path to a scenario YAML file. Mutually exclusive with ``preset``.
        preset: Name of a scenario preset in ``safeswarm.config``. Defaults to ``nominal`` when neither is given.
        seed: Overrides the scenario seed.
        out_dir: Directory in which ``trace.csv`` and ``summary.yaml`` are written.
        max_ticks: Overrides the scenario tick limit.
        verbose_rollouts: Also write every planned escape rollout to ``rollouts.csv``.
        logger_name: Optional logger that receives per-tick scalars.
        workers: Number of threads the per-agent work of a tick fans out to.
    """
    try:
        config = resolve_config(scenario, preset, seed=seed, max_ticks=max_ticks)
    except ConfigurationError as ex:
        exit_with(ex, 1)
    out_dir = init_out_dir(out_dir)
    L.seed_everything(config.seed)
    logger = choose_logger(logger_name, out_dir, name=f"run-{config.name or 'scenario'}") if logger_name else None
    main(config, out_dir, verbose_rollouts, logger, workers)


def main(config: ScenarioConfig, out_dir: Path, verbose_rollouts: bool, logger: Optional[Any], workers: int) -> None:
    try:
        trace = run(config, workers=workers, verbose_rollouts=verbose_rollouts, metrics_logger=logger)
    except ConfigurationError as ex:
        exit_with(ex, 1)
    except NumericalError as ex:
        exit_with(ex, 3)
    emit_trace(trace, out_dir)
    summary = summarize(trace)
    print(f"Ran {summary['ticks']} ticks, completed={summary['completed']}", file=sys.stderr)
    print(f"Wrote the trace to {str(out_dir / 'trace.csv')!r}", file=sys.stderr)
    violations = trace.violations
    if violations:
        for episode in violations:
            print(
                f"agent {episode.agent}: margin {episode.margin:.3f} m at tick {episode.k_a + episode.k_esc}",
                file=sys.stderr,
            )
        raise SystemExit(2)


if __name__ == "__main__":
    CLI(setup)
