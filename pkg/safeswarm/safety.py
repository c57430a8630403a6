# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

"""Escape time, the repulsive potential and the escape controller (ESC)."""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import torch

from safeswarm.detection import chi2_quantile
from safeswarm.dynamics import POSITION, VELOCITY, AgentModel
from safeswarm.estimation import EstimatorState, StackedModel, optimal_gain, propagate_covariance
from safeswarm.utils import (
    DTYPE,
    ConfigurationError,
    ContractError,
    NumericalError,
    as_tensor,
    clamp_norm,
    min_eigenvalue,
    quadratic_form,
)

log = logging.getLogger(__name__)

MAX_ESCAPE_TICKS = 100_000
MIN_DISTANCE = 1e-3


@dataclass(frozen=True)
class EscapeQuery:
    zeta: torch.Tensor
    P_at_attack: torch.Tensor
    alpha: float = 0.01
    k_a: int = 0

    def __post_init__(self) -> None:
        zeta = as_tensor(self.zeta)
        if zeta.ndim != 1 or not (zeta > 0).all():
            raise ConfigurationError(f"zeta must be a strictly positive vector, got {zeta.tolist()}")
        P = as_tensor(self.P_at_attack)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or zeta.shape[0] > P.shape[0]:
            raise ConfigurationError(f"zeta of size {zeta.shape[0]} does not fit a covariance of shape {tuple(P.shape)}")
        object.__setattr__(self, "zeta", zeta)
        object.__setattr__(self, "P_at_attack", P)

    @property
    def df(self) -> int:
        return self.zeta.shape[0]


def escape_time(model: AgentModel, stacked: Optional[StackedModel], query: EscapeQuery) -> int:
    """Ticks after the attack until the GPS-denied error covariance makes ``zeta`` untrustworthy.

    The tolerance test ``zetaᵀ P⁻¹ zeta < chi2_df(alpha)`` runs on the leading ``len(zeta)`` states, so a
    position-only ``zeta`` tests the position marginal.
    """
    if stacked is None or stacked.gps_rows:
        stacked = StackedModel.imu_only(model)
    size = query.df
    threshold = chi2_quantile(query.alpha, size)
    P = query.P_at_attack
    for k in range(MAX_ESCAPE_TICKS + 1):
        if quadratic_form(query.zeta, P[:size, :size], "error covariance") < threshold:
            return k
        P = propagate_covariance(model, stacked, P, optimal_gain(model, stacked, P))
    raise NumericalError(
        f"The GPS-denied covariance did not outgrow zeta={query.zeta.tolist()} within {MAX_ESCAPE_TICKS} ticks"
    )


def _potential(D: torch.Tensor, r_effect: float, beta: float) -> torch.Tensor:
    D = D.clamp(min=MIN_DISTANCE)
    return torch.where(D < r_effect, 0.5 * beta * (1.0 / D - 1.0 / r_effect) ** 2, torch.zeros_like(D))


def repulsive_potential(D: float, r_effect: float, beta: float) -> float:
    if D <= 0:
        log.debug("Distance %s to the attacker floored at %s", D, MIN_DISTANCE)
    return _potential(torch.tensor(float(D), dtype=DTYPE), r_effect, beta).item()


def repulsive_gradient(
    position: torch.Tensor, attacker: torch.Tensor, r_effect: float, beta: float
) -> torch.Tensor:
    """Gradient of the repulsive potential with respect to the agent position."""
    offset = as_tensor(position) - as_tensor(attacker)
    D = torch.linalg.vector_norm(offset).item()
    if D >= r_effect or D < 1e-9:
        return torch.zeros_like(offset)
    floored = max(D, MIN_DISTANCE)
    dU_dD = -beta * (1.0 / floored - 1.0 / r_effect) / floored**2
    return dU_dD * offset / D


@dataclass
class EscProblem:
    horizon: int
    Q: torch.Tensor
    R: torch.Tensor
    beta: float
    r_effect: float
    attacker: Optional[torch.Tensor]
    goal_provider: Callable[[int], torch.Tensor]
    """Goal state for rollout index ``i`` in ``1..horizon``"""
    k_esc: int
    """First rollout index whose distance to the attacker is penalized"""
    v_max: float = 5.0
    a_max: float = 2.0
    buffer: float = 0.0
    """Added to ``r_effect`` inside the potential"""
    speed_penalty: float = 10.0
    max_iters: int = 300
    tol: float = 1e-4

    def __post_init__(self) -> None:
        self.Q = as_tensor(self.Q)
        self.R = as_tensor(self.R)
        if self.attacker is not None:
            self.attacker = as_tensor(self.attacker)
        issues = []
        if self.horizon < max(self.k_esc, 1):
            issues.append(f"The horizon ({self.horizon}) must cover the escape time ({self.k_esc})")
        for name in ("Q", "R"):
            W = getattr(self, name)
            if not torch.allclose(W, W.mT) or min_eigenvalue(W) <= 0:
                issues.append(f"{name} must be symmetric positive definite")
        if self.beta <= 0:
            issues.append(f"beta must be positive, got {self.beta}")
        if self.r_effect < 0 or self.buffer < 0:
            issues.append(f"r_effect and buffer must be non-negative, got {self.r_effect} and {self.buffer}")
        if issues:
            raise ConfigurationError("\n".join(issues))

    @property
    def radius(self) -> float:
        return self.r_effect + self.buffer


@dataclass(frozen=True)
class EscSolution:
    controls: torch.Tensor
    rollout: torch.Tensor
    cost: float
    initial_cost: float
    iterations: int
    converged: bool

    @property
    def degraded(self) -> bool:
        return not self.converged


def _input_response(model: AgentModel, horizon: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Free response ``A^i`` (i = 1..N) and the block-Toeplitz forced response of a horizon-``N`` rollout."""
    cached = model.response_cache.get(horizon)
    if cached is not None:
        return cached
    powers = [torch.eye(model.n, dtype=DTYPE)]
    for _ in range(horizon):
        powers.append(model.A @ powers[-1])
    free = torch.stack(powers[1:])
    impulse = torch.stack([power @ model.B for power in powers[:horizon]])
    lag = torch.arange(horizon).view(-1, 1) - torch.arange(horizon).view(1, -1)
    blocks = impulse[lag.clamp(min=0)] * (lag >= 0).to(DTYPE)[..., None, None]
    forced = blocks.permute(0, 2, 1, 3).reshape(horizon * model.n, horizon * model.m)
    model.response_cache[horizon] = (free, forced)
    return free, forced


def rollout(model: AgentModel, x0: torch.Tensor, controls: torch.Tensor) -> torch.Tensor:
    """States ``x_0 .. x_N`` of ``x_{i+1} = A x_i + B u_i``."""
    horizon = controls.shape[0]
    free, forced = _input_response(model, horizon)
    states = free @ x0 + (forced @ controls.reshape(-1)).view(horizon, model.n)
    return torch.cat([x0.unsqueeze(0), states])


def retract(model: AgentModel, x0: torch.Tensor, controls: torch.Tensor, v_max: float, a_max: float) -> torch.Tensor:
    """Scales every input back along its own direction until the acceleration and the next speed are within bounds."""
    x = as_tensor(x0)
    Bv = model.B[VELOCITY]
    feasible = []
    for u in controls:
        u = clamp_norm(u, a_max)
        base = (model.A @ x)[VELOCITY]
        w = Bv @ u
        ww = (w @ w).item()
        if ww > 0:
            bw, bb = (base @ w).item(), (base @ base).item()
            if bb <= v_max**2:
                t = (-bw + max(bw**2 - ww * (bb - v_max**2), 0.0) ** 0.5) / ww
            else:
                # already too fast: the best we can do is the scaling that slows down the most
                t = -bw / ww
            u = u * min(max(t, 0.0), 1.0)
        feasible.append(u)
        x = model.A @ x + model.B @ u
    return torch.stack(feasible) if feasible else controls.clone()


def _project(controls: torch.Tensor, a_max: float) -> torch.Tensor:
    norms = torch.linalg.vector_norm(controls, dim=-1, keepdim=True)
    return controls * torch.clamp(a_max / norms.clamp(min=1e-300), max=1.0)


def _stationarity(controls: torch.Tensor, grad: torch.Tensor, a_max: float) -> float:
    """Max-norm of the projected unit gradient step."""
    return (_project(controls - grad, a_max) - controls).abs().max().item()


def _cost(
    problem: EscProblem,
    model: AgentModel,
    x0: torch.Tensor,
    controls: torch.Tensor,
    goals: torch.Tensor,
    speed_penalty: float,
) -> torch.Tensor:
    states = rollout(model, x0, controls)
    error = states[1:] - goals
    cost = torch.einsum("ij,jk,ik->", error, problem.Q, error) + torch.einsum("ij,jk,ik->", controls, problem.R, controls)
    if problem.attacker is not None:
        offset = states[problem.k_esc :, POSITION] - problem.attacker
        D = (offset.pow(2).sum(-1) + 1e-18).sqrt()
        cost = cost + _potential(D, problem.radius, problem.beta).sum()
    if speed_penalty:
        excess = torch.relu(states[1:, VELOCITY].pow(2).sum(-1) - problem.v_max**2)
        cost = cost + speed_penalty * excess.pow(2).sum()
    return cost


def initial_guess(problem: EscProblem, est: EstimatorState, model: AgentModel) -> torch.Tensor:
    """Full acceleration straight away from the attacker, zero without one."""
    controls = torch.zeros(problem.horizon, model.m, dtype=DTYPE)
    if problem.attacker is not None:
        offset = est.x_hat[POSITION] - problem.attacker
        norm = torch.linalg.vector_norm(offset)
        if norm > 0:
            controls[:] = problem.a_max * offset / norm
    return retract(model, est.x_hat, controls, problem.v_max, problem.a_max)


def solve_esc(
    problem: EscProblem,
    est: EstimatorState,
    model: AgentModel,
    warm_start: Optional[torch.Tensor] = None,
) -> EscSolution:
    """Locally solves the escape program by spectral projected gradient over the input sequence.

    The acceleration bound is a projection, the speed bound a penalty inside the iterations and a retraction of the
    final iterate. The answer never costs more than the initial guess.

    Args:
        problem: The escape program.
        est: The GPS-denied estimate the rollout starts from.
        model: The agent model.
        warm_start: Optional input sequence from a previous solve. It is cut or padded to the horizon.
    """
    x0 = est.x_hat
    goals = torch.stack([as_tensor(problem.goal_provider(i)) for i in range(1, problem.horizon + 1)])
    guess = initial_guess(problem, est, model)

    def value(u: torch.Tensor, penalty: float = problem.speed_penalty) -> float:
        with torch.no_grad():
            return _cost(problem, model, x0, u, goals, penalty).item()

    def value_and_grad(u: torch.Tensor) -> Tuple[float, torch.Tensor]:
        u = u.detach().requires_grad_(True)
        with torch.enable_grad():
            f = _cost(problem, model, x0, u, goals, problem.speed_penalty)
            (g,) = torch.autograd.grad(f, u)
        return f.item(), g

    initial_cost = value(guess, 0.0)
    u = guess
    if warm_start is not None and warm_start.shape[0] > 0:
        u = warm_start[: problem.horizon]
        if u.shape[0] < problem.horizon:
            u = torch.cat([u, u[-1:].expand(problem.horizon - u.shape[0], -1)])
        u = retract(model, x0, u, problem.v_max, problem.a_max)
    f, g = value_and_grad(u)
    history = [f]
    best_u, best_f = u, f
    step = 1.0 / max(g.abs().max().item(), 1e-12)
    converged = False
    iterations = 0
    for iterations in range(problem.max_iters):
        if _stationarity(u, g, problem.a_max) <= problem.tol:
            converged = True
            break
        direction = _project(u - step * g, problem.a_max) - u
        slope = (g * direction).sum().item()
        reference = max(history[-10:])
        length = 1.0
        while True:
            candidate = u + length * direction
            f_candidate = value(candidate)
            if f_candidate <= reference + 1e-4 * length * slope or length < 1e-10:
                break
            length *= 0.5
        f_new, g_new = value_and_grad(candidate)
        s, y = candidate - u, g_new - g
        sy = (s * y).sum().item()
        step = min(max((s * s).sum().item() / sy, 1e-10), 1e10) if sy > 0 else 1e10
        u, f, g = candidate, f_new, g_new
        history.append(f)
        if f < best_f:
            best_u, best_f = u, f
    else:
        iterations = problem.max_iters

    if not converged:
        # the non-monotone search may end above the best iterate it visited
        u = best_u
    controls = retract(model, x0, u.detach(), problem.v_max, problem.a_max)
    if converged and not torch.equal(controls, u.detach()):
        # stationarity is judged on the inputs that are returned
        converged = _stationarity(controls, value_and_grad(controls)[1], problem.a_max) <= problem.tol
    cost = value(controls, 0.0)
    if cost > initial_cost:
        controls, cost, converged = guess, initial_cost, False
    if not converged:
        log.debug("escape solve stopped after %d iterations without reaching stationarity", iterations)
    return EscSolution(
        controls=controls,
        rollout=rollout(model, x0, controls),
        cost=cost,
        initial_cost=initial_cost,
        iterations=iterations,
        converged=converged,
    )


def safety_margin(
    true_traj: Union[torch.Tensor, Sequence[torch.Tensor]],
    attacker: torch.Tensor,
    r_effect: float,
    k_a: int,
    k_esc: int,
) -> float:
    """Distance to the attacker at tick ``k_a + k_esc`` minus the effective range. Positive means the agent escaped.

    ``true_traj`` is indexed by tick.
    """
    tick = k_a + k_esc
    if tick >= len(true_traj):
        raise ContractError(f"The trajectory covers {len(true_traj)} ticks, tick {tick} is missing")
    state = as_tensor(true_traj[tick])
    return torch.linalg.vector_norm(state[POSITION] - as_tensor(attacker)).item() - r_effect
