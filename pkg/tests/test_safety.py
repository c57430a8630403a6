# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

import math

import pytest
import torch

ATTACKER = torch.tensor([200.0, 200.0], dtype=torch.float64)


def reference_escape_time(model, zeta, P, alpha):
    """Straight recursion of the GPS-denied covariance with explicit inverses."""
    from safeswarm.detection import chi2_quantile

    threshold = chi2_quantile(alpha, len(zeta))
    zeta = torch.tensor(zeta, dtype=torch.float64)
    C, D, S_y = model.Ci, torch.eye(2, dtype=torch.float64), model.sigma_i
    M = C @ model.A - D @ C
    k = 0
    while (zeta @ torch.linalg.inv(P) @ zeta).item() >= threshold:
        K = (model.A @ P @ M.mT + model.sigma_w @ C.mT) @ torch.linalg.inv(M @ P @ M.mT + C @ model.sigma_w @ C.mT + S_y)
        F = model.A - K @ M
        G = torch.eye(4, dtype=torch.float64) - K @ C
        P = F @ P @ F.mT + G @ model.sigma_w @ G.mT + K @ S_y @ K.mT
        k += 1
    return k


def test_escape_time_regression(model):
    from safeswarm.safety import EscapeQuery, escape_time

    P = torch.eye(4, dtype=torch.float64)
    k_esc = escape_time(model, None, EscapeQuery([5.0, 5.0, 1.0, 1.0], P))
    assert k_esc == reference_escape_time(model, [5.0, 5.0, 1.0, 1.0], P, 0.01)
    assert k_esc == 14


def test_escape_time_is_monotone_in_zeta(model):
    from safeswarm.safety import EscapeQuery, escape_time

    P = torch.eye(4, dtype=torch.float64)
    times = [escape_time(model, None, EscapeQuery([5.0 * c, 5.0 * c, c, c], P)) for c in (1, 2, 4)]
    assert times == sorted(times)


def test_escape_time_is_zero_when_already_untrustworthy(model):
    from safeswarm.safety import EscapeQuery, escape_time

    assert escape_time(model, None, EscapeQuery([0.1] * 4, torch.eye(4, dtype=torch.float64))) == 0


def test_escape_time_ignores_the_tick_label(model):
    from safeswarm.estimation import StackedModel
    from safeswarm.safety import EscapeQuery, escape_time

    P = torch.eye(4, dtype=torch.float64)
    # the fused model is replaced by the GPS-denied one
    a = escape_time(model, StackedModel.fused(model), EscapeQuery([5.0, 5.0, 1.0, 1.0], P, k_a=0))
    b = escape_time(model, None, EscapeQuery([5.0, 5.0, 1.0, 1.0], P, k_a=1234))
    assert a == b


def test_position_only_zeta(model):
    from safeswarm.safety import EscapeQuery, escape_time

    P = torch.eye(4, dtype=torch.float64)
    query = EscapeQuery([5.0, 5.0], P)
    assert query.df == 2
    assert escape_time(model, None, query) > 0


def test_escape_time_cap(model, monkeypatch):
    import safeswarm.safety as safety
    from safeswarm.safety import EscapeQuery, escape_time
    from safeswarm.utils import NumericalError

    monkeypatch.setattr(safety, "MAX_ESCAPE_TICKS", 3)
    with pytest.raises(NumericalError, match="within 3 ticks"):
        escape_time(model, None, EscapeQuery([1e6] * 4, torch.eye(4, dtype=torch.float64)))


@pytest.mark.parametrize("zeta", [[0.0, 1.0, 1.0, 1.0], [-1.0, 1.0, 1.0, 1.0], [1.0] * 5])
def test_escape_query_validation(zeta):
    from safeswarm.safety import EscapeQuery
    from safeswarm.utils import ConfigurationError

    with pytest.raises(ConfigurationError):
        EscapeQuery(zeta, torch.eye(4, dtype=torch.float64))


@pytest.mark.parametrize(("D", "expected"), [(60.0, 0.0), (30.0, 0.0), (15.0, 10000 / (2 * 900))])
def test_repulsive_potential(D, expected):
    from safeswarm.safety import repulsive_potential

    assert repulsive_potential(D, 30.0, 10000.0) == pytest.approx(expected, abs=1e-9)


def test_repulsive_potential_shape():
    from safeswarm.safety import MIN_DISTANCE, repulsive_potential

    values = [repulsive_potential(D, 30.0, 10000.0) for D in torch.linspace(0.01, 30.0, 3000).tolist()]
    assert all(b < a for a, b in zip(values, values[1:]))
    assert repulsive_potential(30.0 - 1e-9, 30.0, 10000.0) == pytest.approx(0.0, abs=1e-9)
    assert repulsive_potential(0.0, 30.0, 10000.0) == repulsive_potential(MIN_DISTANCE, 30.0, 10000.0)


def test_default_escape_cost_ignores_positions_outside_the_range(model):
    from safeswarm.args import EscapeArgs
    from safeswarm.safety import EscProblem, _cost, repulsive_potential

    escape = EscapeArgs()
    x0 = torch.cat([ATTACKER + torch.tensor([35.0, 0.0], dtype=torch.float64), torch.zeros(2, dtype=torch.float64)])
    problem = EscProblem(
        horizon=10,
        Q=escape.q * torch.eye(4),
        R=escape.r * torch.eye(2),
        beta=escape.beta,
        r_effect=30.0,
        attacker=ATTACKER,
        goal_provider=lambda i: x0,
        k_esc=0,
        buffer=escape.buffer,
    )
    assert problem.radius == 30.0
    assert repulsive_potential(35.0, 30.0, escape.beta) == 0.0
    controls = torch.zeros(10, 2, dtype=torch.float64)
    assert _cost(problem, model, x0, controls, x0.expand(10, 4), escape.speed_penalty).item() == 0.0


def test_repulsive_gradient_matches_autograd():
    from safeswarm.safety import _potential, repulsive_gradient

    position = torch.tensor([210.0, 195.0], dtype=torch.float64, requires_grad=True)
    (expected,) = torch.autograd.grad(_potential(torch.linalg.vector_norm(position - ATTACKER), 30.0, 1e4), position)
    torch.testing.assert_close(repulsive_gradient(position.detach(), ATTACKER, 30.0, 1e4), expected)
    outside = repulsive_gradient(torch.tensor([300.0, 200.0]), ATTACKER, 30.0, 1e4)
    assert torch.count_nonzero(outside) == 0


def test_rollout_matches_recursion(model):
    from safeswarm.safety import rollout

    generator = torch.Generator().manual_seed(0)
    x0 = torch.tensor([1.0, 2.0, 0.5, -0.5], dtype=torch.float64)
    controls = torch.randn(30, 2, generator=generator, dtype=torch.float64)
    states = rollout(model, x0, controls)
    x = x0
    assert states.shape == (31, 4)
    for i, u in enumerate(controls):
        x = model.A @ x + model.B @ u
        torch.testing.assert_close(states[i + 1], x)


def test_rollout_responses_are_kept_per_model(model):
    from safeswarm.dynamics import AgentModel
    from safeswarm.safety import rollout

    x0 = torch.zeros(4, dtype=torch.float64)
    rollout(model, x0, torch.zeros(30, 2, dtype=torch.float64))
    _, forced = model.response_cache[30]
    rollout(model, x0, torch.ones(30, 2, dtype=torch.float64))
    assert model.response_cache[30][1] is forced

    other = AgentModel.double_integrator()
    rollout(other, x0, torch.zeros(5, 2, dtype=torch.float64))
    assert list(other.response_cache) == [5]
    assert list(model.response_cache) == [30]


def test_retract(model):
    from safeswarm.dynamics import VELOCITY
    from safeswarm.safety import retract, rollout

    x0 = torch.tensor([0.0, 0.0, 4.5, 0.0], dtype=torch.float64)
    feasible = torch.full((10, 2), 0.1, dtype=torch.float64)
    torch.testing.assert_close(retract(model, torch.zeros(4, dtype=torch.float64), feasible, 5.0, 2.0), feasible)

    controls = torch.tensor([[3.0, 0.0]] * 20, dtype=torch.float64)
    retracted = retract(model, x0, controls, 5.0, 2.0)
    assert (torch.linalg.vector_norm(retracted, dim=-1) <= 2.0 + 1e-9).all()
    speeds = torch.linalg.vector_norm(rollout(model, x0, retracted)[:, VELOCITY], dim=-1)
    assert (speeds <= 5.0 + 1e-9).all()


def goal_toward(target: torch.Tensor):
    def provider(i: int) -> torch.Tensor:
        return torch.cat([target, torch.zeros(2, dtype=torch.float64)])

    return provider


def test_solve_esc_zero_cost_fixed_point(model):
    from safeswarm.estimation import EstimatorState
    from safeswarm.safety import EscProblem, solve_esc

    x0 = torch.tensor([10.0, 10.0, 0.0, 0.0], dtype=torch.float64)
    problem = EscProblem(
        horizon=20,
        Q=torch.eye(4),
        R=torch.eye(2),
        beta=1e4,
        r_effect=30.0,
        attacker=None,
        goal_provider=lambda i: x0,
        k_esc=5,
    )
    solution = solve_esc(problem, EstimatorState(x0, torch.eye(4, dtype=torch.float64)), model)
    assert solution.converged
    assert torch.linalg.vector_norm(solution.controls, dim=-1).max().item() <= 1e-6


def test_stationarity_is_checked_after_retraction(model, monkeypatch):
    import safeswarm.safety as safety
    from safeswarm.estimation import EstimatorState
    from safeswarm.safety import EscProblem, solve_esc

    x0 = torch.zeros(4, dtype=torch.float64)
    goal = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
    problem = EscProblem(
        horizon=5,
        Q=torch.eye(4),
        R=torch.eye(2),
        beta=1e4,
        r_effect=30.0,
        attacker=None,
        goal_provider=lambda i: goal,
        k_esc=0,
    )
    est = EstimatorState(x0, torch.eye(4, dtype=torch.float64))
    assert solve_esc(problem, est, model).converged

    monkeypatch.setattr(safety, "retract", lambda model, x0, controls, v_max, a_max: 0.5 * controls)
    solution = solve_esc(problem, est, model)
    assert solution.degraded
    assert solution.cost < solution.initial_cost


def escape_problem(beta: float = 1e4):
    from safeswarm.safety import EscProblem

    return EscProblem(
        horizon=50,
        Q=1e-4 * torch.eye(4),
        R=1e-4 * torch.eye(2),
        beta=beta,
        r_effect=30.0,
        attacker=ATTACKER,
        goal_provider=goal_toward(ATTACKER + torch.tensor([0.0, 150.0], dtype=torch.float64)),
        k_esc=30,
        buffer=10.0,
    )


def test_solve_esc_escapes(model):
    from safeswarm.dynamics import POSITION, VELOCITY
    from safeswarm.estimation import EstimatorState
    from safeswarm.safety import initial_guess, solve_esc

    problem = escape_problem()
    est = EstimatorState(torch.tensor([200.0, 225.0, 0.0, 0.0], dtype=torch.float64), torch.eye(4, dtype=torch.float64))
    solution = solve_esc(problem, est, model)

    assert solution.controls.shape == (50, 2)
    assert solution.cost <= solution.initial_cost + 1e-9
    assert initial_guess(problem, est, model).shape == (50, 2)
    assert (torch.linalg.vector_norm(solution.controls, dim=-1) <= model.a_max + 1e-6).all()
    assert (torch.linalg.vector_norm(solution.rollout[:, VELOCITY], dim=-1) <= model.v_max + 1e-6).all()
    distance = torch.linalg.vector_norm(solution.rollout[problem.k_esc, POSITION] - ATTACKER).item()
    assert distance > 30.0


def test_stronger_penalty_does_not_pull_closer(model):
    from safeswarm.dynamics import POSITION
    from safeswarm.estimation import EstimatorState
    from safeswarm.safety import solve_esc

    est = EstimatorState(torch.tensor([200.0, 225.0, 0.0, 0.0], dtype=torch.float64), torch.eye(4, dtype=torch.float64))
    distances = []
    for beta in (1e3, 1e4, 1e5):
        solution = solve_esc(escape_problem(beta), est, model)
        distances.append(torch.linalg.vector_norm(solution.rollout[30, POSITION] - ATTACKER).item())
    assert all(b >= a - 0.1 for a, b in zip(distances, distances[1:]))


def test_warm_start_is_padded(model):
    from safeswarm.estimation import EstimatorState
    from safeswarm.safety import solve_esc

    est = EstimatorState(torch.tensor([200.0, 225.0, 0.0, 0.0], dtype=torch.float64), torch.eye(4, dtype=torch.float64))
    first = solve_esc(escape_problem(), est, model)
    second = solve_esc(escape_problem(), est, model, warm_start=first.controls[1:])
    assert second.controls.shape == first.controls.shape
    assert second.cost <= second.initial_cost + 1e-9


def test_esc_problem_validation():
    from safeswarm.safety import EscProblem
    from safeswarm.utils import ConfigurationError

    with pytest.raises(ConfigurationError, match="must cover the escape time"):
        EscProblem(10, torch.eye(4), torch.eye(2), 1e4, 30.0, ATTACKER, goal_toward(ATTACKER), k_esc=11)
    with pytest.raises(ConfigurationError, match="Q must be symmetric positive definite"):
        EscProblem(10, torch.zeros(4, 4), torch.eye(2), 1e4, 30.0, ATTACKER, goal_toward(ATTACKER), k_esc=5)
    with pytest.raises(ConfigurationError, match="beta"):
        EscProblem(10, torch.eye(4), torch.eye(2), 0.0, 30.0, ATTACKER, goal_toward(ATTACKER), k_esc=5)


def test_safety_margin():
    from safeswarm.safety import safety_margin
    from safeswarm.utils import ContractError

    trajectory = [torch.tensor([200.0 + 10.0 * k, 200.0, 10.0, 0.0], dtype=torch.float64) for k in range(10)]
    assert safety_margin(trajectory, ATTACKER, 30.0, 0, 0) == pytest.approx(-30.0)
    assert safety_margin(trajectory, ATTACKER, 30.0, 2, 3) == pytest.approx(20.0)
    assert safety_margin(torch.stack(trajectory), ATTACKER, 30.0, 9, 0) == pytest.approx(60.0)
    with pytest.raises(ContractError, match="tick 10 is missing"):
        safety_margin(trajectory, ATTACKER, 30.0, 6, 4)
    assert math.isfinite(safety_margin(trajectory, ATTACKER, 0.0, 1, 1))
