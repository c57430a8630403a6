# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

"""Resilient GPS/IMU state estimation with an optimal gain and a GPS-denied fallback."""
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import torch
from typing_extensions import Self

from safeswarm.dynamics import AgentModel, MeasurementPair
from safeswarm.utils import DTYPE, ConfigurationError, NumericalError, as_tensor, min_eigenvalue, spd_solve, symmetrize


class Mode(str, Enum):
    FUSED = "fused"
    IMU_ONLY = "imu_only"


@dataclass(frozen=True)
class EstimatorState:
    x_hat: torch.Tensor
    P: torch.Tensor
    mode: Mode = Mode.FUSED


@dataclass(frozen=True)
class StackedModel:
    """Joint output map ``y = [y_g; y_i]`` where ``D`` selects the rows that measure a state difference."""

    C: torch.Tensor
    D: torch.Tensor
    sigma_y: torch.Tensor
    gps_rows: int

    def __post_init__(self) -> None:
        if not torch.allclose(self.D @ self.D, self.D):
            raise ConfigurationError("D must be an idempotent selector")
        if self.C.shape[0] != self.D.shape[0] or self.sigma_y.shape != self.D.shape:
            raise ConfigurationError(
                f"C {tuple(self.C.shape)}, D {tuple(self.D.shape)} and sigma_y {tuple(self.sigma_y.shape)} disagree"
            )
        if min_eigenvalue(self.sigma_y) <= 0:
            raise ConfigurationError("sigma_y must be positive definite")

    @classmethod
    def fused(cls, model: AgentModel) -> Self:
        C = torch.cat([model.Cg, model.Ci])
        D = torch.block_diag(torch.zeros(model.m_g, model.m_g, dtype=DTYPE), torch.eye(model.m_i, dtype=DTYPE))
        return cls(C=C, D=D, sigma_y=torch.block_diag(model.sigma_g, model.sigma_i), gps_rows=model.m_g)

    @classmethod
    def imu_only(cls, model: AgentModel) -> Self:
        return cls(C=model.Ci, D=torch.eye(model.m_i, dtype=DTYPE), sigma_y=model.sigma_i, gps_rows=0)

    def stack(self, y: MeasurementPair) -> torch.Tensor:
        return torch.cat([y.y_g, y.y_i]) if self.gps_rows else y.y_i


def _innovation_map(model: AgentModel, stacked: StackedModel) -> torch.Tensor:
    # the innovation sees the previous error through C A - D C
    return stacked.C @ model.A - stacked.D @ stacked.C


def optimal_gain(model: AgentModel, stacked: StackedModel, P_prev: torch.Tensor) -> torch.Tensor:
    """The gain that minimizes ``trace(P_k)`` of the covariance recursion."""
    M = _innovation_map(model, stacked)
    cross = model.A @ P_prev @ M.mT + model.sigma_w @ stacked.C.mT
    innovation = M @ P_prev @ M.mT + stacked.C @ model.sigma_w @ stacked.C.mT + stacked.sigma_y
    return spd_solve(innovation, cross.mT, "innovation covariance").mT


def propagate_covariance(
    model: AgentModel, stacked: StackedModel, P_prev: torch.Tensor, K: torch.Tensor
) -> torch.Tensor:
    """Error covariance after one update with an arbitrary gain ``K``."""
    M = _innovation_map(model, stacked)
    F = model.A - K @ M
    G = torch.eye(model.n, dtype=DTYPE) - K @ stacked.C
    return symmetrize(F @ P_prev @ F.mT + G @ model.sigma_w @ G.mT + K @ stacked.sigma_y @ K.mT)


def steady_state(
    model: AgentModel, stacked: StackedModel, P0: torch.Tensor, tol: float = 1e-10, max_ticks: int = 100_000
) -> torch.Tensor:
    """Iterates the optimal-gain covariance recursion from ``P0`` until it stops moving."""
    P = symmetrize(as_tensor(P0))
    for _ in range(max_ticks):
        P_next = propagate_covariance(model, stacked, P, optimal_gain(model, stacked, P))
        if (P_next - P).abs().max().item() < tol:
            return P_next
        P = P_next
    raise NumericalError(f"The error covariance did not settle within {max_ticks} ticks")


def update(
    est: EstimatorState,
    model: AgentModel,
    stacked: StackedModel,
    u_prev: torch.Tensor,
    y: MeasurementPair,
    gps_trusted: bool = True,
) -> EstimatorState:
    """One estimator tick.

    When the GPS is not trusted the gain is re-derived over the IMU output map alone, which zeroes the GPS block and
    keeps the IMU block optimal.
    """
    if not gps_trusted and stacked.gps_rows:
        stacked = StackedModel.imu_only(model)
    u_prev = as_tensor(u_prev)
    K = optimal_gain(model, stacked, est.P)
    prediction = model.A @ est.x_hat + model.B @ u_prev
    innovation = stacked.stack(y) - stacked.C @ prediction + stacked.D @ stacked.C @ est.x_hat
    x_hat = prediction + K @ innovation
    P = propagate_covariance(model, stacked, est.P, K)
    if not (torch.isfinite(x_hat).all() and torch.isfinite(P).all()):
        raise NumericalError("The state estimate became non-finite")
    return EstimatorState(x_hat=x_hat, P=P, mode=Mode.FUSED if stacked.gps_rows else Mode.IMU_ONLY)


class ResilientEstimator:
    """The detection estimator and the GPS-denied control estimator of one agent.

    The detection estimator always fuses GPS and IMU, spoofed or not. With ``drop_gps_when_attacked`` it runs on the
    IMU alone while the detector flags the GPS. The control estimator exists only while the agent is attacked; it is
    seeded from the last detection estimate taken before the attack was flagged and never sees the GPS.
    """

    def __init__(
        self, model: AgentModel, x0: torch.Tensor, P0: torch.Tensor, drop_gps_when_attacked: bool = False
    ) -> None:
        self.model = model
        self.fused = StackedModel.fused(model)
        self.imu = StackedModel.imu_only(model)
        self.drop_gps_when_attacked = drop_gps_when_attacked
        self.est1 = EstimatorState(as_tensor(x0), symmetrize(as_tensor(P0)))
        self.est2: Optional[EstimatorState] = None

    @property
    def attacked(self) -> bool:
        return self.est2 is not None

    @property
    def control_estimate(self) -> EstimatorState:
        return self.est1 if self.est2 is None else self.est2

    def step(self, u_prev: torch.Tensor, y: MeasurementPair, attacked: bool) -> EstimatorState:
        if attacked and self.est2 is None:
            self.est2 = replace(self.est1, mode=Mode.IMU_ONLY)
        elif not attacked:
            self.est2 = None
        gps_trusted = not (attacked and self.drop_gps_when_attacked)
        self.est1 = update(self.est1, self.model, self.fused, u_prev, y, gps_trusted)
        if self.est2 is not None:
            self.est2 = update(self.est2, self.model, self.imu, u_prev, y, gps_trusted=False)
        return self.control_estimate
