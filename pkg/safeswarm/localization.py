# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

"""Unscented Kalman filter with a sliding window of stacked outputs, used to locate the spoofing device."""
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Tuple

import torch
from typing_extensions import Self

from safeswarm.utils import (
    DTYPE,
    ConfigurationError,
    NumericalError,
    as_tensor,
    cholesky,
    min_eigenvalue,
    psd_sqrt,
    symmetrize,
)

log = logging.getLogger(__name__)

MeasurementFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class SignalModel:
    """Free-space received power of the injected signal, ``p0 - 20 log10(D / d0)`` dB with ``D`` floored at ``d0``."""

    p0: float = -40.0
    d0: float = 1.0
    exponent: float = 2.0

    def __post_init__(self) -> None:
        if self.d0 <= 0:
            raise ConfigurationError(f"d0 must be positive, got {self.d0}")

    def __call__(self, points: torch.Tensor, uav_position: torch.Tensor) -> torch.Tensor:
        D = torch.linalg.vector_norm(points[..., :2] - as_tensor(uav_position), dim=-1).clamp(min=self.d0)
        return self.p0 - 10.0 * self.exponent * torch.log10(D / self.d0)

    def distance(self, power: float) -> float:
        """Range to the transmitter that explains a received ``power``."""
        return max(self.d0 * 10.0 ** ((self.p0 - power) / (10.0 * self.exponent)), self.d0)


@dataclass(frozen=True)
class UkfState:
    x_hat: torch.Tensor
    P: torch.Tensor
    A_loc: torch.Tensor
    sigma_wp: torch.Tensor
    sigma_v: float
    M: int = 3
    window: Tuple[Tuple[float, torch.Tensor], ...] = ()
    """Most recent sample first, each with the UAV position it was taken at"""

    def __post_init__(self) -> None:
        for name in ("x_hat", "P", "A_loc", "sigma_wp"):
            object.__setattr__(self, name, as_tensor(getattr(self, name)))
        n = self.x_hat.shape[0]
        issues = []
        if self.M < 1:
            issues.append(f"The window length must be at least 1, got {self.M}")
        for name in ("P", "A_loc", "sigma_wp"):
            if tuple(getattr(self, name).shape) != (n, n):
                issues.append(f"{name} must be {n}x{n}, got shape {tuple(getattr(self, name).shape)}")
        if tuple(self.A_loc.shape) == (n, n) and torch.linalg.matrix_rank(self.A_loc) < n:
            issues.append("A_loc must be invertible")
        if self.sigma_v <= 0:
            issues.append(f"sigma_v must be positive, got {self.sigma_v}")
        if issues:
            raise ConfigurationError("\n".join(issues))

    @classmethod
    def static(cls, prior: torch.Tensor, prior_var: float, sigma_v: float, sigma_wp: float = 0.0, M: int = 3) -> Self:
        prior = as_tensor(prior)
        eye = torch.eye(prior.shape[0], dtype=DTYPE)
        return cls(x_hat=prior, P=prior_var * eye, A_loc=eye, sigma_wp=sigma_wp * eye, sigma_v=sigma_v, M=M)

    @property
    def n(self) -> int:
        return self.x_hat.shape[0]

    def push(self, measurement: float, uav_position: torch.Tensor) -> Self:
        window = ((float(measurement), as_tensor(uav_position)),) + self.window
        return replace(self, window=window[: self.M])


def ukf_predict(st: UkfState) -> UkfState:
    x_hat = st.A_loc @ st.x_hat
    P = symmetrize(st.A_loc @ st.P @ st.A_loc.mT + st.sigma_wp)
    return replace(st, x_hat=x_hat, P=P)


def sigma_points(x_hat: torch.Tensor, P: torch.Tensor) -> torch.Tensor:
    """The ``2n`` points ``x_hat ± row_i(S)`` where ``Sᵀ S = n P``."""
    n = x_hat.shape[0]
    P = symmetrize(P)
    if min_eigenvalue(P) < -1e-9:
        raise NumericalError("Cannot spread sigma points over an indefinite covariance")
    S = psd_sqrt(n * P)
    return torch.cat([x_hat + S, x_hat - S])


def ukf_innovation(
    st: UkfState, measurement_fn: MeasurementFn, uav_positions: Sequence[torch.Tensor]
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Predicted stacked output, its covariance and the state-output cross covariance under uniform weights.

    Window slot ``j`` (0 is the newest) maps the sigma points back ``j`` ticks through ``A_loc⁻¹``.
    """
    points = sigma_points(st.x_hat, st.P)
    count = points.shape[0]
    back = torch.linalg.inv(st.A_loc)
    columns, shifted = [], points
    for j, position in enumerate(uav_positions):
        if j:
            shifted = shifted @ back.mT
        columns.append(measurement_fn(shifted, as_tensor(position)).reshape(count))
    outputs = torch.stack(columns, dim=1)
    y_bar = outputs.mean(dim=0)
    dY = outputs - y_bar
    dX = points - st.x_hat
    P_y = dY.mT @ dY / count + st.sigma_v * torch.eye(len(columns), dtype=DTYPE)
    P_xy = dX.mT @ dY / count
    return y_bar, symmetrize(P_y), P_xy


def ukf_update(
    st: UkfState,
    stacked_measurements: Sequence[float],
    uav_positions: Sequence[torch.Tensor],
    sig: MeasurementFn,
) -> UkfState:
    """Measurement update over a window of stacked outputs, most recent first."""
    y = as_tensor(stacked_measurements).reshape(-1)
    if y.shape[0] != len(uav_positions) or y.shape[0] < 1:
        raise ConfigurationError(f"Got {y.shape[0]} measurements for {len(uav_positions)} UAV positions")
    y_bar, P_y, P_xy = ukf_innovation(st, sig, uav_positions)
    L, info = torch.linalg.cholesky_ex(P_y)
    if info.item() != 0:
        log.warning("Singular output covariance in the localization update, regularized by 1e-9 I")
        L = cholesky(P_y + 1e-9 * torch.eye(P_y.shape[0], dtype=DTYPE), "output covariance")
    K = torch.cholesky_solve(P_xy.mT, L).mT
    x_hat = st.x_hat + K @ (y - y_bar)
    P = symmetrize(st.P - K @ P_y @ K.mT)
    return replace(st, x_hat=x_hat, P=P)


class Localizer:
    """Runs the windowed filter on the injected-signal strength one agent hears while it is spoofed."""

    def __init__(
        self,
        prior: torch.Tensor,
        prior_var: float = 25.0,
        sigma_v: float = 0.25,
        sigma_wp: float = 0.0,
        window: int = 3,
        signal: Optional[SignalModel] = None,
    ) -> None:
        self.state = UkfState.static(prior, prior_var, sigma_v, sigma_wp, window)
        self.signal = signal or SignalModel()
        self.updates = 0

    @property
    def estimate(self) -> torch.Tensor:
        return self.state.x_hat

    @property
    def trace(self) -> float:
        return torch.trace(self.state.P).item()

    def push(self, power: float, uav_position: torch.Tensor) -> torch.Tensor:
        if not math.isfinite(power):
            raise NumericalError(f"Received a non-finite signal strength {power}")
        self.state = self.state.push(power, uav_position)
        if len(self.state.window) == self.state.M:
            measurements = [sample for sample, _ in self.state.window]
            positions = [position for _, position in self.state.window]
            self.state = ukf_update(ukf_predict(self.state), measurements, positions, self.signal)
            self.updates += 1
        return self.estimate
