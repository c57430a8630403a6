# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

"""GPS spoofing estimation and chi-square CUSUM detection."""
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from typing import Optional, Tuple

import torch
from typing_extensions import Self

from safeswarm.dynamics import AgentModel
from safeswarm.utils import DTYPE, ConfigurationError, as_tensor, quadratic_form, symmetrize


class Decision(str, Enum):
    TRUSTED = "trusted"
    ATTACKED = "attacked"


@lru_cache(maxsize=None)
def chi2_quantile(alpha: float, df: int) -> float:
    """Upper-tail quantile ``q`` of the chi-square distribution, ``P[X > q] = alpha``.

    Inverts the regularized upper incomplete gamma function by bisection.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")
    if int(df) != df or df < 1:
        raise ConfigurationError(f"df must be a positive integer, got {df}")
    shape = torch.tensor(df / 2, dtype=DTYPE)

    def upper_tail(q: float) -> float:
        return torch.special.gammaincc(shape, torch.tensor(q / 2, dtype=DTYPE)).item()

    lo, hi = 0.0, float(df)
    while upper_tail(hi) > alpha:
        lo, hi = hi, 2 * hi
    while hi - lo > 1e-11:
        mid = 0.5 * (lo + hi)
        if upper_tail(mid) > alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class DetectorState:
    S: float = 0.0
    delta: float = 0.15
    alpha: float = 0.01
    df: int = 2
    decision: Decision = Decision.TRUSTED
    threshold: float = field(init=False)

    def __post_init__(self) -> None:
        if self.S < 0:
            raise ConfigurationError(f"The CUSUM statistic must be non-negative, got {self.S}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigurationError(f"delta must lie in (0, 1), got {self.delta}")
        object.__setattr__(self, "threshold", chi2_quantile(self.alpha, self.df) / (1.0 - self.delta))

    @classmethod
    def for_model(cls, model: AgentModel, delta: float = 0.15, alpha: float = 0.01, df: Optional[int] = None) -> Self:
        return cls(delta=delta, alpha=alpha, df=model.m_g if df is None else df)


def estimate_attack(
    y_g: torch.Tensor, x_hat_prev: torch.Tensor, u_prev: torch.Tensor, model: AgentModel
) -> torch.Tensor:
    """GPS output minus its one-step prediction from the previous estimate."""
    return as_tensor(y_g) - model.Cg @ (model.A @ as_tensor(x_hat_prev) + model.B @ as_tensor(u_prev))


def innovation_cov(model: AgentModel, P_prev: torch.Tensor) -> torch.Tensor:
    return symmetrize(model.Cg @ (model.A @ P_prev @ model.A.mT + model.sigma_w) @ model.Cg.mT + model.sigma_g)


def normalized_statistic(d_hat: torch.Tensor, P_d: torch.Tensor) -> float:
    return quadratic_form(d_hat, P_d, "attack innovation covariance")


def cusum_step(det: DetectorState, d_hat: torch.Tensor, P_d: torch.Tensor) -> Tuple[DetectorState, Decision]:
    S = det.delta * det.S + normalized_statistic(d_hat, P_d)
    if S > det.threshold:
        decision = Decision.ATTACKED
    elif S < det.threshold:
        decision = Decision.TRUSTED
    else:
        decision = det.decision
    return replace(det, S=S, decision=decision), decision
