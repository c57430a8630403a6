# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

"""Robust tracking controller of the virtual target."""
from typing import Callable, Optional

import torch

from safeswarm.dynamics import POSITION, VELOCITY
from safeswarm.estimation import EstimatorState
from safeswarm.safety import repulsive_gradient
from safeswarm.utils import as_tensor, clamp_norm

# any controller with the signature of `pd_control` can serve as the robust controller
RobustController = Callable[..., torch.Tensor]


def pd_control(
    target_pos: torch.Tensor,
    target_vel: torch.Tensor,
    est: EstimatorState,
    k_p: float,
    k_i: float,
    a_max: float = 2.0,
) -> torch.Tensor:
    u = k_p * (as_tensor(target_pos) - est.x_hat[POSITION]) + k_i * (as_tensor(target_vel) - est.x_hat[VELOCITY])
    return clamp_norm(u, a_max)


def avoid_reentry(
    u: torch.Tensor,
    est: EstimatorState,
    attacker: Optional[torch.Tensor],
    radius: float,
    beta: float,
    a_max: float,
) -> torch.Tensor:
    """Adds the repulsive-potential descent direction at the estimated attacker position to a robust command."""
    if attacker is None:
        return u
    return clamp_norm(u - repulsive_gradient(est.x_hat[POSITION], attacker, radius, beta), a_max)
