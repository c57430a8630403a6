# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

"""This script prints the escape time of a scenario's tolerable estimation error"""
from pathlib import Path
from typing import Optional

import torch

from safeswarm.estimation import StackedModel, steady_state
from safeswarm.safety import EscapeQuery, escape_time as compute_escape_time
from safeswarm.simulate import resolve_config
from safeswarm.utils import CLI, DTYPE, ConfigurationError, NumericalError, as_tensor, exit_with


def escape_time(
    scenario: Optional[Path] = None, preset: Optional[str] = None, p_at_attack: Optional[float] = None
) -> int:
    """Prints the number of ticks an agent may stay GPS-denied before its tolerable error becomes untrustworthy.

    Args:
        scenario: Path to a scenario YAML file. Mutually exclusive with ``preset``.
        preset: Name of a scenario preset in ``safeswarm.config``.
        p_at_attack: Scale of an isotropic error covariance at the attack. By default, the covariance the fused
            estimator settles to is used.
    """
    try:
        config = resolve_config(scenario, preset)
        model = config.agent_model()
        if p_at_attack is None:
            P = steady_state(model, StackedModel.fused(model), config.estimator.p0 * torch.eye(model.n, dtype=DTYPE))
        else:
            P = p_at_attack * torch.eye(model.n, dtype=DTYPE)
        query = EscapeQuery(as_tensor(config.escape.zeta), P, config.escape.alpha)
        k_esc = compute_escape_time(model, None, query)
    except ConfigurationError as ex:
        exit_with(ex, 1)
    except NumericalError as ex:
        exit_with(ex, 3)
    print(k_esc)
    return k_esc


if __name__ == "__main__":
    CLI(escape_time)
