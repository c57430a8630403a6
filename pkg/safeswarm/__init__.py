# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

import logging
import re

from lightning_utilities.core.imports import RequirementCache

from safeswarm.config import ScenarioConfig
from safeswarm.dynamics import AgentModel
from safeswarm.estimation import ResilientEstimator
from safeswarm.simulate import SimTrace, run

_LIGHTNING_AVAILABLE = RequirementCache("lightning>=2.2.0")
if not bool(_LIGHTNING_AVAILABLE):
    raise ImportError(
        "safeswarm requires lightning>=2.2.0. Please run:\n"
        f" pip install -U lightning\n{str(_LIGHTNING_AVAILABLE)}"
    )

# Seeding prints the seed at the INFO level of the fabric logger on every run of a sweep
pattern = re.compile("Seed set to .*")
logging.getLogger("lightning.fabric.utilities.seed").addFilter(lambda record: not pattern.search(record.getMessage()))

__all__ = ["AgentModel", "ResilientEstimator", "ScenarioConfig", "SimTrace", "run"]
