# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

"""Cubic Bézier desired paths and their virtual targets."""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
from typing_extensions import Self

from safeswarm.utils import ConfigurationError, as_tensor

log = logging.getLogger(__name__)

# control points of the three reference missions, they all end on the line y = 400
TABLE_PATHS: List[List[List[float]]] = [
    [[0.0, 0.0], [100.0, 100.0], [10.0, 300.0], [190.0, 400.0]],
    [[200.0, 0.0], [100.0, 100.0], [250.0, 200.0], [200.0, 400.0]],
    [[400.0, 0.0], [450.0, 150.0], [300.0, 300.0], [210.0, 400.0]],
]


@dataclass(frozen=True)
class BezierPath:
    p0: torch.Tensor
    p1: torch.Tensor
    p2: torch.Tensor
    p3: torch.Tensor

    def __post_init__(self) -> None:
        for name in ("p0", "p1", "p2", "p3"):
            point = as_tensor(getattr(self, name))
            if tuple(point.shape) != (2,):
                raise ConfigurationError(f"Control point {name} must be a 2-vector, got shape {tuple(point.shape)}")
            if not torch.isfinite(point).all():
                raise ConfigurationError(f"Control point {name} must be finite, got {point.tolist()}")
            object.__setattr__(self, name, point)

    @classmethod
    def from_points(cls, points: Sequence[Sequence[float]]) -> Self:
        if len(points) != 4:
            raise ConfigurationError(f"A cubic Bézier path needs 4 control points, got {len(points)}")
        return cls(*points)

    @property
    def control_points(self) -> torch.Tensor:
        return torch.stack([self.p0, self.p1, self.p2, self.p3])


def _clamp(s: float) -> float:
    if 0.0 <= s <= 1.0:
        return float(s)
    log.warning("Path parameter s=%s is outside [0, 1] and was clamped", s)
    return min(max(float(s), 0.0), 1.0)


def eval(path: BezierPath, s: float) -> torch.Tensor:
    s = _clamp(s)
    t = 1.0 - s
    return t**3 * path.p0 + 3 * t**2 * s * path.p1 + 3 * t * s**2 * path.p2 + s**3 * path.p3


def eval_tangent(path: BezierPath, s: float) -> torch.Tensor:
    s = _clamp(s)
    t = 1.0 - s
    return 3 * t**2 * (path.p1 - path.p0) + 6 * t * s * (path.p2 - path.p1) + 3 * s**2 * (path.p3 - path.p2)


def virtual_target(path: BezierPath, s: float, rate: float, dt: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """Position ``g(s)`` paired with the feedforward velocity ``g'(s) * rate / dt``.

    Args:
        path: The desired path.
        s: The coordination state.
        rate: Progress of ``s`` per tick.
        dt: Tick length in seconds.
    """
    return eval(path, s), eval_tangent(path, s) * (rate / dt)
