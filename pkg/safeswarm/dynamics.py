# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

"""Discrete-time agent plant: propagation, GPS/IMU measurements and the spoofing range."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import torch
from typing_extensions import Self

from safeswarm.utils import DTYPE, ConfigurationError, as_tensor, clamp_norm, min_eigenvalue, psd_sqrt

log = logging.getLogger(__name__)

# the planar double integrator keeps its position in the first two and its velocity in the last two components
POSITION = slice(0, 2)
VELOCITY = slice(2, 4)

CHANNELS = ("process", "gps", "imu", "signal")


@dataclass
class AgentModel:
    A: torch.Tensor
    B: torch.Tensor
    Cg: torch.Tensor
    Ci: torch.Tensor
    sigma_w: torch.Tensor
    sigma_g: torch.Tensor
    sigma_i: torch.Tensor
    v_max: float = 5.0
    a_max: float = 2.0
    dt: float = 0.1
    response_cache: Dict[int, Tuple[torch.Tensor, torch.Tensor]] = field(
        default_factory=dict, init=False, repr=False, compare=False
    )
    """Rollout response matrices per horizon, filled by ``safeswarm.safety.rollout``"""

    def __post_init__(self) -> None:
        for name in ("A", "B", "Cg", "Ci", "sigma_w", "sigma_g", "sigma_i"):
            setattr(self, name, as_tensor(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        issues = []
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise ConfigurationError(f"A must be square, got shape {tuple(self.A.shape)}")
        n = self.A.shape[0]
        if n < 4:
            issues.append(f"A must hold a planar position and velocity (n >= 4), got n={n}")
        if self.B.ndim != 2 or self.B.shape[0] != n:
            issues.append(f"B must have {n} rows, got shape {tuple(self.B.shape)}")
        for name in ("Cg", "Ci"):
            C = getattr(self, name)
            if C.ndim != 2 or C.shape[1] != n:
                issues.append(f"{name} must have {n} columns, got shape {tuple(C.shape)}")
        expected = {"sigma_w": n, "sigma_g": self.Cg.shape[0], "sigma_i": self.Ci.shape[0]}
        for name, size in expected.items():
            sigma = getattr(self, name)
            if tuple(sigma.shape) != (size, size):
                issues.append(f"{name} must be {size}x{size}, got shape {tuple(sigma.shape)}")
            elif not torch.allclose(sigma, sigma.mT):
                issues.append(f"{name} must be symmetric")
        if not issues:
            if min_eigenvalue(self.sigma_w) < -1e-12:
                issues.append("sigma_w must be positive semi-definite")
            for name in ("sigma_g", "sigma_i"):
                if min_eigenvalue(getattr(self, name)) <= 0:
                    issues.append(f"{name} must be positive definite")
        if self.v_max <= 0 or self.a_max <= 0 or self.dt <= 0:
            issues.append(f"v_max, a_max and dt must be positive, got {self.v_max}, {self.a_max}, {self.dt}")
        if issues:
            raise ConfigurationError("\n".join(issues))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def m_g(self) -> int:
        return self.Cg.shape[0]

    @property
    def m_i(self) -> int:
        return self.Ci.shape[0]

    @classmethod
    def double_integrator(
        cls,
        dt: float = 0.1,
        sigma_w: float = 0.1,
        sigma_g: float = 1.0,
        sigma_i: float = 0.01,
        v_max: float = 5.0,
        a_max: float = 2.0,
    ) -> Self:
        eye = torch.eye(2, dtype=DTYPE)
        zero = torch.zeros(2, 2, dtype=DTYPE)
        A = torch.cat([torch.cat([eye, dt * eye], dim=1), torch.cat([zero, eye], dim=1)])
        B = torch.cat([zero, dt * eye])
        Cg = torch.cat([eye, zero], dim=1)
        Ci = torch.cat([zero, eye], dim=1)
        return cls(
            A=A,
            B=B,
            Cg=Cg,
            Ci=Ci,
            sigma_w=sigma_w * torch.eye(4, dtype=DTYPE),
            sigma_g=sigma_g * eye,
            sigma_i=sigma_i * eye,
            v_max=v_max,
            a_max=a_max,
            dt=dt,
        )


@dataclass(frozen=True)
class TrueState:
    x: torch.Tensor
    k: int = 0
    clipped: bool = False
    """Whether the speed bound was enforced on this state"""

    @property
    def position(self) -> torch.Tensor:
        return self.x[POSITION]

    @property
    def velocity(self) -> torch.Tensor:
        return self.x[VELOCITY]


@dataclass(frozen=True)
class MeasurementPair:
    y_g: torch.Tensor
    y_i: torch.Tensor
    d: torch.Tensor


def _substream_seed(seed: int, agent: int, channel: int) -> int:
    return ((seed * 1_000_003 + agent) * 16 + channel) % (2**63)


class NoiseStreams:
    """Independent Gaussian streams per agent and per channel, derived from one run seed.

    Adding or removing an agent never changes the draws of another agent, and a disabled channel consumes no draws.
    """

    def __init__(self, seed: int, agent: int, enabled: Optional[Dict[str, bool]] = None) -> None:
        self.generators: Dict[str, torch.Generator] = {}
        for index, channel in enumerate(CHANNELS):
            generator = torch.Generator()
            generator.manual_seed(_substream_seed(seed, agent, index))
            self.generators[channel] = generator
        self.enabled = dict.fromkeys(CHANNELS, True)
        if enabled:
            unknown = set(enabled) - set(CHANNELS)
            if unknown:
                raise ConfigurationError(f"Unknown noise channels {sorted(unknown)}. Choose from {CHANNELS}.")
            self.enabled.update(enabled)
        self._roots: Dict[str, Tuple[torch.Tensor, torch.Tensor]] = {}

    def gaussian(self, channel: str, cov: torch.Tensor) -> torch.Tensor:
        size = cov.shape[0]
        if not self.enabled[channel]:
            return torch.zeros(size, dtype=DTYPE)
        cached = self._roots.get(channel)
        if cached is None or cached[0] is not cov:
            cached = (cov, psd_sqrt(cov))
            self._roots[channel] = cached
        z = torch.randn(size, generator=self.generators[channel], dtype=DTYPE)
        return cached[1] @ z


def _check_vector(name: str, v: torch.Tensor, size: int) -> None:
    if tuple(v.shape) != (size,):
        raise ConfigurationError(f"{name} must be a {size}-vector, got shape {tuple(v.shape)}")


def step(
    model: AgentModel,
    x: TrueState,
    u: Union[torch.Tensor, list],
    rng: Optional[NoiseStreams] = None,
    enforce_speed: bool = False,
) -> TrueState:
    """Propagates the plant one tick, ``A x + B u + w``.

    Args:
        model: The agent model.
        x: The current true state.
        u: The commanded acceleration. Scaled back radially onto ``a_max`` when it exceeds it.
        rng: Noise source. ``None`` propagates without process noise.
        enforce_speed: Scale the next velocity back onto ``v_max`` when it exceeds it.
    """
    u = as_tensor(u)
    _check_vector("u", u, model.m)
    _check_vector("x", x.x, model.n)
    applied = clamp_norm(u, model.a_max)
    if applied is not u:
        log.debug("tick %d: input of norm %.4f clamped to a_max=%.4f", x.k, torch.linalg.vector_norm(u), model.a_max)
    w = rng.gaussian("process", model.sigma_w) if rng is not None else torch.zeros(model.n, dtype=DTYPE)
    x_next = model.A @ x.x + model.B @ applied + w
    clipped = False
    if enforce_speed:
        speed = torch.linalg.vector_norm(x_next[VELOCITY])
        if speed > model.v_max:
            x_next = x_next.clone()
            x_next[VELOCITY] = x_next[VELOCITY] * (model.v_max / speed)
            clipped = True
            log.debug("tick %d: speed %.4f clipped to v_max=%.4f", x.k + 1, speed, model.v_max)
    return TrueState(x_next, x.k + 1, clipped)


def measure(
    model: AgentModel,
    x: TrueState,
    x_prev: TrueState,
    d: Optional[torch.Tensor] = None,
    rng: Optional[NoiseStreams] = None,
) -> MeasurementPair:
    """GPS position ``Cg x + d + v_g`` and IMU state difference ``Ci (x - x_prev) + v_i``.

    ``x_prev`` must be the state one tick before ``x``.
    """
    d = torch.zeros(model.m_g, dtype=DTYPE) if d is None else as_tensor(d)
    _check_vector("d", d, model.m_g)
    _check_vector("x", x.x, model.n)
    _check_vector("x_prev", x_prev.x, model.n)
    v_g = rng.gaussian("gps", model.sigma_g) if rng is not None else 0.0
    v_i = rng.gaussian("imu", model.sigma_i) if rng is not None else 0.0
    y_g = model.Cg @ x.x + d + v_g
    y_i = model.Ci @ (x.x - x_prev.x) + v_i
    return MeasurementPair(y_g=y_g, y_i=y_i, d=d)


def distance(a: torch.Tensor, b: torch.Tensor) -> float:
    return torch.linalg.vector_norm(as_tensor(a) - as_tensor(b)).item()


def in_spoof_range(attacker_pos: torch.Tensor, x: TrueState, r_effect: float) -> bool:
    """Whether the agent is inside the spoofing device's effective range. The boundary counts as inside."""
    if r_effect < 0:
        raise ConfigurationError(f"r_effect must be non-negative, got {r_effect}")
    return distance(attacker_pos, x.position) <= r_effect
