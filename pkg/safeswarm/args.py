# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

from dataclasses import dataclass, field
from typing import List, Optional


@dataclass
class ModelArgs:
    """Double-integrator agent model"""

    dt: float = 0.1
    """Sampling time of one tick in seconds"""
    v_max: float = 5.0
    """Speed bound in m/s"""
    a_max: float = 2.0
    """Acceleration bound in m/s^2"""
    enforce_speed: bool = True
    """Whether the true plant clips its speed to ``v_max`` (violations are logged either way)"""


@dataclass
class NoiseArgs:
    """Noise covariances (isotropic scales) and per-channel sampling switches"""

    sigma_w: float = 0.1
    """Process noise covariance scale"""
    sigma_g: float = 1.0
    """GPS noise covariance scale"""
    sigma_i: float = 0.01
    """IMU noise covariance scale"""
    process: bool = True
    """Whether process noise is sampled on the true plant"""
    gps: bool = True
    """Whether GPS noise is sampled"""
    imu: bool = True
    """Whether IMU noise is sampled"""


@dataclass
class GainArgs:
    """Coordination and tracking gains"""

    rho: float = 1 / 1200
    """Reference rate of the coordination state per tick"""
    k_e: float = 0.005
    """Tracking-error gain of the coordination law"""
    k_s: float = 0.005
    """Consensus gain of the coordination law"""
    k_p: float = 0.05
    """Proportional gain of the tracking controller"""
    k_i: float = 0.315
    """Velocity-error (derivative) gain of the tracking controller"""


@dataclass
class AttackerArgs:
    """GPS spoofing device"""

    enabled: bool = False
    """Whether the spoofing device is active"""
    position: List[float] = field(default_factory=lambda: [200.0, 200.0])
    """Ground-truth position of the device in m"""
    r_effect: float = 30.0
    """Radius of the effective range in m"""
    signal: List[float] = field(default_factory=lambda: [10.0, 10.0])
    """Spoofing offset injected into the GPS output while an agent is in range"""
    bias: List[float] = field(default_factory=lambda: [0.0, 0.0])
    """Offset of the attacker position prior used by the controllers"""
    power: float = -40.0
    """Received power of the injected signal at ``d0``, in dB"""
    d0: float = 1.0
    """Reference distance of ``power``, in m"""


@dataclass
class DetectorArgs:
    """Chi-square CUSUM detector"""

    alpha: float = 0.01
    """Significance level"""
    delta: float = 0.15
    """Forgetting factor in (0, 1)"""
    df: Optional[int] = None
    """Degrees of freedom. Defaults to the GPS output dimension"""
    drop_gps_when_attacked: bool = False
    """Run the detection estimator on the IMU alone while attacked (ablation)"""


@dataclass
class EscapeArgs:
    """Escape time and escape controller"""

    zeta: List[float] = field(default_factory=lambda: [10.0, 10.0, 1.0, 1.0])
    """Tolerable per-state estimation error, in m and m/s"""
    alpha: float = 0.01
    """Significance level of the tolerance test"""
    beta: float = 10000.0
    """Scale of the repulsive potential"""
    horizon_slack: int = 50
    """Prediction horizon beyond the escape time"""
    buffer: float = 0.0
    """Distance added to the effective range inside the repulsive potential, in m (a tuning knob, off by default)"""
    q: float = 1e-4
    """State weight (times identity) of the stage cost"""
    r: float = 1e-4
    """Input weight (times identity) of the stage cost"""
    speed_penalty: float = 10.0
    """Weight of the squared speed-bound excess inside the solver"""
    max_iters: int = 300
    """Iteration cap of the solver"""
    tol: float = 1e-4
    """Projected-gradient stationarity tolerance"""


@dataclass
class EstimatorArgs:
    """State estimators"""

    p0: float = 1.0
    """Initial error covariance scale"""
    initial_offset: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0])
    """Offset of the initial estimate from the true initial state"""
    coordinate_on_truth: bool = False
    """Use the true state in the coordination tracking error (ablation)"""


@dataclass
class LocalizationArgs:
    """Sliding-window UKF localization of the spoofing device"""

    enabled: bool = False
    """Whether the controllers use the UKF estimate instead of the configured prior"""
    window: int = 3
    """Number of stacked signal-strength samples"""
    sigma_v: float = 0.25
    """Variance of one signal-strength sample, in dB^2"""
    sigma_wp: float = 0.0
    """Process noise scale of the device position"""
    prior_var: float = 25.0
    """Variance scale of the position prior"""
