# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

import math

import pytest
import torch


def test_sigma_points_identity():
    from safeswarm.localization import sigma_points

    points = sigma_points(torch.tensor([1.0, -1.0], dtype=torch.float64), torch.eye(2, dtype=torch.float64))
    r = math.sqrt(2)
    expected = torch.tensor([[1 + r, -1.0], [1.0, -1 + r], [1 - r, -1.0], [1.0, -1 - r]], dtype=torch.float64)
    torch.testing.assert_close(points, expected)


def test_sigma_points_reproduce_mean_and_covariance():
    from safeswarm.localization import sigma_points

    generator = torch.Generator().manual_seed(3)
    A = torch.randn(3, 3, generator=generator, dtype=torch.float64)
    P = A @ A.mT + 0.01 * torch.eye(3, dtype=torch.float64)
    x_hat = torch.randn(3, generator=generator, dtype=torch.float64)
    points = sigma_points(x_hat, P)
    assert points.shape == (6, 3)
    torch.testing.assert_close(points.mean(dim=0), x_hat)
    dX = points - x_hat
    torch.testing.assert_close(dX.mT @ dX / 6, P)


def test_sigma_points_reject_indefinite_covariance():
    from safeswarm.localization import sigma_points
    from safeswarm.utils import NumericalError

    with pytest.raises(NumericalError, match="indefinite"):
        sigma_points(torch.zeros(2, dtype=torch.float64), torch.diag(torch.tensor([1.0, -1.0], dtype=torch.float64)))


def test_single_output_linear_update_is_a_kalman_filter():
    from safeswarm.localization import UkfState, ukf_predict, ukf_update

    A = torch.tensor([[1.0, 0.1], [0.0, 0.95]], dtype=torch.float64)
    W = 0.01 * torch.eye(2, dtype=torch.float64)
    c = torch.tensor([2.0, -1.0], dtype=torch.float64)

    def linear(points, uav_position):
        return points @ c + uav_position[0]

    st = UkfState(
        x_hat=torch.tensor([3.0, 1.0]), P=torch.diag(torch.tensor([2.0, 0.5])), A_loc=A, sigma_wp=W, sigma_v=0.3, M=1
    )
    x, P = st.x_hat, st.P
    uav = torch.tensor([1.5, 0.0], dtype=torch.float64)
    generator = torch.Generator().manual_seed(0)
    for y in (5.0 + torch.randn(100, generator=generator, dtype=torch.float64)).tolist():
        st = ukf_update(ukf_predict(st), [y], [uav], linear)

        x, P = A @ x, A @ P @ A.mT + W
        K = P @ c / (c @ P @ c + 0.3)
        x = x + K * (y - c @ x - 1.5)
        P = P - torch.outer(K, K) * (c @ P @ c + 0.3)

        torch.testing.assert_close(st.x_hat, x, atol=1e-8, rtol=0)
        torch.testing.assert_close(st.P, P, atol=1e-8, rtol=0)


def test_window_update_maps_older_outputs_back_in_time():
    from safeswarm.localization import UkfState, ukf_update

    A = torch.tensor([[1.0, 0.1], [0.0, 0.95]], dtype=torch.float64)
    c = torch.tensor([2.0, -1.0], dtype=torch.float64)

    def linear(points, uav_position):
        return points @ c + uav_position[0]

    P = torch.tensor([[2.0, 0.3], [0.3, 0.5]], dtype=torch.float64)
    st = UkfState(x_hat=torch.tensor([3.0, 1.0]), P=P, A_loc=A, sigma_wp=torch.zeros(2, 2), sigma_v=0.3, M=3)
    positions = [torch.tensor([float(j), 0.0], dtype=torch.float64) for j in range(3)]
    y = torch.tensor([4.0, 6.5, 5.0], dtype=torch.float64)
    updated = ukf_update(st, y.tolist(), positions, linear)

    # slot j observes c A^-j x
    H = torch.stack([c @ torch.linalg.matrix_power(torch.linalg.inv(A), j) for j in range(3)])
    offsets = torch.tensor([0.0, 1.0, 2.0], dtype=torch.float64)
    P_y = H @ P @ H.mT + 0.3 * torch.eye(3, dtype=torch.float64)
    K = P @ H.mT @ torch.linalg.inv(P_y)
    torch.testing.assert_close(updated.x_hat, st.x_hat + K @ (y - H @ st.x_hat - offsets), atol=1e-8, rtol=0)
    torch.testing.assert_close(updated.P, P - K @ P_y @ K.mT, atol=1e-8, rtol=0)


def test_gain_minimizes_the_posterior_trace():
    from safeswarm.localization import SignalModel, UkfState, ukf_innovation, ukf_update

    transmitter = torch.tensor([200.0, 200.0], dtype=torch.float64)
    signal = SignalModel()
    st = UkfState.static(transmitter + torch.tensor([4.0, -3.0], dtype=torch.float64), 25.0, 0.25)
    offsets = torch.tensor([[25.0, 0.0], [0.0, 25.0], [-20.0, -15.0]], dtype=torch.float64)
    positions = list(transmitter + offsets)
    _, P_y, P_xy = ukf_innovation(st, signal, positions)
    K = P_xy @ torch.linalg.inv(P_y)

    def posterior_trace(gain):
        return torch.trace(st.P - gain @ P_xy.mT - P_xy @ gain.mT + gain @ P_y @ gain.mT).item()

    best = posterior_trace(K)
    powers = [signal(transmitter, position).item() for position in positions]
    assert torch.trace(ukf_update(st, powers, positions, signal).P).item() == pytest.approx(best, abs=1e-8)
    generator = torch.Generator().manual_seed(1)
    for _ in range(20):
        E = torch.randn(K.shape, generator=generator, dtype=torch.float64)
        E = E / torch.linalg.matrix_norm(E)
        for sign in (1.0, -1.0):
            assert posterior_trace(K + sign * 1e-3 * E) >= best - 1e-8


def test_window_is_newest_first():
    from safeswarm.localization import UkfState

    st = UkfState.static(torch.zeros(2), 1.0, 0.1, M=2)
    for k in range(4):
        st = st.push(float(k), torch.tensor([float(k), 0.0]))
    assert [sample for sample, _ in st.window] == [3.0, 2.0]


def test_update_rejects_mismatched_window():
    from safeswarm.localization import SignalModel, UkfState, ukf_update
    from safeswarm.utils import ConfigurationError

    st = UkfState.static(torch.zeros(2), 1.0, 0.1)
    with pytest.raises(ConfigurationError, match="2 measurements for 1 UAV"):
        ukf_update(st, [1.0, 2.0], [torch.zeros(2)], SignalModel())


def test_state_validation():
    from safeswarm.localization import UkfState
    from safeswarm.utils import ConfigurationError

    with pytest.raises(ConfigurationError) as excinfo:
        UkfState(torch.zeros(2), torch.eye(2), torch.zeros(2, 2), torch.zeros(2, 2), sigma_v=0.0, M=0)
    message = str(excinfo.value)
    assert "window length" in message
    assert "A_loc must be invertible" in message
    assert "sigma_v" in message


@pytest.mark.parametrize("D", [1.0, 7.5, 30.0, 250.0])
def test_signal_distance_inverts_the_signal(D):
    from safeswarm.localization import SignalModel

    signal = SignalModel()
    power = signal(torch.tensor([D, 0.0], dtype=torch.float64), torch.zeros(2, dtype=torch.float64)).item()
    assert signal.distance(power) == pytest.approx(D)


def test_signal_is_floored_at_the_reference_distance():
    from safeswarm.localization import SignalModel
    from safeswarm.utils import ConfigurationError

    signal = SignalModel(p0=-40.0, d0=1.0)
    assert signal(torch.tensor([0.1, 0.0]), torch.zeros(2)).item() == pytest.approx(-40.0)
    assert signal.distance(-10.0) == 1.0
    with pytest.raises(ConfigurationError):
        SignalModel(d0=0.0)


def test_localizer_converges_around_the_transmitter():
    from safeswarm.localization import Localizer, SignalModel

    transmitter = torch.tensor([200.0, 200.0], dtype=torch.float64)
    signal = SignalModel()
    localizer = Localizer(transmitter + torch.tensor([4.0, -3.0], dtype=torch.float64), signal=signal)
    initial_trace = localizer.trace
    for k in range(90):
        angle = 2 * math.pi * k / 90
        uav = transmitter + 25.0 * torch.tensor([math.cos(angle), math.sin(angle)], dtype=torch.float64)
        localizer.push(signal(transmitter, uav).item(), uav)
    assert localizer.updates == 88
    assert torch.linalg.vector_norm(localizer.estimate - transmitter).item() < 1.0
    assert localizer.trace < initial_trace


def test_localizer_fixes_the_transmitter_from_three_bearings():
    from safeswarm.localization import Localizer, SignalModel

    transmitter = torch.tensor([200.0, 200.0], dtype=torch.float64)
    signal = SignalModel()
    localizer = Localizer(transmitter + torch.tensor([4.0, -3.0], dtype=torch.float64), signal=signal)
    bearings = [2 * math.pi * b / 3 for b in range(3)]
    for k in range(52):
        angle = bearings[k % 3]
        uav = transmitter + 25.0 * torch.tensor([math.cos(angle), math.sin(angle)], dtype=torch.float64)
        localizer.push(signal(transmitter, uav).item(), uav)
    assert localizer.updates == 50
    assert torch.linalg.vector_norm(localizer.estimate - transmitter).item() < 1.0


def test_localizer_rejects_non_finite_power():
    from safeswarm.localization import Localizer
    from safeswarm.utils import NumericalError

    localizer = Localizer(torch.zeros(2))
    with pytest.raises(NumericalError, match="non-finite"):
        localizer.push(float("nan"), torch.zeros(2))
