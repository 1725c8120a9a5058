import numpy as np
import pytest

from classsr.exceptions import ClassSRValueError, ShapeError
from classsr.optim import Adam, AdamState, CosineSchedule, adam_step, lr_at
from classsr.tensor import Tensor


class TestAdamStep(object):
    def test_first_step(self):
        param = Tensor([0.0], dtype=np.float64)
        state = AdamState.for_params([param])
        adam_step([param], [np.array([1.0])], state, lr=1e-3)

        assert state.step_count == 1
        np.testing.assert_allclose(param.data, [-9.9999999e-4], rtol=1e-7)

    def test_missing_gradient_is_zero(self):
        param = Tensor([1.0], dtype=np.float64)
        state = AdamState.for_params([param])
        adam_step([param], [None], state, lr=1e-3)

        np.testing.assert_allclose(param.data, [1.0])

    def test_shape_mismatch(self):
        param = Tensor([1.0, 2.0])
        state = AdamState.for_params([param])
        with pytest.raises(ShapeError):
            adam_step([param], [np.zeros(3)], state, lr=1e-3)

    def test_invalid_lr(self):
        param = Tensor([1.0])
        state = AdamState.for_params([param])
        with pytest.raises(ClassSRValueError) as excinfo:
            adam_step([param], [np.zeros(1)], state, lr=0)

        assert str(excinfo.value) == "Learning rate must be positive: 0"


class TestAdam(object):
    def test_minimizes_quadratic(self):
        x = Tensor([3.0, -2.0], requires_grad=True, dtype=np.float64)
        optimizer = Adam({"x": x})
        for _ in range(2000):
            optimizer.zero_grad()
            (x * x).sum().backward()
            optimizer.step(lr=1e-2)

        np.testing.assert_allclose(x.data, [0, 0], atol=5e-2)

    def test_state_arrays(self):
        x = Tensor([1.0], requires_grad=True)
        optimizer = Adam({"x": x})
        (x * x).sum().backward()
        optimizer.step(lr=1e-3)
        arrays = optimizer.state_arrays("adam.g")

        restored = Adam({"x": Tensor([1.0], requires_grad=True)})
        restored.load_state_arrays("adam.g", arrays, optimizer.state.step_count)

        assert sorted(arrays) == ["adam.g.m.x", "adam.g.v.x"]
        assert restored.state.step_count == 1
        np.testing.assert_array_equal(
            restored.state.first_moment[0], optimizer.state.first_moment[0]
        )


class TestCosineSchedule(object):
    @pytest.mark.parametrize(
        "t, expected",
        [(0, 1e-3), (250000, 5.0005e-4), (500000, 1e-7)],
    )
    def test_lr_at(self, t, expected):
        assert lr_at(CosineSchedule(), t) == pytest.approx(expected, rel=1e-9)

    def test_outside_period(self):
        with pytest.raises(ClassSRValueError) as excinfo:
            lr_at(CosineSchedule(period=10), 11)

        assert str(excinfo.value) == "Iteration 11 is outside the schedule [0, 10]."

    @pytest.mark.parametrize(
        "kwargs", [{"period": 0}, {"lr_min": 1e-2, "lr_max": 1e-3}]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ClassSRValueError):
            CosineSchedule(**kwargs)
