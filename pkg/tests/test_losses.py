import numpy as np
import pytest

from classsr.exceptions import (
    ClassSRValueError,
    NonFiniteError,
    ProbabilityError,
    ShapeError,
)
from classsr.losses import (
    LossWeights,
    average_loss,
    blended_output,
    check_probabilities,
    class_loss,
    image_loss,
    total_loss,
)
from classsr.models import ClassConfig, ModelSpec, build_class_module, build_container
from classsr.tensor import Tensor, backward, gradient_check, softmax


@pytest.fixture
def make_models():
    def _make_models(widths=(4, 6, 8)):
        spec = ModelSpec(
            widths=list(widths),
            shrink=2,
            tile=8,
            class_module=ClassConfig(channels=[4, 4, 4, 4, 4]),
        )
        return build_container(spec), build_class_module(spec.class_config(), seed=9)

    return _make_models


@pytest.fixture
def make_logits():
    """Make (B, 3) logits whose class probabilities stay well apart."""

    def _make_logits(batch, seed=0):
        rng = np.random.default_rng(seed)
        rows = [rng.permutation([0.0, 0.8, 1.6]) for _ in range(batch)]
        return np.array(rows) + 0.1 * rng.standard_normal((batch, 3))

    return _make_logits


class TestCheckProbabilities(object):
    def test_valid(self):
        check_probabilities(np.array([[0.2, 0.3, 0.5], [1.0, 0.0, 0.0]]))

    @pytest.mark.parametrize(
        "probs, expected",
        [
            ([0.5, 0.6], "Probabilities must sum to 1."),
            ([1.5, -0.5], "Probabilities must be finite and nonnegative."),
            ([np.nan, 1.0], "Probabilities must be finite and nonnegative."),
        ],
    )
    def test_invalid(self, probs, expected):
        with pytest.raises(ProbabilityError) as excinfo:
            check_probabilities(np.array(probs))

        assert str(excinfo.value) == expected


class TestClassLoss(object):
    @pytest.mark.parametrize(
        "probs, expected",
        [
            ([1.0, 0.0, 0.0], -2.0),
            ([1 / 3, 1 / 3, 1 / 3], 0.0),
            ([0.5, 0.5, 0.0], -1.0),
            ([0.0, 1.0], -1.0),
        ],
    )
    def test_values(self, probs, expected):
        assert class_loss(Tensor([probs])).item() == pytest.approx(expected, abs=1e-6)

    def test_batch_mean(self):
        probs = Tensor([[1.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3]])

        assert class_loss(probs).item() == pytest.approx(-1.0, abs=1e-6)

    def test_invalid(self):
        with pytest.raises(ProbabilityError):
            class_loss(Tensor([[0.5, 0.7]]))


class TestAverageLoss(object):
    @pytest.mark.parametrize("batch, expected", [(3, 4.0), (96, 128.0)])
    def test_one_class(self, batch, expected):
        probs = Tensor(np.tile([1.0, 0.0, 0.0], (batch, 1)))

        assert average_loss(probs).item() == pytest.approx(expected)

    def test_balanced(self):
        probs = Tensor(np.eye(3))

        assert average_loss(probs).item() == pytest.approx(0.0)

    def test_strict(self):
        with pytest.raises(ClassSRValueError) as excinfo:
            average_loss(Tensor(np.eye(3)[[0, 1, 2, 0]]))

        assert str(excinfo.value) == "Batch size 4 is not divisible by 3 classes."

    def test_not_strict(self):
        probs = Tensor(np.eye(3)[[0, 1, 2, 0]])

        assert average_loss(probs, strict=False).item() == pytest.approx(2 / 3 * 2)


class TestImageLoss(object):
    def test_value(self):
        y = Tensor(np.zeros((1, 3, 2, 2)))
        gt = Tensor(np.full((1, 3, 2, 2), 0.5))

        assert image_loss(y, gt).item() == pytest.approx(0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            image_loss(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((1, 3, 4, 4))))


class TestTotalLoss(object):
    def test_value(self):
        total = total_loss(Tensor(0.01), Tensor(-2.0), Tensor(0.0), LossWeights())

        assert total.item() == pytest.approx(18.0)

    def test_non_finite(self):
        with pytest.raises(NonFiniteError) as excinfo:
            total_loss(Tensor(np.inf), Tensor(0.0), Tensor(0.0), LossWeights())

        assert str(excinfo.value) == "Loss term l1 is not finite."

    @pytest.mark.parametrize("weights", [(-1, 1, 1), (0, 0, 0)])
    def test_invalid_weights(self, weights):
        with pytest.raises(ClassSRValueError):
            LossWeights(*weights).validate()


class TestBlendedOutput(object):
    def test_one_hot_matches_branch(self, make_models):
        container, _ = make_models()
        x = Tensor(np.random.default_rng(0).random((4, 3, 8, 8)))
        outputs = container.forward_all(x)
        for j in range(3):
            probs = Tensor(np.tile(np.eye(3)[j], (4, 1)))
            blended = blended_output(probs, outputs).data

            np.testing.assert_array_equal(blended, outputs[j].data)

    def test_output_count_mismatch(self, make_models):
        container, _ = make_models()
        outputs = container.forward_all(Tensor(np.zeros((2, 3, 8, 8))))
        with pytest.raises(ShapeError):
            blended_output(Tensor(np.full((2, 2), 0.5)), outputs[:2] + outputs[:1])

    def test_gradient(self):
        rng = np.random.default_rng(0)

        def fn(logits, a, b):
            probs = softmax(logits)
            blended = blended_output(probs, [a, b])
            return (blended * blended).sum() + class_loss(probs)

        arrays = [rng.standard_normal((2, 2))]
        arrays += [rng.standard_normal((2, 1, 3, 3)) for _ in range(2)]

        assert gradient_check(fn, arrays) < 1e-6


@pytest.mark.parametrize("seed", range(20))
class TestGradientCheck(object):
    def test_image_loss(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.standard_normal((2, 3, 4, 4))
        r = rng.standard_normal(y.shape)
        gt = y - np.sign(r) * (np.abs(r) + 0.1)

        def fn(y):
            return image_loss(y, Tensor(gt))

        assert gradient_check(fn, [y]) < 1e-6

    def test_class_loss(self, make_logits, seed):
        def fn(logits):
            return class_loss(softmax(logits))

        assert gradient_check(fn, [make_logits(4, seed=seed)]) < 1e-6

    def test_average_loss(self, make_logits, seed):
        def fn(logits):
            return average_loss(softmax(logits))

        assert gradient_check(fn, [make_logits(6, seed=seed)]) < 1e-6


def test_joint_objective_reaches_every_parameter(make_models):
    container, class_module = make_models()
    rng = np.random.default_rng(1)
    lr = Tensor(rng.random((3, 3, 8, 8)))
    hr = Tensor(rng.random((3, 3, 32, 32)))

    probs = class_module(lr)
    sr = blended_output(probs, container.forward_all(lr))
    loss = total_loss(
        image_loss(sr, hr), class_loss(probs), average_loss(probs), LossWeights()
    )
    backward(loss)

    for name, param in container.named_parameters().items():
        assert param.grad is not None, name
        assert np.any(param.grad != 0), name
    assert np.any(class_module.fc.weight.grad != 0)
