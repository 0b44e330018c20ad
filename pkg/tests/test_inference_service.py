import numpy as np
import pytest

from services.inference_service import (
    accuracy, certainty, evaluate, multimodal_accuracy, per_sample_frame, predict, source_order, weighted_logits,
)
from services.synthdata_service import MultimodalDataset
from utils.error_handlers import InvalidArgumentError


def binary_logits(c):
    """K=2 logits whose certainty is exactly max(c, 1 - c)"""
    return np.array([[np.log(c), np.log(1.0 - c)]])


def constant_model(model, favoured=0):
    """Every head ignores its input and prefers class `favoured`"""
    updates = {}
    for name, value in model.parameters.items():
        if name.startswith(("uni_head", "shared_head", "fusion_head")):
            if name.endswith(".weight"):
                updates[name] = np.zeros_like(value)
            else:
                bias = np.zeros_like(value)
                bias[favoured] = 1.0
                updates[name] = bias
    return model.with_parameters(updates)


# --------------------------------------------------------------------------- #
# certainty and weighting
# --------------------------------------------------------------------------- #
def test_certainty_examples():
    assert certainty(np.zeros((2, 5))).tolist() == pytest.approx([0.2, 0.2], abs=1e-15)
    assert certainty(np.array([[np.log(3.0), 0.0, 0.0]]))[0] == pytest.approx(0.6, abs=1e-12)
    assert certainty(np.array([[800.0, 0.0, 0.0]]))[0] == 1.0


def test_certainty_bounds(rng):
    z = rng.standard_normal((200, 4)) * 5
    c = certainty(z)
    assert np.all(c >= 0.25 - 1e-15) and np.all(c <= 1.0)


def test_equal_certainties_give_uniform_weights(rng):
    base = rng.standard_normal((4, 3))
    sources = [base, np.roll(base, 1, axis=1), np.roll(base, 2, axis=1)]
    combined, weights = weighted_logits(sources)
    np.testing.assert_allclose(weights, np.full((4, 3), 1 / 3), rtol=0, atol=1e-12)
    np.testing.assert_allclose(combined, np.mean(sources, axis=0), rtol=0, atol=1e-12)


def test_weight_of_the_confident_source():
    _, weights = weighted_logits([binary_logits(0.9), binary_logits(0.5), binary_logits(0.5)], T_lw=1.0)
    expected = np.exp(0.9) / (np.exp(0.9) + 2 * np.exp(0.5))
    assert weights[0, 0] == pytest.approx(expected, abs=1e-12)
    assert weights[0, 1] == pytest.approx(weights[0, 2], abs=1e-15)


def test_large_temperature_flattens_weights():
    _, weights = weighted_logits([binary_logits(0.99), binary_logits(0.5)], T_lw=1e6)
    np.testing.assert_allclose(weights, [[0.5, 0.5]], rtol=0, atol=1e-6)


def test_weights_are_a_distribution_and_monotone(rng):
    for _ in range(100):
        sources = [rng.standard_normal((3, 4)) * 2 for _ in range(3)]
        _, weights = weighted_logits(sources, T_lw=float(rng.uniform(0.1, 2.0)))
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert np.all((weights > 0) & (weights < 1))

    low = [binary_logits(0.6), binary_logits(0.7)]
    high = [binary_logits(0.8), binary_logits(0.7)]
    assert weighted_logits(high)[1][0, 0] > weighted_logits(low)[1][0, 0]


def test_weights_follow_a_permutation_of_sources(rng):
    sources = [rng.standard_normal((5, 3)) for _ in range(3)]
    _, weights = weighted_logits(sources)
    _, permuted = weighted_logits([sources[2], sources[0], sources[1]])
    np.testing.assert_allclose(permuted, weights[:, [2, 0, 1]], rtol=0, atol=1e-14)


def test_uniform_shift_keeps_the_weighted_prediction(rng):
    for _ in range(1000):
        sources = [rng.standard_normal((1, 4)) for _ in range(3)]
        shift = float(rng.uniform(-5.0, 5.0))
        before = weighted_logits(sources)[0].argmax(axis=1)
        after = weighted_logits([z + shift for z in sources])[0].argmax(axis=1)
        assert before[0] == after[0]


def test_single_source_is_returned_unchanged(rng):
    z = rng.standard_normal((3, 4))
    combined, weights = weighted_logits([z])
    np.testing.assert_array_equal(combined, z)
    np.testing.assert_array_equal(weights, np.ones((3, 1)))


def test_weighting_errors():
    with pytest.raises(InvalidArgumentError):
        weighted_logits([])
    with pytest.raises(InvalidArgumentError):
        weighted_logits([np.zeros((2, 3)), np.zeros((2, 4))])
    with pytest.raises(InvalidArgumentError):
        weighted_logits([np.zeros((2, 3))], T_lw=0.0)


# --------------------------------------------------------------------------- #
# evaluation
# --------------------------------------------------------------------------- #
def test_accuracy():
    assert accuracy(np.array([0, 1, 2]), np.array([0, 1, 2])) == 1.0
    assert accuracy(np.array([0, 1, 1, 2]), np.array([0, 1, 2, 2])) == 0.75
    with pytest.raises(InvalidArgumentError):
        accuracy(np.array([]), np.array([]))


def test_constant_predictor_on_a_single_class_dataset(tiny_model, rng):
    inputs = (rng.standard_normal((5, 6)), rng.standard_normal((5, 6)))
    dataset = MultimodalDataset(inputs, np.zeros(5, dtype=np.int64), 3)
    metrics = evaluate(constant_model(tiny_model, 0), dataset)
    assert metrics == {"uni1": 1.0, "uni2": 1.0, "fusion": 1.0, "preds_avg": 1.0, "weighted": 1.0}


def test_preds_avg_agrees_with_unanimous_heads(tiny_model, rng):
    model = constant_model(tiny_model, 2)
    bundle = predict(model, (rng.standard_normal((1, 6)), rng.standard_normal((1, 6))))
    assert bundle.predictions("preds_avg").tolist() == [2]
    assert bundle.predictions("uni1").tolist() == bundle.predictions("uni2").tolist() == [2]


def test_evaluate_selected_modes_and_unknown_mode(tiny_model, tiny_data):
    _, test = tiny_data
    metrics = evaluate(tiny_model, test, ["fusion", "uni2"])
    assert list(metrics) == ["fusion", "uni2"]
    assert all(0.0 <= v <= 1.0 for v in metrics.values())
    assert evaluate(tiny_model, test) == evaluate(tiny_model, test)
    with pytest.raises(InvalidArgumentError):
        evaluate(tiny_model, test, ["uni3"])


def test_bundle_invariants(tiny_model, tiny_data):
    _, test = tiny_data
    bundle = predict(tiny_model, test.inputs, T_lw=0.5)
    assert bundle.certainties.shape == bundle.weights.shape == (len(test), 3)
    assert np.all(bundle.certainties >= 1 / 3 - 1e-15)
    np.testing.assert_allclose(bundle.weights.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert source_order(2) == ["uni1", "uni2", "fusion"]


def test_per_sample_columns(tiny_model, tiny_data):
    _, test = tiny_data
    frame = per_sample_frame(tiny_model, test)
    assert list(frame.columns) == ["sample", "label", "pred_uni1", "pred_uni2", "pred_fusion", "pred_weighted",
                                   "c1", "c2", "cf", "w1", "w2", "wf"]
    assert len(frame) == len(test)


def test_multimodal_accuracy_per_training_mode():
    metrics = {"uni1": 0.5, "uni2": 0.6, "fusion": 0.7, "preds_avg": 0.65, "weighted": 0.75}
    assert multimodal_accuracy(metrics, "di_mml") == 0.75
    assert multimodal_accuracy(metrics, "joint") == 0.7
    assert multimodal_accuracy(metrics, "preds_avg") == 0.65
    assert multimodal_accuracy(metrics, "unimodal") is None
