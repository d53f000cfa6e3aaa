"""Attack-suite tests: contracts, closed forms, and masking behavior."""

import math

import numpy as np
import pytest

from gradmask import attacks, data, nn
from gradmask.attacks import (
    ATTACKS,
    AttackConfig,
    FAILURE_DEGENERATE,
    FAILURE_NO_FLIP,
    FAILURE_OVER_BUDGET,
    _deepfool_step,
    bim,
    bim_targeted,
    cw_l2,
    deepfool,
    fgsm,
    linf_to_l2_budget,
    loss_input_gradient,
    tgsm,
    tgsm_enhanced,
)
from gradmask.errors import ConfigError, ProtocolError, ShapeError
from gradmask.tensor import Tensor


# --------------------------------------------------------------------------
# fixtures: a competently trained classifier and hand-built saturated models


@pytest.fixture(scope="module")
def blob_setup():
    """Small conv net at ~98% accuracy plus a correctly classified pool."""
    train = data.synthetic_blobs(240, 10, seed=7)
    test = data.synthetic_blobs(60, 10, seed=8)
    spec = nn.ModelSpec((1, 8, 8), (nn.Conv(1, 8), nn.ReLU(), nn.MaxPool(),
                                    nn.Flatten(), nn.Dense(128, 10)),
                        "linear", 10)
    cfg = nn.TrainConfig(epochs=25, batch_size=40, learning_rate=3e-3, seed=0)
    model, _ = nn.train(spec, train.images, train.labels, cfg)
    assert nn.accuracy(model, test.images, test.labels) >= 0.9
    preds = nn.predict_labels(model, test.images)
    keep = preds == test.labels
    return model, test.images[keep][:24], test.labels[keep][:24]


def rail_model(head, scale, shift):
    """Flatten+Dense(10, 10) with W = scale*I, b = shift: logits are
    scale*pixel + shift, so pixel values place each class on a chosen
    saturation rail."""
    spec = nn.ModelSpec((1, 1, 10), (nn.Flatten(), nn.Dense(10, 10)), head, 10)
    params = nn.init_params(spec, np.random.default_rng(0))
    params["layer1.weight"] = Tensor(np.eye(10) * scale)
    params["layer1.bias"] = Tensor(np.full(10, shift))
    return nn.TrainedModel(spec, params, inference_temperature=1.0)


def rail_inputs(true_pixel, other_pixel, labels):
    x = np.full((len(labels), 1, 1, 10), other_pixel)
    for i, t in enumerate(labels):
        x[i, 0, 0, t] = true_pixel
    return x


@pytest.fixture(scope="module")
def tanh_rail():
    """Logits +-80: tanh saturates exactly at both rails, so every input
    gradient is bitwise zero in float64 already."""
    model = rail_model("squeezed-tanh", 200.0, -100.0)
    y = np.arange(10)
    return model, rail_inputs(0.9, 0.1, y), y


@pytest.fixture(scope="module")
def sigmoid_rail():
    """Logits -120 (true) / -160 (rest): sigmoid keeps ~e^z gradients alive
    in float64 but they sit far below the float32 denormal floor, so the
    precision view alone decides whether the attack sees a direction."""
    model = rail_model("squeezed-sigmoid", 400.0, -200.0)
    y = np.arange(10)
    return model, rail_inputs(0.2, 0.1, y), y


def check_contract(outcome, model, originals, config):
    """Invariants every AttackOutcome must satisfy."""
    assert outcome.adversarial.shape == originals.shape
    assert outcome.adversarial.min() >= 0.0
    assert outcome.adversarial.max() <= 1.0
    for i in range(originals.shape[0]):
        delta = outcome.adversarial[i] - originals[i]
        if outcome.success[i]:
            assert outcome.failure[i] is None
            if outcome.norm == "linf":
                assert np.abs(delta).max() <= config.epsilon + 1e-9
            else:
                assert np.linalg.norm(delta) <= config.epsilon + 1e-9
        else:
            assert outcome.failure[i] in (FAILURE_NO_FLIP,
                                          FAILURE_OVER_BUDGET,
                                          FAILURE_DEGENERATE)
            assert np.array_equal(outcome.adversarial[i], originals[i])
    assert np.array_equal(outcome.prediction,
                          nn.predict_labels(model, outcome.adversarial))
    probs = nn.predict_probs(model, outcome.adversarial)
    assert np.allclose(outcome.confidence, probs.max(axis=1))


# --------------------------------------------------------------------------
# config and helpers


@pytest.mark.parametrize("bad", [
    {"epsilon": -0.1},
    {"gradient_precision": "half"},
    {"bim_iterations": 0},
    {"bim_alpha_fraction": 0.0},
    {"bim_alpha_fraction": 1.5},
    {"deepfool_max_iterations": 0},
    {"deepfool_overshoot": 0.99},
    {"cw_steps": 0},
    {"cw_search_rounds": 0},
    {"cw_learning_rate": 0.0},
    {"cw_c_low": 0.0},
    {"cw_c_low": 10.0, "cw_c_high": 1.0},
    {"cw_kappa": -0.5},
])
def test_attack_config_rejects_bad_values(bad):
    with pytest.raises(ConfigError):
        AttackConfig(**bad)


def test_linf_to_l2_budget_closed_form():
    # budget = eps * sqrt(2n / (pi e)), computed independently here
    for eps, n in [(0.1, 784), (0.2, 784), (0.3, 64)]:
        expected = eps * math.sqrt(n) * math.sqrt(2.0 / (math.pi * math.e))
        assert linf_to_l2_budget(eps, n) == pytest.approx(expected, rel=1e-12)


def test_linf_to_l2_budget_reference_points():
    # the two budgets used throughout reporting, quoted to two decimals
    assert linf_to_l2_budget(0.1, 784) == pytest.approx(1.355, abs=5e-3)
    assert linf_to_l2_budget(0.2, 784) == pytest.approx(2.710, abs=5e-3)


def test_linf_to_l2_budget_rejects_bad_args():
    with pytest.raises(ConfigError):
        linf_to_l2_budget(0.0, 784)
    with pytest.raises(ConfigError):
        linf_to_l2_budget(0.1, 0)


def test_input_validation(blob_setup):
    model, x, y = blob_setup
    config = AttackConfig(epsilon=0.1)
    with pytest.raises(ProtocolError, match=r"\[0, 1\]"):
        fgsm(model, x + 0.5, y, config)
    with pytest.raises(ShapeError):
        fgsm(model, x[:, :, :4, :], y, config)
    with pytest.raises(ShapeError):
        fgsm(model, x, y[:-1], config)
    with pytest.raises(ConfigError):
        fgsm(model, x, y + 100, config)
    with pytest.raises(ProtocolError, match="at least one"):
        fgsm(model, x[:0], y[:0], config)


def test_loss_input_gradient_batch_invariant(blob_setup):
    """Row i of a batched gradient is the gradient of sample i alone.

    The loss is summed, never averaged, so no batch-size factor enters;
    agreement is up to BLAS rounding, which picks different kernels for
    different matrix shapes.
    """
    model, x, y = blob_setup
    onehot = nn.onehot(y[:5], 10)
    batched = loss_input_gradient(model, x[:5], onehot, "double")
    for i in range(5):
        single = loss_input_gradient(model, x[i:i + 1], onehot[i:i + 1],
                                     "double")
        assert np.allclose(batched[i], single[0], rtol=1e-12, atol=1e-15)


def test_loss_input_gradient_matches_finite_differences(blob_setup):
    model, x, y = blob_setup
    onehot = nn.onehot(y[:1], 10)
    grad = loss_input_gradient(model, x[:1], onehot, "double")

    def loss_at(img):
        res = nn.forward_logits(model, Tensor(img[None]))
        p = res.probs.data[0]
        return -math.log(p[y[0]])

    rng = np.random.default_rng(3)
    for _ in range(8):
        c = rng.integers(0, x.shape[2]), rng.integers(0, x.shape[3])
        h = 1e-6
        up = x[0].copy(); up[0][c] += h
        dn = x[0].copy(); dn[0][c] -= h
        fd = (loss_at(up) - loss_at(dn)) / (2 * h)
        assert grad[0, 0][c] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_precision_view_rejects_unknown(blob_setup):
    model, x, y = blob_setup
    with pytest.raises(ConfigError):
        loss_input_gradient(model, x[:1], nn.onehot(y[:1], 10), "quad")


# --------------------------------------------------------------------------
# deepfool closed form


def test_deepfool_step_closed_form():
    """Two candidate boundaries; the nearer one wins with the exact
    projection step |f| / ||w||^2 * w."""
    fdiff = np.array([0.0, -2.8, -10.0])
    grads = np.array([[0.0, 0.0],
                      [-1.2, -1.6],    # norm 2 -> distance 1.4
                      [-1.0, 0.0]])    # norm 1 -> distance 10
    step, k = _deepfool_step(fdiff, grads, anchor=0)
    assert k == 1
    assert np.allclose(step, [-0.84, -1.12])
    assert np.linalg.norm(step) == pytest.approx(1.4)
    assert np.allclose(step / np.linalg.norm(step), [-0.6, -0.8])


def test_deepfool_step_skips_tiny_boundary_gradients():
    fdiff = np.array([0.0, -0.5, -0.2])
    grads = np.array([[0.0, 0.0],
                      [1e-13, 0.0],    # below the norm floor: unusable
                      [3.0, 4.0]])
    step, k = _deepfool_step(fdiff, grads, anchor=0)
    assert k == 2
    assert np.linalg.norm(step) == pytest.approx(0.2 / 5.0)


def test_deepfool_step_degenerate_when_all_boundaries_vanish():
    fdiff = np.array([0.0, -0.5, -0.2])
    grads = np.zeros((3, 2))
    assert _deepfool_step(fdiff, grads, anchor=0) is None


# --------------------------------------------------------------------------
# attacks on a healthy model


def test_fgsm_flips_a_fragile_model(blob_setup):
    model, x, y = blob_setup
    config = AttackConfig(epsilon=0.3)
    outcome = fgsm(model, x, y, config)
    check_contract(outcome, model, x, config)
    assert outcome.attack == "fgsm"
    assert outcome.norm == "linf"
    assert outcome.success_rate >= 0.5
    moved = outcome.adversarial[outcome.success] - x[outcome.success]
    assert np.abs(moved).max() == pytest.approx(0.3)


def test_fgsm_tiny_epsilon_mostly_fails_with_no_flip(blob_setup):
    model, x, y = blob_setup
    config = AttackConfig(epsilon=1e-6)
    outcome = fgsm(model, x, y, config)
    check_contract(outcome, model, x, config)
    assert outcome.success_rate <= 0.2
    failed = ~outcome.success
    assert all(outcome.failure[i] == FAILURE_NO_FLIP
               for i in np.flatnonzero(failed))
    assert np.array_equal(outcome.adversarial[failed], x[failed])


def test_zero_epsilon_permits_no_perturbation(blob_setup):
    model, x, y = blob_setup
    config = AttackConfig(epsilon=0.0)
    for attack in (fgsm, bim):
        outcome = attack(model, x, y, config)
        check_contract(outcome, model, x, config)
        assert not outcome.success.any()
        assert np.array_equal(outcome.adversarial, x)
        assert np.all(outcome.linf == 0.0)
        assert np.all(outcome.l2 == 0.0)


def test_bim_at_least_as_strong_as_fgsm(blob_setup):
    model, x, y = blob_setup
    config = AttackConfig(epsilon=0.2)
    one_step = fgsm(model, x, y, config)
    iterated = bim(model, x, y, config)
    check_contract(iterated, model, x, config)
    assert iterated.success_rate >= one_step.success_rate
    assert iterated.iterations.max() <= config.bim_iterations
    # successes stop early instead of walking past the flip
    assert iterated.iterations[iterated.success].max() < config.bim_iterations


def test_tgsm_reaches_requested_targets(blob_setup):
    model, x, y = blob_setup
    targets = (y + 1) % 10
    config = AttackConfig(epsilon=0.3)
    outcome = tgsm(model, x, targets, config)
    check_contract(outcome, model, x, config)
    assert outcome.success_rate >= 0.5
    assert np.all(outcome.prediction[outcome.success] == targets[outcome.success])


def test_tgsm_rejects_targets_already_predicted(blob_setup):
    model, x, y = blob_setup
    with pytest.raises(ProtocolError, match="already predicted"):
        tgsm(model, x, y, AttackConfig(epsilon=0.1))


def test_tgsm_enhanced_reaches_requested_targets(blob_setup):
    model, x, y = blob_setup
    targets = (y + 1) % 10
    config = AttackConfig(epsilon=0.3)
    outcome = tgsm_enhanced(model, x, y, targets, config)
    check_contract(outcome, model, x, config)
    assert outcome.success_rate >= 0.5
    assert np.all(outcome.prediction[outcome.success] == targets[outcome.success])


def test_tgsm_enhanced_rejects_target_equal_to_label(blob_setup):
    model, x, y = blob_setup
    with pytest.raises(ProtocolError, match="differ"):
        tgsm_enhanced(model, x, y, y, AttackConfig(epsilon=0.1))


def test_bim_targeted_reaches_requested_targets(blob_setup):
    model, x, y = blob_setup
    targets = (y + 3) % 10
    config = AttackConfig(epsilon=0.25)
    outcome = bim_targeted(model, x, targets, config)
    check_contract(outcome, model, x, config)
    assert outcome.success_rate >= 0.5
    assert np.all(outcome.prediction[outcome.success] == targets[outcome.success])
    with pytest.raises(ProtocolError, match="already predicted"):
        bim_targeted(model, x, y, config)


def test_deepfool_finds_small_perturbations(blob_setup):
    model, x, y = blob_setup
    budget = linf_to_l2_budget(0.3, 64)
    config = AttackConfig(epsilon=budget)
    outcome = deepfool(model, x, y, config)
    check_contract(outcome, model, x, config)
    assert outcome.attack == "deepfool"
    assert outcome.norm == "l2"
    assert outcome.success_rate >= 0.6
    # minimal-perturbation attack: successes sit well inside the budget
    assert np.median(outcome.l2[outcome.success]) <= 0.6 * budget
    assert outcome.iterations[outcome.success].min() >= 1


def test_deepfool_rejects_misclassified_anchors(blob_setup):
    model, x, y = blob_setup
    wrong = y.copy()
    wrong[0] = (wrong[0] + 1) % 10
    with pytest.raises(ProtocolError, match="already misclassified"):
        deepfool(model, x, wrong, AttackConfig(epsilon=1.0))


def test_cw_l2_untargeted(blob_setup):
    model, x, y = blob_setup
    config = AttackConfig(epsilon=linf_to_l2_budget(0.3, 64))
    outcome = cw_l2(model, x[:12], y[:12], config)
    check_contract(outcome, model, x[:12], config)
    assert outcome.attack == "cw-l2"
    assert outcome.success_rate >= 0.75
    assert outcome.iterations.min() >= 1
    assert outcome.iterations.max() <= config.cw_search_rounds


def test_cw_l2_targeted(blob_setup):
    model, x, y = blob_setup
    targets = (y[:10] + 1) % 10
    config = AttackConfig(epsilon=linf_to_l2_budget(0.4, 64))
    outcome = cw_l2(model, x[:10], y[:10], config, targets=targets)
    check_contract(outcome, model, x[:10], config)
    assert outcome.success_rate >= 0.5
    assert np.all(outcome.prediction[outcome.success] == targets[outcome.success])
    with pytest.raises(ProtocolError, match="differ"):
        cw_l2(model, x[:10], y[:10], config, targets=y[:10])


def test_cw_l2_beats_deepfool_on_perturbation_size(blob_setup):
    """Both minimize L2; the optimizer should not lose badly to the
    linearization on the samples both attacks flip."""
    model, x, y = blob_setup
    config = AttackConfig(epsilon=linf_to_l2_budget(0.3, 64))
    df = deepfool(model, x[:12], y[:12], config)
    cw = cw_l2(model, x[:12], y[:12], config)
    both = df.success & cw.success
    assert both.sum() >= 4
    assert np.median(cw.l2[both]) <= np.median(df.l2[both]) * 1.25


# --------------------------------------------------------------------------
# masking behavior on saturated heads


def test_tanh_rail_masks_fgsm_and_bim_in_both_precisions(tanh_rail):
    model, x, y = tanh_rail
    assert np.array_equal(nn.predict_labels(model, x), y)
    for precision in ("single", "double"):
        grad = loss_input_gradient(model, x, nn.onehot(y, 10), precision)
        assert np.all(grad == 0.0)
        config = AttackConfig(epsilon=0.35, gradient_precision=precision)
        for attack in (fgsm, bim):
            outcome = attack(model, x, y, config)
            check_contract(outcome, model, x, config)
            assert outcome.success_rate == 0.0
            assert set(outcome.failure) == {FAILURE_NO_FLIP}
            assert np.array_equal(outcome.adversarial, x)


def test_tanh_rail_defeats_deepfool_with_degenerate_gradients(tanh_rail):
    model, x, y = tanh_rail
    outcome = deepfool(model, x, y, AttackConfig(epsilon=5.0))
    check_contract(outcome, model, x, AttackConfig(epsilon=5.0))
    assert outcome.success_rate == 0.0
    assert set(outcome.failure) == {FAILURE_DEGENERATE}


def test_tanh_rail_defeats_cw(tanh_rail):
    model, x, y = tanh_rail
    config = AttackConfig(epsilon=5.0, cw_steps=100)
    outcome = cw_l2(model, x, y, config)
    check_contract(outcome, model, x, config)
    assert outcome.success_rate == 0.0


def test_sigmoid_rail_gradients_die_only_in_single_precision(sigmoid_rail):
    model, x, y = sigmoid_rail
    single = loss_input_gradient(model, x, nn.onehot(y, 10), "single")
    double = loss_input_gradient(model, x, nn.onehot(y, 10), "double")
    assert np.all(single == 0.0)
    assert np.all(double != 0.0)
    # alive in float64 yet far below the float32 denormal floor
    assert np.abs(double).max() < 1.4e-45


def test_sigmoid_rail_fgsm_outcome_decided_by_precision_view(sigmoid_rail):
    model, x, y = sigmoid_rail
    assert np.array_equal(nn.predict_labels(model, x), y)
    masked = fgsm(model, x, y, AttackConfig(epsilon=0.35,
                                            gradient_precision="single"))
    leaked = fgsm(model, x, y, AttackConfig(epsilon=0.35,
                                            gradient_precision="double"))
    assert masked.success_rate == 0.0
    assert np.array_equal(masked.adversarial, x)
    assert leaked.success_rate == 1.0


def test_over_budget_deepfool_reverts_to_original(blob_setup):
    """A budget below the reachable boundary distance forces the
    over-budget failure path."""
    model, x, y = blob_setup
    config = AttackConfig(epsilon=1e-3)
    outcome = deepfool(model, x, y, config)
    check_contract(outcome, model, x, config)
    assert outcome.success_rate == 0.0
    over = [f == FAILURE_OVER_BUDGET for f in outcome.failure]
    assert any(over)
    # attempted norms are preserved for diagnostics even after the revert
    assert outcome.l2[np.flatnonzero(over)].min() > config.epsilon


# --------------------------------------------------------------------------
# registry


def test_registry_names_and_norms():
    assert set(ATTACKS) == {"fgsm", "tgsm", "tgsm-enhanced", "bim",
                            "bim-targeted", "deepfool", "cw-l2"}
    assert {n for n, s in ATTACKS.items() if s.norm == "l2"} == \
        {"deepfool", "cw-l2"}
    assert {n for n, s in ATTACKS.items() if s.targeted} == \
        {"tgsm", "tgsm-enhanced", "bim-targeted"}


def test_registry_runners_dispatch(blob_setup):
    model, x, y = blob_setup
    config = AttackConfig(epsilon=0.3)
    targets = (y + 1) % 10
    for name in ("fgsm", "bim", "tgsm", "tgsm-enhanced", "bim-targeted"):
        outcome = ATTACKS[name].run(model, x[:6], y[:6], targets[:6], config)
        assert outcome.attack == name
        check_contract(outcome, model, x[:6], config)
