"""White-box gradient attacks against trained models.

All attacks share one contract. Inputs are (B, C, H, W) pixel arrays in
[0, 1]; the result is an AttackOutcome whose adversarial rows stay in
[0, 1] and, for successful rows, inside the attack's norm budget. Rows the
attack could not flip within budget come back as the unmodified originals
with a per-sample failure reason.

Input gradients are consumed through a configurable precision view. The
default "single" view rounds each gradient through float32 on the way out
of the engine, flushing magnitudes below ~1.4e-45 to exact zeros; deeply
saturated squeezed heads emit gradients far below that cutoff, so the view
makes the attacks behave like a single-precision implementation would.
Switching to "double" keeps the raw float64 gradient and shows how much
signal survives the saturation without the storage cutoff.
"""

from dataclasses import dataclass
import math

import numpy as np

from . import nn, ops
from .errors import ConfigError, ProtocolError, ShapeError
from .tensor import Tape, Tensor

GRADIENT_PRECISIONS = ("single", "double")

FAILURE_NO_FLIP = "no-flip"
FAILURE_OVER_BUDGET = "over-budget"
FAILURE_DEGENERATE = "degenerate-gradients"

_BUDGET_SLACK = 1e-9
_CW_BOX_MARGIN = 1e-6
_MIN_BOUNDARY_NORM = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    """Shared attack knobs; epsilon is a budget in the attack's own norm.

    epsilon 0 is legal: it permits no perturbation at all, so every
    attack degenerates to measuring the clean predictions.
    """

    epsilon: float = 0.1
    gradient_precision: str = "single"
    bim_iterations: int = 20
    bim_alpha_fraction: float = 0.1
    deepfool_max_iterations: int = 50
    deepfool_overshoot: float = 1.02
    cw_steps: int = 200
    cw_learning_rate: float = 0.01
    cw_search_rounds: int = 5
    cw_c_low: float = 1e-3
    cw_c_high: float = 1e2
    cw_kappa: float = 0.0
    cw_abort_early: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        if self.gradient_precision not in GRADIENT_PRECISIONS:
            raise ConfigError(
                f"gradient_precision must be one of {GRADIENT_PRECISIONS}")
        if self.bim_iterations < 1:
            raise ConfigError("bim_iterations must be at least 1")
        if not 0.0 < self.bim_alpha_fraction <= 1.0:
            raise ConfigError("bim_alpha_fraction must be in (0, 1]")
        if self.deepfool_max_iterations < 1:
            raise ConfigError("deepfool_max_iterations must be at least 1")
        if self.deepfool_overshoot < 1.0:
            raise ConfigError("deepfool_overshoot must be at least 1.0")
        if self.cw_steps < 1 or self.cw_search_rounds < 1:
            raise ConfigError("cw_steps and cw_search_rounds must be at least 1")
        if not self.cw_learning_rate > 0:
            raise ConfigError("cw_learning_rate must be positive")
        if not 0.0 < self.cw_c_low < self.cw_c_high:
            raise ConfigError("need 0 < cw_c_low < cw_c_high")
        if self.cw_kappa < 0.0:
            raise ConfigError("cw_kappa must be non-negative")


@dataclass
class AttackOutcome:
    """Batch result of one attack run.

    `adversarial` rows for failed samples are the original inputs; `linf`
    and `l2` describe the candidate perturbation before that revert, so
    failed rows keep their attempted norms for diagnostics. `prediction`
    and `confidence` are the model's argmax label and top softmax
    probability on the returned rows. `failure` holds None for successes
    and a short reason string otherwise.
    """

    attack: str
    norm: str
    epsilon: float
    success: np.ndarray
    adversarial: np.ndarray
    prediction: np.ndarray
    confidence: np.ndarray
    linf: np.ndarray
    l2: np.ndarray
    failure: tuple
    iterations: np.ndarray = None

    @property
    def success_rate(self):
        return float(np.mean(self.success))


def _check_images(model, images):
    x = np.ascontiguousarray(np.asarray(images, dtype=np.float64))
    expected = tuple(model.spec.input_shape)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError("attack", x.shape, (-1,) + expected)
    if x.shape[0] == 0:
        raise ProtocolError("attack needs at least one sample")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ProtocolError("attack inputs must lie in [0, 1]")
    return x


def _check_labels(model, labels, count, name="labels"):
    labels = np.asarray(labels)
    if labels.shape != (count,):
        raise ShapeError(name, labels.shape, (count,))
    k = model.spec.num_classes
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigError(f"{name} outside [0, {k})")
    return labels.astype(np.int64)


def _precision_view(grad, precision):
    """Round a float64 gradient through the requested storage precision."""
    if precision == "single":
        return grad.astype(np.float32).astype(np.float64)
    return grad


def _summed_cross_entropy(scores, onehot_targets):
    """Cross entropy summed (not averaged) over the batch.

    With a summed loss the backward pass never introduces a batch-size
    factor, so each gradient row is that sample's own gradient no matter
    how the batch was assembled (up to BLAS rounding, which picks
    different kernels for different matrix shapes).
    """
    picked = ops.sum_(ops.multiply(Tensor(onehot_targets),
                                   ops.log_softmax(scores)))
    return ops.scale(picked, -1.0)


def loss_input_gradient(model, images, onehot_targets, precision="single"):
    """Per-sample d(cross entropy)/d(pixels) as a (B, C, H, W) array."""
    if precision not in GRADIENT_PRECISIONS:
        raise ConfigError(f"precision must be one of {GRADIENT_PRECISIONS}")
    images = np.asarray(images, dtype=np.float64)
    onehot_targets = np.asarray(onehot_targets, dtype=np.float64)
    if onehot_targets.shape != (images.shape[0], model.spec.num_classes):
        raise ShapeError("loss_input_gradient", onehot_targets.shape,
                         (images.shape[0], model.spec.num_classes))
    with Tape() as tape:
        xt = Tensor(images)
        tape.watch(xt)
        res = nn.forward_logits(model, xt)
        loss = _summed_cross_entropy(res.scores, onehot_targets)
        grad = tape.backward(loss, wrt=[xt])[xt]
    return _precision_view(grad, precision)


def _difference_input_gradient(model, images, onehot_true, onehot_target,
                               precision):
    """Per-sample gradient of J(true) - J(target) in one sweep."""
    with Tape() as tape:
        xt = Tensor(images)
        tape.watch(xt)
        res = nn.forward_logits(model, xt)
        loss_true = _summed_cross_entropy(res.scores, onehot_true)
        loss_target = _summed_cross_entropy(res.scores, onehot_target)
        combined = ops.add(loss_true, ops.scale(loss_target, -1.0))
        grad = tape.backward(combined, wrt=[xt])[xt]
    return _precision_view(grad, precision)


def _finalize(model, attack, norm, config, originals, candidate, ref_labels,
              targeted, preset_failures=None, iterations=None):
    """Apply the success/budget contract and package an AttackOutcome."""
    candidate = np.clip(candidate, 0.0, 1.0)
    n = originals.shape[0]
    delta = (candidate - originals).reshape(n, -1)
    linf = np.abs(delta).max(axis=1)
    l2 = np.sqrt((delta ** 2).sum(axis=1))
    preds = nn.predict_labels(model, candidate)
    flipped = (preds == ref_labels) if targeted else (preds != ref_labels)
    measured = linf if norm == "linf" else l2
    in_budget = measured <= config.epsilon + _BUDGET_SLACK
    success = flipped & in_budget
    adversarial = candidate.copy()
    failures = []
    for i in range(n):
        if preset_failures is not None and preset_failures[i] is not None:
            success[i] = False
            failures.append(preset_failures[i])
        elif success[i]:
            failures.append(None)
            continue
        elif not flipped[i]:
            failures.append(FAILURE_NO_FLIP)
        else:
            failures.append(FAILURE_OVER_BUDGET)
        adversarial[i] = originals[i]
    return AttackOutcome(
        attack=attack, norm=norm, epsilon=config.epsilon,
        success=success, adversarial=adversarial,
        prediction=nn.predict_labels(model, adversarial),
        confidence=nn.predict_probs(model, adversarial).max(axis=1),
        linf=linf, l2=l2, failure=tuple(failures), iterations=iterations)


def fgsm(model, images, labels, config):
    """One signed step of size epsilon up the true-class loss.

    Pixels whose loss gradient is exactly zero do not move, so a fully
    masked gradient leaves the input untouched and the row fails with
    "no-flip".
    """
    x0 = _check_images(model, images)
    labels = _check_labels(model, labels, x0.shape[0])
    grad = loss_input_gradient(model, x0,
                               nn.onehot(labels, model.spec.num_classes),
                               config.gradient_precision)
    candidate = x0 + config.epsilon * np.sign(grad)
    return _finalize(model, "fgsm", "linf", config, x0, candidate, labels,
                     targeted=False)


def tgsm(model, images, targets, config):
    """One signed step of size epsilon down the target-class loss."""
    x0 = _check_images(model, images)
    targets = _check_labels(model, targets, x0.shape[0], name="targets")
    preds = nn.predict_labels(model, x0)
    clashes = int(np.sum(preds == targets))
    if clashes:
        raise ProtocolError(
            f"{clashes} samples are already predicted as their target class")
    grad = loss_input_gradient(model, x0,
                               nn.onehot(targets, model.spec.num_classes),
                               config.gradient_precision)
    candidate = x0 - config.epsilon * np.sign(grad)
    return _finalize(model, "tgsm", "linf", config, x0, candidate, targets,
                     targeted=True)


def tgsm_enhanced(model, images, labels, targets, config):
    """One signed step up J(true) - J(target).

    Combining both loss surfaces pushes away from the true class and toward
    the target at once, which keeps a usable direction alive when one of
    the two gradients has saturated.
    """
    x0 = _check_images(model, images)
    labels = _check_labels(model, labels, x0.shape[0])
    targets = _check_labels(model, targets, x0.shape[0], name="targets")
    if np.any(labels == targets):
        raise ProtocolError("targets must differ from the true labels")
    k = model.spec.num_classes
    grad = _difference_input_gradient(model, x0, nn.onehot(labels, k),
                                      nn.onehot(targets, k),
                                      config.gradient_precision)
    candidate = x0 + config.epsilon * np.sign(grad)
    return _finalize(model, "tgsm-enhanced", "linf", config, x0, candidate,
                     targets, targeted=True)


def _iterative_sign_attack(model, attack, images, ref_labels, loss_labels,
                           direction, targeted, config):
    """Shared BIM loop: repeated small signed steps, double-clipped.

    Each iterate is clipped to the epsilon ball around the original image
    and then to the pixel box. Samples freeze as soon as they reach the
    goal, so later iterations never walk a success back out.
    """
    x0 = _check_images(model, images)
    n = x0.shape[0]
    ref_labels = _check_labels(model, ref_labels, n)
    alpha = config.bim_alpha_fraction * config.epsilon
    onehot_loss = nn.onehot(loss_labels, model.spec.num_classes)
    adversarial = x0.copy()
    active = np.arange(n)
    iterations = np.zeros(n, dtype=np.int64)
    for _ in range(config.bim_iterations):
        preds = nn.predict_labels(model, adversarial[active])
        if targeted:
            done = preds == ref_labels[active]
        else:
            done = preds != ref_labels[active]
        active = active[~done]
        if active.size == 0:
            break
        grad = loss_input_gradient(model, adversarial[active],
                                   onehot_loss[active],
                                   config.gradient_precision)
        stepped = adversarial[active] + direction * alpha * np.sign(grad)
        stepped = np.clip(stepped, x0[active] - config.epsilon,
                          x0[active] + config.epsilon)
        adversarial[active] = np.clip(stepped, 0.0, 1.0)
        iterations[active] += 1
    return _finalize(model, attack, "linf", config, x0, adversarial,
                     ref_labels, targeted, iterations=iterations)


def bim(model, images, labels, config):
    """Iterative FGSM away from the true class inside the epsilon ball."""
    return _iterative_sign_attack(model, "bim", images, labels,
                                  np.asarray(labels), direction=1.0,
                                  targeted=False, config=config)


def bim_targeted(model, images, targets, config):
    """Iterative descent of the target-class loss inside the epsilon ball."""
    x0 = _check_images(model, images)
    targets = _check_labels(model, targets, x0.shape[0], name="targets")
    preds = nn.predict_labels(model, x0)
    clashes = int(np.sum(preds == targets))
    if clashes:
        raise ProtocolError(
            f"{clashes} samples are already predicted as their target class")
    return _iterative_sign_attack(model, "bim-targeted", x0, targets,
                                  targets, direction=-1.0, targeted=True,
                                  config=config)


def _deepfool_step(fdiff, boundary_grads, anchor, min_norm=_MIN_BOUNDARY_NORM):
    """Closed-form step to the nearest linearized class boundary.

    `fdiff` holds score differences f_k - f_anchor for every class and
    `boundary_grads` their input gradients, flattened to (K, D). Returns
    (step, class index) for the cheapest boundary, or None when every
    usable boundary gradient is below `min_norm` (a masked model).
    """
    norms = np.sqrt((boundary_grads ** 2).sum(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        distances = np.abs(fdiff) / norms
    distances[norms < min_norm] = np.inf
    distances[anchor] = np.inf
    k = int(np.argmin(distances))
    if not np.isfinite(distances[k]):
        return None
    step = (np.abs(fdiff[k]) / norms[k] ** 2) * boundary_grads[k]
    return step, k


def deepfool(model, images, labels, config):
    """Minimal-perturbation attack via per-class boundary linearization.

    Each iteration linearizes the pre-softmax head outputs around the
    current iterate (one backward per class, batched over every still
    active sample), steps just past the nearest boundary, and freezes a
    sample as soon as its label flips. Success additionally requires the
    accumulated perturbation to fit the L2 budget. Samples whose boundary
    gradients all collapse below the norm floor fail with
    "degenerate-gradients".
    """
    x0 = _check_images(model, images)
    n = x0.shape[0]
    labels = _check_labels(model, labels, n)
    preds = nn.predict_labels(model, x0)
    wrong = int(np.sum(preds != labels))
    if wrong:
        raise ProtocolError(
            f"deepfool anchors on correctly classified inputs; "
            f"{wrong} samples are already misclassified")
    k_classes = model.spec.num_classes
    adversarial = x0.copy()
    active = np.arange(n)
    failures = [None] * n
    iterations = np.zeros(n, dtype=np.int64)
    for _ in range(config.deepfool_max_iterations):
        preds = nn.predict_labels(model, adversarial[active])
        active = active[preds == labels[active]]
        if active.size == 0:
            break
        batch = adversarial[active]
        with Tape() as tape:
            xt = Tensor(batch)
            tape.watch(xt)
            res = nn.forward_logits(model, xt)
            scores = res.head_out.data
            class_grads = []
            for k in range(k_classes):
                mask = np.zeros_like(scores)
                mask[:, k] = 1.0
                total = ops.sum_(ops.multiply(res.head_out, Tensor(mask)))
                class_grads.append(tape.backward(total, wrt=[xt])[xt])
        grads = _precision_view(np.stack(class_grads), config.gradient_precision)
        grads = grads.reshape(k_classes, active.size, -1)
        survivors = []
        for i, sample in enumerate(active):
            anchor = labels[sample]
            fdiff = scores[i] - scores[i, anchor]
            result = _deepfool_step(fdiff, grads[:, i] - grads[anchor, i],
                                    anchor)
            if result is None:
                failures[sample] = FAILURE_DEGENERATE
                continue
            step = result[0].reshape(x0.shape[1:])
            moved = adversarial[sample] + config.deepfool_overshoot * step
            adversarial[sample] = np.clip(moved, 0.0, 1.0)
            iterations[sample] += 1
            survivors.append(sample)
        active = np.asarray(survivors, dtype=np.int64)
        if active.size == 0:
            break
    return _finalize(model, "deepfool", "l2", config, x0, adversarial,
                     labels, targeted=False, preset_failures=failures,
                     iterations=iterations)


def cw_l2(model, images, labels, config, targets=None):
    """L2-minimizing attack in tanh space with per-sample constant search.

    Optimizes ||x' - x||^2 + c * f(x') where f penalizes the margin of the
    anchor class over the runner-up (or, with `targets`, of the best other
    class over the target). Pixels are reparameterized through tanh so the
    iterate can never leave the box. The trade-off constant c is tuned per
    sample by geometric binary search across rounds; rows whose best flip
    already fits the L2 budget retire from later rounds, and a round aborts
    early once its total loss stops improving.
    """
    x0 = _check_images(model, images)
    n = x0.shape[0]
    labels = _check_labels(model, labels, n)
    targeted = targets is not None
    if targeted:
        targets = _check_labels(model, targets, n, name="targets")
        if np.any(targets == labels):
            raise ProtocolError("targets must differ from the true labels")
    boxed = np.clip(x0, _CW_BOX_MARGIN, 1.0 - _CW_BOX_MARGIN)
    w_origin = np.arctanh(2.0 * boxed - 1.0)
    c_low = np.full(n, config.cw_c_low)
    c_high = np.full(n, config.cw_c_high)
    c = np.sqrt(c_low * c_high)
    best_adv = x0.copy()
    best_l2 = np.full(n, np.inf)
    active = np.arange(n)
    rounds_used = np.zeros(n, dtype=np.int64)
    check_every = max(1, config.cw_steps // 10)
    for _ in range(config.cw_search_rounds):
        if active.size == 0:
            break
        rounds_used[active] += 1
        x_sub = x0[active]
        anchors = labels[active]
        goal = targets[active] if targeted else None
        weight_c = c[active]
        w = w_origin[active].copy()
        ones = np.ones_like(w)
        adam_m = np.zeros_like(w)
        adam_v = np.zeros_like(w)
        rows = np.arange(active.size)
        round_l2 = np.full(active.size, np.inf)
        round_adv = np.zeros_like(x_sub)
        round_flipped = np.zeros(active.size, dtype=bool)
        previous_total = np.inf
        for step in range(1, config.cw_steps + 1):
            with Tape() as tape:
                wt = Tensor(w)
                tape.watch(wt)
                x_adv = ops.scale(ops.add(ops.tanh(wt), Tensor(ones)), 0.5)
                res = nn.forward_logits(model, x_adv)
                scores = res.head_out.data
                masked = scores.copy()
                if targeted:
                    masked[rows, goal] = -np.inf
                    runner = np.argmax(masked, axis=1)
                    margin = masked[rows, runner] - scores[rows, goal]
                    selection = (nn.onehot(runner, scores.shape[1])
                                 - nn.onehot(goal, scores.shape[1]))
                else:
                    masked[rows, anchors] = -np.inf
                    runner = np.argmax(masked, axis=1)
                    margin = scores[rows, anchors] - masked[rows, runner]
                    selection = (nn.onehot(anchors, scores.shape[1])
                                 - nn.onehot(runner, scores.shape[1]))
                # margin <= -kappa means the hinge is flat: no class term
                needs_push = margin > -config.cw_kappa
                per_sample = ops.sum_(ops.multiply(res.head_out,
                                                   Tensor(selection)), axis=-1)
                class_term = ops.sum_(ops.multiply(
                    per_sample, Tensor(weight_c * needs_push)))
                diff = ops.subtract(x_adv, Tensor(x_sub))
                distance = ops.sum_(ops.multiply(diff, diff))
                loss = ops.add(distance, class_term)
            grad = _precision_view(tape.backward(loss, wrt=[wt])[wt],
                                   config.gradient_precision)
            adam_m = 0.9 * adam_m + 0.1 * grad
            adam_v = 0.999 * adam_v + 0.001 * grad * grad
            m_hat = adam_m / (1.0 - 0.9 ** step)
            v_hat = adam_v / (1.0 - 0.999 ** step)
            w = w - config.cw_learning_rate * m_hat / (np.sqrt(v_hat) + 1e-8)
            x_val = x_adv.data
            preds = np.argmax(res.logits.data, axis=1)
            flipped = (preds == goal) if targeted else (preds != anchors)
            norms = np.sqrt(((x_val - x_sub).reshape(active.size, -1) ** 2)
                            .sum(axis=1))
            better = flipped & (norms < round_l2)
            round_adv[better] = x_val[better]
            round_l2[better] = norms[better]
            round_flipped |= flipped
            if config.cw_abort_early and step % check_every == 0:
                total = float(loss.data)
                if total > previous_total * 0.9999:
                    break
                previous_total = total
        improved = round_l2 < best_l2[active]
        best_adv[active[improved]] = round_adv[improved]
        best_l2[active[improved]] = round_l2[improved]
        # flip found: a smaller c may do it closer; no flip: push c up
        c_high[active[round_flipped]] = np.minimum(
            c_high[active[round_flipped]], c[active[round_flipped]])
        c_low[active[~round_flipped]] = np.maximum(
            c_low[active[~round_flipped]], c[active[~round_flipped]])
        c[active] = np.sqrt(c_low[active] * c_high[active])
        active = active[best_l2[active] > config.epsilon]
    reference = targets if targeted else labels
    return _finalize(model, "cw-l2", "l2", config, x0, best_adv, reference,
                     targeted=targeted, iterations=rounds_used)


def linf_to_l2_budget(epsilon, n_pixels):
    """L2 budget of comparable strength to an Linf ball of radius epsilon.

    A signed epsilon step moves every pixel at once for an L2 length of
    epsilon * sqrt(n); the half-normal correction sqrt(2 / (pi * e))
    discounts that to the typical length of an equally powerful dense
    perturbation: epsilon * sqrt(2 n / (pi e)).
    """
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    if n_pixels < 1:
        raise ConfigError("n_pixels must be at least 1")
    return float(epsilon * math.sqrt(2.0 * n_pixels / (math.pi * math.e)))


@dataclass(frozen=True)
class AttackSpec:
    """Registry row: uniform (model, x, labels, targets, config) runner."""

    name: str
    norm: str
    targeted: bool
    run: object


def _run_fgsm(model, x, labels, targets, config):
    return fgsm(model, x, labels, config)


def _run_tgsm(model, x, labels, targets, config):
    return tgsm(model, x, targets, config)


def _run_tgsm_enhanced(model, x, labels, targets, config):
    return tgsm_enhanced(model, x, labels, targets, config)


def _run_bim(model, x, labels, targets, config):
    return bim(model, x, labels, config)


def _run_bim_targeted(model, x, labels, targets, config):
    return bim_targeted(model, x, targets, config)


def _run_deepfool(model, x, labels, targets, config):
    return deepfool(model, x, labels, config)


def _run_cw_l2(model, x, labels, targets, config):
    return cw_l2(model, x, labels, config)


ATTACKS = {spec.name: spec for spec in (
    AttackSpec("fgsm", "linf", False, _run_fgsm),
    AttackSpec("tgsm", "linf", True, _run_tgsm),
    AttackSpec("tgsm-enhanced", "linf", True, _run_tgsm_enhanced),
    AttackSpec("bim", "linf", False, _run_bim),
    AttackSpec("bim-targeted", "linf", True, _run_bim_targeted),
    AttackSpec("deepfool", "l2", False, _run_deepfool),
    AttackSpec("cw-l2", "l2", False, _run_cw_l2),
)}
