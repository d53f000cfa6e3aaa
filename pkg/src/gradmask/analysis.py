"""Evaluation protocol, masking diagnostics, and report assembly.

The protocol attacks only inputs the model already classifies correctly,
so success rates measure errors the attack induced rather than errors the
model brought along. Everything downstream (per-sample records, summary
rows, masking statistics) is derived from those runs deterministically.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
import csv
import json
import math

import numpy as np

from . import nn
from .attacks import ATTACKS, loss_input_gradient
from .errors import ConfigError, ProtocolError
from .tensor import Tensor

_DEGENERATE_GRAD_NORM = 1e-12


def select_attack_pool(model, images, labels, count, seed=0,
                       exclude_label=None):
    """Indices of up to `count` correctly classified samples.

    The subset is drawn with a seeded shuffle and returned sorted, so a
    fixed (model, data, seed) triple always yields the same pool. With
    `exclude_label`, samples of that class are left out; targeted runs
    use it so no input already belongs to the target class.
    """
    if count < 1:
        raise ConfigError("pool count must be at least 1")
    labels = np.asarray(labels)
    preds = nn.predict_labels(model, images)
    eligible = preds == labels
    if exclude_label is not None:
        eligible &= labels != exclude_label
    correct = np.flatnonzero(eligible)
    if correct.size == 0:
        raise ProtocolError(
            "model classifies no eligible sample correctly; nothing to attack")
    rng = np.random.default_rng(seed)
    picked = correct[rng.permutation(correct.size)[:count]]
    return np.sort(picked)


def _median(values):
    return float(np.median(values)) if len(values) else None


def summary_from_records(records):
    """Success-rate summary recomputed from per-sample records.

    Works identically on fresh evaluation records and on records read back
    from a JSONL file, so reports never depend on in-memory state.
    """
    if not records:
        raise ProtocolError("no attack records to summarize")
    successes = [r for r in records if r["success"]]
    return {
        "pool": len(records),
        "successes": len(successes),
        "success_rate": len(successes) / len(records),
        "median_linf_success": _median([r["linf"] for r in successes]),
        "median_l2_success": _median([r["l2"] for r in successes]),
        "median_confidence_success": _median(
            [r["confidence"] for r in successes]),
    }


@dataclass
class AttackEvaluation:
    """One attack run against one model under the pool protocol."""

    model_name: str
    attack: str
    norm: str
    epsilon: float
    gradient_precision: str
    pool: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    outcome: object

    @property
    def success_rate(self):
        return self.outcome.success_rate

    def records(self):
        """Per-sample dicts, one per attacked input, JSON-ready."""
        out = []
        o = self.outcome
        for i, source_index in enumerate(self.pool):
            out.append({
                "index": int(source_index),
                "label": int(self.labels[i]),
                "target": None if self.targets is None else int(self.targets[i]),
                "success": bool(o.success[i]),
                "failure": o.failure[i],
                "prediction": int(o.prediction[i]),
                "confidence": float(o.confidence[i]),
                "linf": float(o.linf[i]),
                "l2": float(o.l2[i]),
                "iterations": None if o.iterations is None
                              else int(o.iterations[i]),
            })
        return out

    def write_records(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.records():
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def summary_row(self):
        row = {
            "model": self.model_name,
            "attack": self.attack,
            "norm": self.norm,
            "epsilon": self.epsilon,
            "gradient_precision": self.gradient_precision,
        }
        row.update(summary_from_records(self.records()))
        return row


def _merge_outcomes(parts):
    """Concatenate per-chunk outcomes back into one, in chunk order."""
    first = parts[0]
    if len(parts) == 1:
        return first
    iterations = None
    if first.iterations is not None:
        iterations = np.concatenate([p.iterations for p in parts])
    failure = tuple(reason for p in parts for reason in p.failure)
    return replace(
        first,
        success=np.concatenate([p.success for p in parts]),
        adversarial=np.concatenate([p.adversarial for p in parts]),
        prediction=np.concatenate([p.prediction for p in parts]),
        confidence=np.concatenate([p.confidence for p in parts]),
        linf=np.concatenate([p.linf for p in parts]),
        l2=np.concatenate([p.l2 for p in parts]),
        failure=failure, iterations=iterations)


def evaluate_attack(model, attack_name, images, labels, config,
                    pool_size=1000, seed=0, target_class=2,
                    model_name="model", jobs=1):
    """Run one registered attack under the pool protocol.

    Targeted attacks aim every sample at the fixed `target_class`, and the
    pool excludes inputs that already carry that label. With jobs > 1 the
    pool is split into index-ordered chunks attacked on a thread pool;
    results merge back in pool order, so completion order never shows.
    """
    try:
        spec = ATTACKS[attack_name]
    except KeyError:
        raise ConfigError(
            f"unknown attack {attack_name!r}; have {sorted(ATTACKS)}") from None
    if jobs < 1:
        raise ConfigError("jobs must be at least 1")
    labels = np.asarray(labels)
    exclude = None
    if spec.targeted:
        if not 0 <= target_class < model.spec.num_classes:
            raise ConfigError(
                f"target_class {target_class} outside "
                f"[0, {model.spec.num_classes})")
        exclude = target_class
    pool = select_attack_pool(model, images, labels, pool_size, seed=seed,
                              exclude_label=exclude)
    x = images[pool]
    y = labels[pool]
    targets = None
    if spec.targeted:
        targets = np.full(y.shape, target_class, dtype=np.int64)
    jobs = min(jobs, len(pool))
    if jobs == 1:
        outcome = spec.run(model, x, y, targets, config)
    else:
        bounds = np.linspace(0, len(pool), jobs + 1).astype(int)
        chunks = [(x[a:b], y[a:b], None if targets is None else targets[a:b])
                  for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ThreadPoolExecutor(max_workers=jobs) as pool_exec:
            futures = [pool_exec.submit(spec.run, model, cx, cy, ct, config)
                       for cx, cy, ct in chunks]
            outcome = _merge_outcomes([f.result() for f in futures])
    return AttackEvaluation(
        model_name=model_name, attack=attack_name, norm=spec.norm,
        epsilon=config.epsilon, gradient_precision=config.gradient_precision,
        pool=pool, labels=y, targets=targets, outcome=outcome)


def read_records(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def provenance_comment(provenance):
    """One `# key=value ...` line identifying the run that wrote a CSV."""
    pairs = " ".join(f"{key}={provenance[key]}" for key in sorted(provenance))
    return f"# {pairs}\n"


def write_report(rows, csv_path=None, json_path=None, provenance=None):
    """Write summary rows as CSV and/or JSON with a stable column order.

    A provenance dict, when given, becomes a leading comment line in the
    CSV and a top-level key in the JSON.
    """
    if not rows:
        raise ProtocolError("report needs at least one row")
    fields = list(rows[0])
    for row in rows[1:]:
        if list(row) != fields:
            raise ConfigError("report rows have inconsistent columns")
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            if provenance is not None:
                fh.write(provenance_comment(provenance))
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
    if json_path is not None:
        payload = {"rows": rows}
        if provenance is not None:
            payload["provenance"] = provenance
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


# --------------------------------------------------------------------------
# gradient masking diagnostics


@dataclass(frozen=True)
class GradientMaskStats:
    """Input-gradient health of one model over a sample set.

    Norms are float64; the f32 fractions describe what survives the
    single-precision view (a row counts as zero when every element of its
    gradient flushes to exactly 0.0).
    """

    count: int
    median_grad_norm: float
    median_grad_linf: float
    min_grad_norm: float
    max_grad_norm: float
    zero_row_fraction_f32: float
    zero_element_fraction_f32: float
    median_abs_logit: float
    saturated_head_fraction: float

    def to_dict(self):
        return {
            "count": self.count,
            "median_grad_norm": self.median_grad_norm,
            "median_grad_linf": self.median_grad_linf,
            "min_grad_norm": self.min_grad_norm,
            "max_grad_norm": self.max_grad_norm,
            "zero_row_fraction_f32": self.zero_row_fraction_f32,
            "zero_element_fraction_f32": self.zero_element_fraction_f32,
            "median_abs_logit": self.median_abs_logit,
            "saturated_head_fraction": self.saturated_head_fraction,
        }


def _saturated_fraction(head, head_out):
    if head == "squeezed-sigmoid":
        return float(np.mean((head_out == 0.0) | (head_out == 1.0)))
    if head == "squeezed-tanh":
        return float(np.mean(np.abs(head_out) == 1.0))
    return 0.0


def gradient_mask_stats(model, images, labels, batch_size=256,
                        target_class=None):
    """Measure how much loss gradient reaches the input pixels.

    By default the loss is the cross-entropy against each sample's own
    label; with `target_class` set, it is the cross-entropy against that
    fixed class instead, the quantity a targeted attack differentiates.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise ProtocolError("gradient statistics need at least one sample")
    if target_class is not None:
        if not 0 <= target_class < model.spec.num_classes:
            raise ConfigError(
                f"target_class {target_class} outside "
                f"[0, {model.spec.num_classes})")
        labels = np.full(images.shape[0], target_class, dtype=np.int64)
    onehot = nn.onehot(labels, model.spec.num_classes)
    norms, linfs, zero_rows, zero_elements, total_elements = [], [], 0, 0, 0
    abs_logits, saturated = [], []
    for lo in range(0, images.shape[0], batch_size):
        batch = images[lo:lo + batch_size]
        grad = loss_input_gradient(model, batch, onehot[lo:lo + batch_size],
                                   precision="double")
        flat = grad.reshape(batch.shape[0], -1)
        norms.append(np.sqrt((flat ** 2).sum(axis=1)))
        linfs.append(np.abs(flat).max(axis=1))
        f32 = flat.astype(np.float32)
        zero_rows += int(np.sum(np.all(f32 == 0.0, axis=1)))
        zero_elements += int(np.sum(f32 == 0.0))
        total_elements += f32.size
        res = nn.forward_logits(model, Tensor(batch))
        abs_logits.append(np.abs(res.logits.data).ravel())
        saturated.append(_saturated_fraction(model.spec.head,
                                             res.head_out.data))
    norms = np.concatenate(norms)
    return GradientMaskStats(
        count=int(images.shape[0]),
        median_grad_norm=float(np.median(norms)),
        median_grad_linf=float(np.median(np.concatenate(linfs))),
        min_grad_norm=float(norms.min()),
        max_grad_norm=float(norms.max()),
        zero_row_fraction_f32=zero_rows / images.shape[0],
        zero_element_fraction_f32=zero_elements / total_elements,
        median_abs_logit=float(np.median(np.concatenate(abs_logits))),
        saturated_head_fraction=float(np.mean(saturated)),
    )


def masking_ratio(reference, masked):
    """How many times weaker the masked model's input gradient is.

    Ratio of median float64 max-abs gradient entries, reference over
    masked; infinite when the masked median is exactly zero.
    """
    if masked.median_grad_linf == 0.0:
        return math.inf
    return reference.median_grad_linf / masked.median_grad_linf


# --------------------------------------------------------------------------
# loss surface


@dataclass
class LossSurface:
    """Cross-entropy values on a plane through one input.

    `values[i, j]` is the loss at x + alphas[i] * u + betas[j] * v where u
    is the normalized loss-gradient direction (or a seeded random one when
    the gradient is degenerate) and v a random direction orthogonal to u.
    The center entry is the loss at x itself, bit-identical to evaluating
    x directly.
    """

    alphas: np.ndarray
    betas: np.ndarray
    values: np.ndarray
    center: float
    gradient_norm: float
    degenerate: bool
    mode: str
    direction_u: np.ndarray
    direction_v: np.ndarray

    def to_dict(self):
        return {
            "alphas": self.alphas.tolist(),
            "betas": self.betas.tolist(),
            "values": self.values.tolist(),
            "center": self.center,
            "gradient_norm": self.gradient_norm,
            "degenerate": self.degenerate,
            "mode": self.mode,
            "direction_u": self.direction_u.tolist(),
            "direction_v": self.direction_v.tolist(),
        }


def _pointwise_loss(model, images, labels, batch_size=256):
    """Per-sample cross entropy from the scores, safe under saturation."""
    losses = []
    labels = np.asarray(labels)
    for lo in range(0, images.shape[0], batch_size):
        res = nn.forward_logits(model, Tensor(images[lo:lo + batch_size]))
        s = res.scores.data
        m = s.max(axis=1)
        lse = m + np.log(np.exp(s - m[:, None]).sum(axis=1))
        losses.append(lse - s[np.arange(s.shape[0]),
                              labels[lo:lo + batch_size]])
    return np.concatenate(losses)


def loss_surface(model, image, label, span=0.5, steps=41, seed=0,
                 mode="gradient"):
    """Sample the loss on a plane around one input.

    The grid is steps x steps over [-span, span]^2 in per-pixel units:
    directions carry unit max-norm, so span 0.1 displaces the largest
    pixel by 0.1 and the plane covers the same range an eps=0.1 attack
    may use. Steps must be odd so the exact input sits at the center.
    Mode "gradient" aligns the first axis with the loss gradient, falling
    back to a seeded random direction when the gradient is degenerate;
    mode "random" uses a seeded random first axis outright. Pixels are
    not clipped: the plane shows the raw loss function the attacker
    differentiates, not the feasible region.
    """
    if mode not in ("gradient", "random"):
        raise ConfigError(f"mode must be 'gradient' or 'random', not {mode!r}")
    if steps < 3 or steps % 2 == 0:
        raise ConfigError("steps must be odd and at least 3")
    if not span > 0:
        raise ConfigError("span must be positive")
    x = np.asarray(image, dtype=np.float64)
    if x.shape != tuple(model.spec.input_shape):
        raise ConfigError(
            f"image shape {x.shape} does not match {model.spec.input_shape}")
    onehot = nn.onehot(np.asarray([label]), model.spec.num_classes)
    grad = loss_input_gradient(model, x[None], onehot, precision="double")[0]
    grad_norm = float(np.sqrt((grad ** 2).sum()))
    rng = np.random.default_rng(seed)
    degenerate = grad_norm < _DEGENERATE_GRAD_NORM
    if mode == "random" or degenerate:
        u = rng.normal(size=x.shape)
    else:
        u = grad
    u = u / np.abs(u).max()
    v = rng.normal(size=x.shape)
    v -= (v * u).sum() / (u * u).sum() * u
    v /= np.abs(v).max()

    alphas = np.linspace(-span, span, steps)
    betas = np.linspace(-span, span, steps)
    alphas[steps // 2] = 0.0
    betas[steps // 2] = 0.0
    offsets_a = alphas[:, None, None, None] * u        # (S, C, H, W)
    offsets_b = betas[:, None, None, None] * v
    grid = x + offsets_a[:, None] + offsets_b[None, :]  # (S, S, C, H, W)
    flat = grid.reshape(steps * steps, *x.shape)
    values = _pointwise_loss(model, flat,
                             np.full(steps * steps, label)).reshape(steps,
                                                                    steps)
    center = float(values[steps // 2, steps // 2])
    return LossSurface(alphas=alphas, betas=betas, values=values,
                       center=center, gradient_norm=grad_norm,
                       degenerate=degenerate, mode=mode,
                       direction_u=u, direction_v=v)


# --------------------------------------------------------------------------
# squeezed-head probability bounds


@dataclass(frozen=True)
class HeadProbabilityBounds:
    """Closed-form softmax limits for a bounded score head.

    With scores confined to [low, high], the top class can reach at most
    `ceiling` probability (own score at the top rail, all others at the
    bottom), no class can fall below `floor`, and in the fully saturated
    pattern every non-top class holds exactly `saturated_runner_up`.
    `loss_floor` is the cross entropy at the ceiling: training can push
    the loss no lower, which keeps gradient pressure on the logits alive
    indefinitely.
    """

    head: str
    num_classes: int
    score_low: float
    score_high: float
    ceiling: float
    floor: float
    saturated_runner_up: float
    loss_floor: float


def head_probability_bounds(head, num_classes):
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    if head == "squeezed-sigmoid":
        low, high = 0.0, 1.0
    elif head == "squeezed-tanh":
        low, high = -1.0, 1.0
    else:
        raise ConfigError(f"head {head!r} has unbounded scores")
    rest = num_classes - 1
    e_high, e_low = math.exp(high), math.exp(low)
    return HeadProbabilityBounds(
        head=head, num_classes=num_classes, score_low=low, score_high=high,
        ceiling=e_high / (e_high + rest * e_low),
        floor=e_low / (e_low + rest * e_high),
        saturated_runner_up=e_low / (e_high + rest * e_low),
        loss_floor=-math.log(e_high / (e_high + rest * e_low)),
    )


@dataclass
class ScoreBoundAudit:
    """Observed score/probability extremes checked against the bounds."""

    bounds: HeadProbabilityBounds
    observed_score_min: float
    observed_score_max: float
    observed_top_prob_max: float
    observed_prob_min: float
    within_bounds: bool

    def to_dict(self):
        return {
            "head": self.bounds.head,
            "num_classes": self.bounds.num_classes,
            "ceiling": self.bounds.ceiling,
            "floor": self.bounds.floor,
            "saturated_runner_up": self.bounds.saturated_runner_up,
            "loss_floor": self.bounds.loss_floor,
            "observed_score_min": self.observed_score_min,
            "observed_score_max": self.observed_score_max,
            "observed_top_prob_max": self.observed_top_prob_max,
            "observed_prob_min": self.observed_prob_min,
            "within_bounds": self.within_bounds,
        }


def score_bound_audit(model, images, batch_size=1024):
    """Check a squeezed model's scores and probabilities against theory."""
    bounds = head_probability_bounds(model.spec.head, model.spec.num_classes)
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        raise ProtocolError("score audit needs at least one sample")
    score_min, score_max = math.inf, -math.inf
    top_max, prob_min = -math.inf, math.inf
    for lo in range(0, images.shape[0], batch_size):
        res = nn.forward_logits(model, Tensor(images[lo:lo + batch_size]))
        s = res.head_out.data
        p = res.probs.data
        score_min = min(score_min, float(s.min()))
        score_max = max(score_max, float(s.max()))
        top_max = max(top_max, float(p.max(axis=1).max()))
        prob_min = min(prob_min, float(p.min()))
    within = (score_min >= bounds.score_low - 1e-12
              and score_max <= bounds.score_high + 1e-12
              and top_max <= bounds.ceiling + 1e-9
              and prob_min >= bounds.floor - 1e-9)
    return ScoreBoundAudit(
        bounds=bounds, observed_score_min=score_min,
        observed_score_max=score_max, observed_top_prob_max=top_max,
        observed_prob_min=prob_min, within_bounds=within)
