"""Model specs, forward passes, heads, training, and gradient identity checks.

Three output heads share one convolutional trunk:

  linear           P = softmax(Z / T)
  squeezed-sigmoid P = softmax(sigmoid(Z / T))
  squeezed-tanh    P = softmax(tanh(Z / T))

The training temperature T lives inside the head; inference always runs at
T = 1, which is what saturates the squashed activations and starves white-box
attacks of input gradient.
"""

import time
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError, TrainingDiverged
from .tensor import Tape, Tensor

HEADS = ("linear", "squeezed-sigmoid", "squeezed-tanh")


@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Dropout:
    p: float


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple  # (C, H, W)
    layers: tuple
    head: str
    num_classes: int
    train_temperature: float = 1.0

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}; choices: {HEADS}")
        if not self.train_temperature > 0:
            raise ConfigError("train_temperature must be positive")
        self.validate()

    def validate(self):
        """Walk the layer chain and confirm adjacent shapes are compatible."""
        shape = tuple(self.input_shape)
        if len(shape) != 3:
            raise ConfigError(f"input_shape must be (C, H, W), got {shape}")
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3 or shape[0] != layer.in_ch:
                    raise ConfigError(
                        f"layer {i} (Conv) expects {layer.in_ch} channels, "
                        f"incoming shape is {shape}"
                    )
                shape = (layer.out_ch, shape[1], shape[2])
            elif isinstance(layer, MaxPool):
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ConfigError(f"layer {i} (MaxPool) needs even H, W; got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif isinstance(layer, Flatten):
                if len(shape) != 3:
                    raise ConfigError(f"layer {i} (Flatten) after flatten")
                shape = (shape[0] * shape[1] * shape[2],)
            elif isinstance(layer, Dense):
                if len(shape) != 1 or shape[0] != layer.in_features:
                    raise ConfigError(
                        f"layer {i} (Dense) expects {layer.in_features} features, "
                        f"incoming shape is {shape}"
                    )
                shape = (layer.out_features,)
            elif isinstance(layer, Dropout):
                if not 0.0 <= layer.p < 1.0:
                    raise ConfigError(f"layer {i} (Dropout) p={layer.p} outside [0, 1)")
            elif isinstance(layer, ReLU):
                pass
            else:
                raise ConfigError(f"layer {i}: unknown layer {layer!r}")
        if shape != (self.num_classes,):
            raise ConfigError(
                f"final layer produces {shape}, expected ({self.num_classes},)"
            )
        return True


def conv_stack_spec(input_shape, head="linear", train_temperature=1.0,
                    widths=(8, 8, 16, 16), dense=(50, 50), dropout_p=0.5,
                    num_classes=10):
    """Double conv-conv-pool stack over any (C, H, W) with H, W % 4 == 0."""
    ch, height, width = input_shape
    if height % 4 or width % 4:
        raise ConfigError("conv stack needs side lengths divisible by 4")
    if len(widths) != 4:
        raise ConfigError("conv stack needs exactly 4 conv widths")
    if len(dense) != 2:
        raise ConfigError("conv stack needs exactly 2 dense widths")
    w1, w2, w3, w4 = widths
    d1, d2 = dense
    flat = w4 * (height // 4) * (width // 4)
    layers = (
        Conv(ch, w1), ReLU(),
        Conv(w1, w2), ReLU(),
        MaxPool(),
        Conv(w2, w3), ReLU(),
        Conv(w3, w4), ReLU(),
        MaxPool(),
        Flatten(),
        Dense(flat, d1), ReLU(), Dropout(dropout_p),
        Dense(d1, d2), ReLU(), Dropout(dropout_p),
        Dense(d2, num_classes),
    )
    return ModelSpec(tuple(input_shape), layers, head, num_classes,
                     train_temperature)


def mnist_model_spec(head="linear", train_temperature=1.0, widths=(8, 8, 16, 16),
                     dense=(50, 50), dropout_p=0.5):
    """28x28x1 conv net; default widths are quarter scale of the full model
    (32, 32, 64, 64) / (200, 200) so it trains in desk time."""
    return conv_stack_spec((1, 28, 28), head, train_temperature, widths,
                           dense, dropout_p)


def cifar10_model_spec(head="linear", train_temperature=1.0,
                       widths=(32, 64, 128, 128, 256, 256), dense=(1024, 256),
                       dropout_p=0.5):
    """32x32x3 conv net mirroring the full-scale reference layout."""
    w1, w2, w3, w4, w5, w6 = widths
    d1, d2 = dense
    flat = w6 * 4 * 4
    layers = (
        Conv(3, w1), ReLU(),
        Conv(w1, w2), ReLU(),
        MaxPool(),
        Conv(w2, w3), ReLU(),
        Conv(w3, w4), ReLU(),
        MaxPool(),
        Conv(w4, w5), ReLU(),
        Conv(w5, w6), ReLU(),
        Dropout(dropout_p),
        MaxPool(),
        Flatten(),
        Dense(flat, d1), ReLU(), Dropout(dropout_p),
        Dense(d1, d2), ReLU(), Dropout(dropout_p),
        Dense(d2, 10),
    )
    return ModelSpec((3, 32, 32), layers, head, 10, train_temperature)


def init_params(spec, rng):
    """Kaiming-uniform weights (fan-in), zero biases; draw order is fixed."""
    params = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            fan_in = layer.in_ch * 9
            bound = np.sqrt(6.0 / fan_in)
            params[f"layer{i}.weight"] = Tensor(
                rng.uniform(-bound, bound, size=(layer.out_ch, layer.in_ch, 3, 3))
            )
            params[f"layer{i}.bias"] = Tensor(np.zeros(layer.out_ch))
        elif isinstance(layer, Dense):
            fan_in = layer.in_features
            bound = np.sqrt(6.0 / fan_in)
            params[f"layer{i}.weight"] = Tensor(
                rng.uniform(-bound, bound, size=(layer.in_features, layer.out_features))
            )
            params[f"layer{i}.bias"] = Tensor(np.zeros(layer.out_features))
    return params


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: dict
    inference_temperature: float = 1.0


ForwardResult = namedtuple("ForwardResult", ["logits", "head_out", "scores", "probs"])


def dropout_mask(rng, shape, p):
    """Inverted-scaling mask: zeros with probability p, else 1/(1-p)."""
    if p == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def forward_logits(model, x, temperature=None, train_mode=False, rng=None):
    """Run the net on a (B, C, H, W) Tensor.

    Returns (logits, head_out, scores, probs): raw final-dense outputs Z,
    the head values before temperature bookkeeping (Z itself for the linear
    head, the squashed values for squeezed heads), the exact softmax input,
    and the softmax probabilities.
    """
    if temperature is None:
        temperature = model.inference_temperature
    if not temperature > 0:
        raise ConfigError("temperature must be positive")
    if not isinstance(x, Tensor):
        x = Tensor(x)
    spec = model.spec
    if x.ndim != 4 or x.shape[1:] != tuple(spec.input_shape):
        raise ShapeError("forward", x.shape, (-1,) + tuple(spec.input_shape))
    if train_mode and rng is None and any(
        isinstance(l, Dropout) and l.p > 0 for l in spec.layers
    ):
        raise ConfigError("train_mode forward needs an rng for dropout masks")

    h = x
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            h = ops.conv2d(h, model.params[f"layer{i}.weight"],
                           model.params[f"layer{i}.bias"])
        elif isinstance(layer, ReLU):
            h = ops.relu(h)
        elif isinstance(layer, MaxPool):
            h = ops.maxpool2x2(h)
        elif isinstance(layer, Flatten):
            h = ops.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
        elif isinstance(layer, Dense):
            h = ops.bias_add(ops.matmul(h, model.params[f"layer{i}.weight"]),
                             model.params[f"layer{i}.bias"])
        elif isinstance(layer, Dropout):
            if train_mode and layer.p > 0:
                h = ops.dropout_apply(h, dropout_mask(rng, h.shape, layer.p))
        else:
            raise ConfigError(f"unknown layer {layer!r}")

    logits = h
    inv_t = 1.0 / float(temperature)
    if spec.head == "linear":
        head_out = logits
        scores = ops.scale(logits, inv_t)
    elif spec.head == "squeezed-sigmoid":
        head_out = ops.sigmoid(ops.scale(logits, inv_t))
        scores = head_out
    else:  # squeezed-tanh
        head_out = ops.tanh(ops.scale(logits, inv_t))
        scores = head_out
    return ForwardResult(logits, head_out, scores, ops.softmax(scores))


def _check_onehot(o):
    if not np.all((o == 0.0) | (o == 1.0)) or not np.all(o.sum(axis=-1) == 1.0):
        raise ConfigError("targets are not one-hot rows")


def cross_entropy_loss(scores, targets):
    """J = -sum_k o_k log P_k with P = softmax(scores), batch-averaged.

    `scores` is the pre-softmax ForwardResult.scores tensor. `targets` must
    be strictly one-hot; use soft_cross_entropy_loss for distillation-style
    soft targets.
    """
    t_arr = targets.data if isinstance(targets, Tensor) else np.asarray(targets, float)
    _check_onehot(t_arr)
    return soft_cross_entropy_loss(scores, t_arr)


def soft_cross_entropy_loss(scores, targets):
    """J = -sum_k q_k log P_k with arbitrary distribution rows q.

    Computed through a fused log-softmax so a fully confident model (exact
    zeros in softmax output) still yields a finite loss.
    """
    if not isinstance(targets, Tensor):
        targets = Tensor(targets)
    if scores.shape != targets.shape:
        raise ShapeError("cross_entropy", scores.shape, targets.shape)
    t_arr = targets.data
    if not np.allclose(t_arr.sum(axis=-1), 1.0, atol=1e-9) or t_arr.min() < 0:
        raise ConfigError("target rows must be probability distributions")
    n_rows = scores.shape[0] if scores.ndim == 2 else 1
    picked = ops.sum_(ops.multiply(targets, ops.log_softmax(scores)))
    return ops.scale(picked, -1.0 / n_rows)


def onehot(labels, num_classes):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ConfigError(f"labels outside [0, {num_classes})")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def predict_probs(model, images, batch_size=1024, temperature=None):
    """Untraced forward in chunks; returns (N, K) probabilities."""
    images = np.asarray(images, dtype=np.float64)
    chunks = []
    for lo in range(0, images.shape[0], batch_size):
        res = forward_logits(model, Tensor(images[lo:lo + batch_size]),
                             temperature=temperature)
        chunks.append(res.probs.data)
    return np.concatenate(chunks, axis=0)


def predict_labels(model, images, batch_size=1024):
    """Argmax labels, read off the raw logits.

    Softmax and the squeezed squashes preserve order, so this matches
    argmax of the probabilities in exact arithmetic; taking it on the
    logits keeps deeply saturated score gaps from flattening into float
    ties. np.argmax breaks remaining ties toward the lowest index.
    """
    images = np.asarray(images, dtype=np.float64)
    chunks = []
    for lo in range(0, images.shape[0], batch_size):
        res = forward_logits(model, Tensor(images[lo:lo + batch_size]))
        chunks.append(np.argmax(res.logits.data, axis=1))
    return np.concatenate(chunks).astype(np.int64)


def accuracy(model, images, labels, batch_size=1024):
    pred = predict_labels(model, images, batch_size)
    return float(np.mean(pred == np.asarray(labels)))


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 5
    seed: int = 0
    verbose: bool = False


class AdamState:
    """Per-parameter first/second moment accumulators."""

    def __init__(self, params):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, params, grads, cfg):
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        new_params = {}
        for k, tensor in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            mh = self.m[k] / bc1
            vh = self.v[k] / bc2
            new_params[k] = Tensor(
                tensor.data - cfg.learning_rate * mh / (np.sqrt(vh) + cfg.eps)
            )
        return new_params


def train(spec, images, labels, cfg, soft_targets=None):
    """Train a fresh model; bit-reproducible for a fixed cfg.seed.

    `soft_targets` (N, K) replaces the one-hot labels in the loss while the
    hard labels still drive nothing else (distillation). Training runs at
    spec.train_temperature; the returned model carries inference_temperature
    1.0. Raises TrainingDiverged when the loss stops being finite.

    Returns (model, metrics) where metrics has per-epoch mean losses.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    n = images.shape[0]
    if n == 0:
        raise ConfigError("empty training set")
    targets = onehot(labels, spec.num_classes) if soft_targets is None \
        else np.asarray(soft_targets, dtype=np.float64)
    if targets.shape != (n, spec.num_classes):
        raise ShapeError("train", targets.shape, (n, spec.num_classes))

    rng = np.random.default_rng(cfg.seed)
    params = init_params(spec, rng)
    model = TrainedModel(spec, params, inference_temperature=1.0)
    adam = AdamState(params)
    epoch_losses = []
    t0 = time.perf_counter()

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            xb = Tensor(images[idx])
            tb = targets[idx]
            with Tape() as tape:
                for t in model.params.values():
                    tape.watch(t)
                res = forward_logits(model, xb, temperature=spec.train_temperature,
                                     train_mode=True, rng=rng)
                loss = soft_cross_entropy_loss(res.scores, tb)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDiverged(epoch, bi, loss_val)
            grads_by_node = tape.backward(loss, wrt=list(model.params.values()))
            grads = {k: grads_by_node[t] for k, t in model.params.items()}
            model.params = adam.step(model.params, grads, cfg)
            batch_losses.append(loss_val)
        epoch_losses.append(float(np.mean(batch_losses)))
        if cfg.verbose:
            print(f"  epoch {epoch + 1}/{cfg.epochs}  loss {epoch_losses[-1]:.4f}  "
                  f"({time.perf_counter() - t0:.1f}s)")

    metrics = {"epoch_losses": epoch_losses}
    return model, metrics


def logit_gradient_identity_check(model, x, target_onehot):
    """Max |dJ/dz_k - (P_k - o_k)| for a single sample, linear head at T=1.

    The softmax/cross-entropy gradient identity only takes this clean form
    without a squashing head, so other heads are rejected.
    """
    if model.spec.head != "linear":
        raise ConfigError("identity check requires the linear head")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3:
        x = Tensor(x.data[None])
    o = np.asarray(target_onehot, dtype=np.float64).reshape(1, -1)
    _check_onehot(o)
    with Tape() as tape:
        tape.watch(x)
        res = forward_logits(model, x, temperature=1.0)
        loss = soft_cross_entropy_loss(res.scores, o)
    g_z = tape.backward(loss, wrt=[res.logits])[res.logits]
    want = res.probs.data - o
    return float(np.abs(g_z - want).max())


def squeezed_chain_identity_check(model, x, target_onehot):
    """Normwise rel. error between the autodiff input gradient of J and its
    per-class decomposition sum_k (P_k - o_k) * s'(z_k) * dz_k/dx, where s'
    is zhat(1-zhat) for the sigmoid head and 1-zhat^2 for the tanh head."""
    if model.spec.head not in ("squeezed-sigmoid", "squeezed-tanh"):
        raise ConfigError("chain identity check requires a squeezed head")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3:
        x = Tensor(x.data[None])
    o = np.asarray(target_onehot, dtype=np.float64).reshape(1, -1)
    _check_onehot(o)
    k = model.spec.num_classes

    with Tape() as tape:
        tape.watch(x)
        res = forward_logits(model, x, temperature=1.0)
        loss = soft_cross_entropy_loss(res.scores, o)
        zks = []
        for cls in range(k):
            e = np.zeros((1, k))
            e[0, cls] = 1.0
            zks.append(ops.sum_(ops.multiply(res.logits, Tensor(e))))
    auto = tape.backward(loss, wrt=[x])[x]

    zhat = res.head_out.data[0]
    p = res.probs.data[0]
    if model.spec.head == "squeezed-sigmoid":
        sat = zhat * (1.0 - zhat)
    else:
        sat = 1.0 - zhat * zhat
    coef = (p - o[0]) * sat

    decomposed = np.zeros_like(x.data)
    for cls in range(k):
        dz_dx = tape.backward(zks[cls], wrt=[x])[x]
        decomposed += coef[cls] * dz_dx

    denom = max(np.abs(auto).max(), np.abs(decomposed).max(), 1e-300)
    return float(np.abs(auto - decomposed).max() / denom)
