"""Defense pipelines: defensive distillation and the squeezed-head model zoo.

All four variants share one architecture and one training seed so their only
degree of freedom is the defense itself:

- "normal":            linear head, trained at T=1 on hard labels
- "distilled":         linear head, teacher at T -> soft labels -> student at T
- "squeezed-sigmoid":  sigmoid squash between logits and softmax, trained at T
- "squeezed-tanh":     tanh squash between logits and softmax, trained at T

Every trained model is deployed with inference_temperature 1.0, which is what
drives the logit blow-up and the resulting gradient masking.
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError
from .nn import TrainConfig, conv_stack_spec

VARIANTS = ("normal", "distilled", "squeezed-sigmoid", "squeezed-tanh")
TEACHER_NAME = "distilled-teacher"
MANIFEST_NAME = "manifest.json"

_HEAD_FOR_VARIANT = {
    "normal": "linear",
    "distilled": "linear",
    "squeezed-sigmoid": "squeezed-sigmoid",
    "squeezed-tanh": "squeezed-tanh",
}


@dataclass(frozen=True)
class ZooProtocol:
    """Training recipe shared by all zoo variants.

    Squeezed heads get a higher learning rate and more epochs: their softmax
    input is confined to the squash range, which both weakens early gradient
    signal and sets a loss floor that keeps pushing logits outward, so they
    need longer to reach accuracy parity and deep saturation.
    """

    temperature: float = 20.0
    widths: tuple = (8, 8, 16, 16)
    dense: tuple = (50, 50)
    dropout_p: float = 0.25
    seed: int = 0
    batch_size: int = 128
    epochs: int = 8
    learning_rate: float = 0.001
    squeezed_epochs: int = 12
    squeezed_learning_rate: float = 0.003

    def spec_for(self, variant, input_shape, num_classes):
        head = _HEAD_FOR_VARIANT[variant]
        train_t = 1.0 if variant == "normal" else self.temperature
        return conv_stack_spec(input_shape, head, train_t, self.widths,
                               self.dense, self.dropout_p, num_classes)

    def train_config_for(self, variant, verbose=False):
        squeezed = variant.startswith("squeezed")
        return TrainConfig(
            learning_rate=self.squeezed_learning_rate if squeezed
            else self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.squeezed_epochs if squeezed else self.epochs,
            seed=self.seed,
            verbose=verbose,
        )


DESK_PROTOCOL = ZooProtocol()


@dataclass
class DistillationResult:
    teacher: nn.TrainedModel
    student: nn.TrainedModel
    teacher_metrics: dict = field(default_factory=dict)
    student_metrics: dict = field(default_factory=dict)


def soft_labels(model, images, temperature, batch_size=1024):
    """Teacher's softened class distributions at the given temperature."""
    probs = nn.predict_probs(model, images, batch_size=batch_size,
                             temperature=temperature)
    return probs


def distill(spec, images, labels, cfg, verbose=False):
    """Defensive distillation: teacher and student share spec, seed, and T.

    The teacher trains on hard labels at spec.train_temperature; its softened
    predictive distribution on the same training inputs becomes the student's
    target. Both come back with inference_temperature 1.0.
    """
    if spec.train_temperature <= 1.0:
        raise ConfigError("distillation needs train_temperature > 1")
    teacher, teacher_metrics = nn.train(spec, images, labels, cfg)
    soft = soft_labels(teacher, images, spec.train_temperature)
    student, student_metrics = nn.train(spec, images, labels, cfg,
                                        soft_targets=soft)
    return DistillationResult(teacher, student, teacher_metrics, student_metrics)


def _evaluate(model, train_ds, test_ds):
    return {
        "train_accuracy": nn.accuracy(model, train_ds.images, train_ds.labels),
        "test_accuracy": nn.accuracy(model, test_ds.images, test_ds.labels),
    }


def build_zoo(out_dir, train_ds, test_ds, protocol=DESK_PROTOCOL, force=False,
              verbose=False, provenance=None):
    """Train all variants, checkpoint them, and write a manifest.

    Returns (manifest_dict, {name: TrainedModel}) including the distillation
    teacher under "distilled-teacher". Refuses to overwrite an existing
    manifest unless force is set. A provenance dict, when given, is embedded
    verbatim in the manifest.
    """
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    if os.path.exists(manifest_path) and not force:
        raise ConfigError(f"{manifest_path} already exists (use force)")
    os.makedirs(out_dir, exist_ok=True)
    if train_ds.num_classes != test_ds.num_classes:
        raise ConfigError("train/test class count mismatch")
    input_shape = train_ds.images.shape[1:]

    models = {}
    variants_info = {}
    for variant in VARIANTS:
        spec = protocol.spec_for(variant, input_shape, train_ds.num_classes)
        cfg = protocol.train_config_for(variant, verbose=verbose)
        if verbose:
            print(f"[zoo] training {variant}")
        info = {}
        if variant == "distilled":
            result = distill(spec, train_ds.images, train_ds.labels, cfg,
                             verbose=verbose)
            model = result.student
            teacher_file = f"{TEACHER_NAME}.ckpt"
            save_checkpoint(result.teacher, os.path.join(out_dir, teacher_file))
            models[TEACHER_NAME] = result.teacher
            info["teacher_file"] = teacher_file
            info["teacher"] = _evaluate(result.teacher, train_ds, test_ds)
            info["epoch_losses"] = result.student_metrics["epoch_losses"]
        else:
            model, metrics = nn.train(spec, train_ds.images, train_ds.labels, cfg)
            info["epoch_losses"] = metrics["epoch_losses"]
        info.update(_evaluate(model, train_ds, test_ds))
        info["file"] = f"{variant}.ckpt"
        save_checkpoint(model, os.path.join(out_dir, info["file"]))
        models[variant] = model
        variants_info[variant] = info
        if verbose:
            print(f"[zoo] {variant}: test accuracy {info['test_accuracy']:.4f}")

    manifest = {
        "dataset": {
            "train_name": train_ds.name,
            "train_hash": train_ds.content_hash(),
            "train_count": len(train_ds),
            "test_name": test_ds.name,
            "test_hash": test_ds.content_hash(),
            "test_count": len(test_ds),
            "num_classes": train_ds.num_classes,
            "input_shape": list(input_shape),
        },
        "protocol": asdict(protocol),
        "variants": variants_info,
    }
    if provenance is not None:
        manifest["provenance"] = provenance
    # round trip through JSON so the returned dict equals a later reload
    # (tuples become lists, keys sort)
    manifest = json.loads(json.dumps(manifest, sort_keys=True))
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest, models


def load_zoo(zoo_dir):
    """Read a built zoo back: (manifest, {variant: TrainedModel})."""
    manifest_path = os.path.join(zoo_dir, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise ConfigError(f"no {MANIFEST_NAME} in {zoo_dir}; build the zoo first")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    models = {}
    for variant, info in manifest["variants"].items():
        models[variant] = load_checkpoint(os.path.join(zoo_dir, info["file"]))
        if "teacher_file" in info:
            models[TEACHER_NAME] = load_checkpoint(
                os.path.join(zoo_dir, info["teacher_file"]))
    return manifest, models
