"""Toy classifier zoo, trainer, and the :class:`CNNClassifier` estimator."""

import logging
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import NumericError, ShapeError
from .graph import ModelGraph, loss_and_gradients, predict_logits
from .layers import AvgPoolGlobal, BatchNorm, Conv2d, Dense, Flatten, MaxPool, ReLU, Residual
from .validation import check_images, check_labels

__all__ = ["ARCHITECTURES", "build_model", "build_zoo", "TrainConfig", "train", "CNNClassifier"]

log = logging.getLogger(__name__)

ARCHITECTURES = ("plain", "wide", "residual", "vgg")


def _plain(n):
    return [
        Conv2d("conv1", 12, 3, 1, 1), BatchNorm("bn1"), ReLU("relu1"), MaxPool("pool1", 2),
        Conv2d("conv2", 24, 3, 1, 1), BatchNorm("bn2"), ReLU("relu2"), MaxPool("pool2", 2),
        Conv2d("conv3", 32, 3, 1, 1), BatchNorm("bn3"), ReLU("relu3"), MaxPool("pool3", 2),
        AvgPoolGlobal("gap"), Flatten("flatten"), Dense("fc", n),
    ]  # fmt: skip


def _wide(n):
    return [
        Conv2d("conv1", 16, 5, 1, 2), BatchNorm("bn1"), ReLU("relu1"), MaxPool("pool1", 2),
        Conv2d("conv2", 48, 3, 1, 1), BatchNorm("bn2"), ReLU("relu2"), MaxPool("pool2", 2),
        Conv2d("conv3", 64, 1, 1, 0), ReLU("relu3"), MaxPool("pool3", 2),
        AvgPoolGlobal("gap"), Flatten("flatten"), Dense("fc", n),
    ]  # fmt: skip


def _residual(n):
    return [
        Conv2d("conv1", 16, 3, 1, 1), BatchNorm("bn1"), ReLU("relu1"), MaxPool("pool1", 2),
        Residual("block1", [Conv2d("block1.conv1", 16, 3, 1, 1), BatchNorm("block1.bn"),
                            ReLU("block1.relu"), Conv2d("block1.conv2", 16, 3, 1, 1)]),
        ReLU("relu2"), MaxPool("pool2", 2),
        Conv2d("conv2", 32, 3, 1, 1), BatchNorm("bn2"), ReLU("relu3"), MaxPool("pool3", 2),
        AvgPoolGlobal("gap"), Flatten("flatten"), Dense("fc", n),
    ]  # fmt: skip


def _vgg(n):
    return [
        Conv2d("conv1_1", 8, 3, 1, 1), BatchNorm("bn1_1"), ReLU("relu1_1"), MaxPool("pool1", 2),
        Conv2d("conv2_1", 16, 3, 1, 1), BatchNorm("bn2_1"), ReLU("relu2_1"),
        Conv2d("conv2_2", 16, 3, 1, 1), ReLU("relu2_2"), MaxPool("pool2", 2),
        Conv2d("conv3_1", 32, 3, 1, 1), BatchNorm("bn3_1"), ReLU("relu3_1"),
        Conv2d("conv3_2", 32, 3, 1, 1), ReLU("relu3_2"), MaxPool("pool3", 2),
        AvgPoolGlobal("gap"), Flatten("flatten"), Dense("fc", n),
    ]  # fmt: skip


_BUILDERS = {"plain": _plain, "wide": _wide, "residual": _residual, "vgg": _vgg}


def build_model(arch, input_spec, seed=0, name=None):
    """One zoo architecture with freshly initialised parameters."""
    if arch not in _BUILDERS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    h, w, c, n = input_spec
    if h < 16 or w < 16:
        raise ShapeError(f"input {h}x{w} is too small for the pooling pyramid (need >= 16x16)")
    return ModelGraph(name or arch, input_spec, _BUILDERS[arch](n), seed=seed)


def build_zoo(input_spec, seed=0):
    """The four fixed architectures: plain, wide, residual and VGG-style."""
    return [build_model(arch, input_spec, seed=seed + i) for i, arch in enumerate(ARCHITECTURES)]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    adv_epsilon: float = None
    adv_steps: int = 3

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be >= 0 and momentum in [0, 1)")
        if self.adv_epsilon is not None and not (0 < self.adv_epsilon <= 1 and self.adv_steps >= 1):
            raise ValueError("adv_epsilon must lie in (0, 1] and adv_steps >= 1")

    def to_dict(self):
        return asdict(self)


def accuracy(model, X, y):
    if len(X) == 0:
        return float("nan")
    return float((predict_logits(model, X).argmax(axis=1) == y).mean())


def train(model, X, y, cfg, X_test=None, y_test=None):
    """Train ``model`` in place with SGD + momentum; returns ``(model, metrics)``.

    The learning rate drops by 10x after 80% of the epochs. With
    ``cfg.adv_epsilon`` set, each batch is extended with I-FGSM examples
    crafted against the current parameters.
    """
    X = check_images(X, model.input_spec)
    y = check_labels(y, model.num_classes, len(X))
    rng = np.random.default_rng(cfg.seed)
    params = model.named_parameters(trainable_only=True)
    velocity = {name: np.zeros_like(p) for name, p in params}
    decay_at = int(0.8 * cfg.epochs)
    losses = []
    adv_cfg = None
    if cfg.adv_epsilon is not None:
        from .attack import AttackConfig, craft

        adv_cfg = AttackConfig(epsilon=cfg.adv_epsilon, iters=cfg.adv_steps, momentum=0.0, variant="IFGSM")
    for epoch in range(cfg.epochs):
        lr = np.float32(cfg.learning_rate * (0.1 if epoch >= decay_at and cfg.epochs > 1 else 1.0))
        order = rng.permutation(len(X))
        epoch_loss = 0.0
        for bi, start in enumerate(range(0, len(X), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            xb, yb = X[idx], y[idx]
            if adv_cfg is not None:
                xb = np.concatenate([xb, craft(model, xb, yb, adv_cfg)])
                yb = np.concatenate([yb, yb])
            try:
                loss, _, grads = loss_and_gradients(model, xb, yb, training=True, input_grad=False)
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch}, batch {bi}: {exc}") from exc
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericError(f"training diverged at epoch {epoch}, batch {bi}: non-finite gradient")
            for name, p in params:
                v = velocity[name]
                v *= np.float32(cfg.momentum)
                v += grads[name]
                p -= lr * v
            epoch_loss += loss * len(idx)
        losses.append(epoch_loss / len(X))
        log.info("%s epoch %d loss %.4f", model.name, epoch, losses[-1])
    metrics = {"loss": losses, "train_accuracy": accuracy(model, X, y)}
    if X_test is not None:
        metrics["test_accuracy"] = accuracy(model, check_images(X_test, model.input_spec), y_test)
    return model, metrics


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """scikit-learn classifier around one zoo architecture.

    Parameters
    ----------
    arch : {"plain", "wide", "residual", "vgg"}
    epochs, batch_size, learning_rate, momentum : training schedule
    adv_epsilon : float or None
        When set, train adversarially with I-FGSM at this budget.
    adv_steps : int
    random_state : int
        Seeds both parameter initialisation and batch order.

    Attributes
    ----------
    graph_ : ModelGraph
    classes_ : ndarray
    metrics_ : dict
    """

    def __init__(
        self,
        arch="plain",
        epochs=6,
        batch_size=32,
        learning_rate=0.05,
        momentum=0.9,
        adv_epsilon=None,
        adv_steps=3,
        random_state=0,
        name=None,
    ):
        self.arch = arch
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.adv_epsilon = adv_epsilon
        self.adv_steps = adv_steps
        self.random_state = random_state
        self.name = name

    def train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            seed=self.random_state,
            adv_epsilon=self.adv_epsilon,
            adv_steps=self.adv_steps,
        )

    def fit(self, X, y, X_test=None, y_test=None):
        X = check_images(X)
        y = np.asarray(y)
        self.classes_ = np.arange(int(y.max()) + 1)
        spec = (*X.shape[1:], len(self.classes_))
        graph = build_model(self.arch, spec, seed=self.random_state, name=self.name)
        self.graph_, self.metrics_ = train(graph, X, y, self.train_config(), X_test, y_test)
        return self

    @classmethod
    def from_graph(cls, graph, **params):
        """Wrap an already trained graph (e.g. a loaded checkpoint)."""
        est = cls(name=graph.name, **params)
        est.graph_ = graph
        est.classes_ = np.arange(graph.num_classes)
        est.metrics_ = {}
        return est

    def decision_function(self, X):
        check_is_fitted(self, "graph_")
        return predict_logits(self.graph_, check_images(X, self.graph_.input_spec))

    def predict_proba(self, X):
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "graph_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]


def as_graph(model):
    """Accept a ModelGraph or a fitted CNNClassifier."""
    if isinstance(model, ModelGraph):
        return model
    graph = getattr(model, "graph_", None)
    if graph is None:
        raise TypeError(f"expected a ModelGraph or fitted CNNClassifier, got {type(model).__name__}")
    return graph
