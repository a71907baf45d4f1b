"""Static model graphs and reverse-mode gradients.

A :class:`ModelGraph` is an ordered list of layers. ``forward`` records a
tape of per-layer caches when gradients are needed; ``backward_*`` replays
it in reverse. The loss is always the batch-mean softmax cross-entropy.
"""

import copy

import numpy as np

from .exceptions import NumericError, ShapeError, UnknownTapError
from .layers import layer_from_config

__all__ = [
    "ModelGraph",
    "forward",
    "predict_logits",
    "cross_entropy",
    "backward_to_input",
    "backward_to_params",
    "loss_and_gradients",
]


class ModelGraph:
    """A named feed-forward classifier.

    Parameters
    ----------
    name : str
    input_spec : tuple
        ``(h, w, c, num_classes)``.
    layers : list of Layer
        Built in place with parameters drawn from ``seed``.
    seed : int
    """

    def __init__(self, name, input_spec, layers, seed=0):
        h, w, c, num_classes = (int(v) for v in input_spec)
        self.name = name
        self.input_spec = (h, w, c, num_classes)
        self.layers = list(layers)
        names = [layer.name for layer in self.iter_layers()]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate layer names in {name!r}: {dupes}")
        rng = np.random.default_rng(seed)
        shape = (h, w, c)
        for layer in self.layers:
            shape = layer.build(shape, rng)
        if shape != (1, 1, num_classes):
            raise ShapeError(f"model {name!r} emits shape {shape}, expected (1, 1, {num_classes})")

    @property
    def num_classes(self):
        return self.input_spec[3]

    def iter_layers(self):
        """All layers depth-first, residual branches included."""
        for layer in self.layers:
            yield layer
            yield from layer.sublayers()

    @property
    def layer_names(self):
        return [layer.name for layer in self.iter_layers()]

    def named_parameters(self, trainable_only=False):
        """``(qualified_name, array)`` pairs in graph order."""
        out = []
        for layer in self.iter_layers():
            for key, value in layer.params.items():
                if trainable_only and key not in layer.trainable:
                    continue
                out.append((f"{layer.name}.{key}", value))
        return out

    def set_parameter(self, qualified, value):
        lname, key = qualified.rsplit(".", 1)
        for layer in self.iter_layers():
            if layer.name == lname:
                layer.params[key] = value
                return
        raise KeyError(qualified)

    def describe(self):
        return {
            "name": self.name,
            "input_spec": list(self.input_spec),
            "layers": [layer.describe() for layer in self.layers],
        }

    @classmethod
    def from_description(cls, desc):
        layers = [layer_from_config(d) for d in desc["layers"]]
        return cls(desc["name"], desc["input_spec"], layers)

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        """Copy with every parameter cast to ``dtype`` (used by gradient checks)."""
        out = self.copy()
        for layer in out.iter_layers():
            layer.params = {k: v.astype(dtype) for k, v in layer.params.items()}
        return out

    def __call__(self, x, taps=()):
        return forward(self, x, taps)

    def __repr__(self):
        return f"ModelGraph({self.name!r}, input_spec={self.input_spec}, layers={len(self.layers)})"


def _check_input(model, x):
    h, w, c, _ = model.input_spec
    if not isinstance(x, np.ndarray) or x.ndim != 4 or x.shape[1:] != (h, w, c):
        first = model.layers[0].name if model.layers else model.name
        shape = getattr(x, "shape", None)
        raise ShapeError(
            f"layer {first!r}: model {model.name!r} expects input [b, {h}, {w}, {c}], got shape {shape}"
        )


def _run(model, x, taps=(), training=False, tape=False):
    _check_input(model, x)
    taps = set(taps)
    valid = model.layer_names
    for t in taps:
        if t not in valid:
            raise UnknownTapError(t, valid)
    acts = {}
    caches = []
    h = x
    for layer in model.layers:
        if layer.sublayers():
            h, cache = layer.forward(h, training=training, tape=tape, taps=taps, acts=acts)
        else:
            h, cache = layer.forward(h, training=training, tape=tape)
        caches.append(cache)
        if layer.name in taps:
            acts[layer.name] = h
    return h, acts, caches


def forward(model, x, taps=()):
    """Logits ``(b, 1, 1, num_classes)`` and the requested activations.

    Parameters
    ----------
    model : ModelGraph
    x : ndarray of shape (b, h, w, c)
    taps : iterable of str
        Layer names whose outputs to return.
    """
    logits, acts, _ = _run(model, x, taps)
    return logits, acts


def predict_logits(model, x, batch_size=256):
    """2-D logits ``(b, num_classes)``, evaluated in chunks."""
    chunks = [
        forward(model, x[i : i + batch_size])[0].reshape(-1, model.num_classes)
        for i in range(0, len(x), batch_size)
    ]
    if not chunks:
        return np.zeros((0, model.num_classes), dtype=np.float32)
    return np.concatenate(chunks)


def _check_labels(labels, num_classes, batch):
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ShapeError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def cross_entropy(logits, labels):
    """Batch-mean cross-entropy and its gradient w.r.t. ``logits``.

    ``logits`` may be 2-D or ``(b, 1, 1, n)``; the gradient has the same shape.
    """
    shape = logits.shape
    z = logits.reshape(shape[0], -1)
    labels = _check_labels(labels, z.shape[1], z.shape[0])
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    b = z.shape[0]
    loss = -logp[np.arange(b), labels].mean()
    if not np.isfinite(loss):
        raise NumericError(f"non-finite cross-entropy loss ({loss})")
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1
    grad /= b
    return float(loss), grad.astype(logits.dtype).reshape(shape)


def _backward(model, caches, dlogits, input_grad=True):
    g = dlogits
    grads = {}
    first = model.layers[0]
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        if layer is first and not input_grad and layer.kind == "conv2d":
            g, lg = layer.backward(g, cache, need_dx=False)
        else:
            g, lg = layer.backward(g, cache)
        for key, value in lg.items():
            if isinstance(value, dict):
                for k2, v2 in value.items():
                    grads[f"{key}.{k2}"] = v2
            else:
                grads[f"{layer.name}.{key}"] = value
    return g, grads


def loss_and_gradients(model, x, labels, training=False, dlogits_fn=None, input_grad=True):
    """Run forward + backward once.

    Returns ``(loss, input_grad, param_grads)``; ``input_grad`` is None when
    not requested (the trainer skips it). ``dlogits_fn`` may replace
    the cross-entropy head: it receives the logits and returns
    ``(loss, dlogits)``.
    """
    x = np.asarray(x)
    logits, _, caches = _run(model, x, training=training, tape=True)
    if dlogits_fn is None:
        loss, dlogits = cross_entropy(logits, labels)
    else:
        loss, dlogits = dlogits_fn(logits)
    dx, grads = _backward(model, caches, dlogits, input_grad)
    if dx is not None and not np.all(np.isfinite(dx)):
        raise NumericError("non-finite input gradient")
    return loss, dx, grads


def backward_to_input(model, x, labels):
    """Gradient of the mean cross-entropy with respect to ``x``."""
    return loss_and_gradients(model, x, labels)[1]


def backward_to_params(model, x, labels):
    """Gradient of the mean cross-entropy for every trainable parameter.

    Keys are qualified ``layer.param`` names in graph order.
    """
    _, _, grads = loss_and_gradients(model, x, labels)
    order = [name for name, _ in model.named_parameters(trainable_only=True)]
    return {name: grads[name] for name in order}

