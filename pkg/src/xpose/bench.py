"""Transferability evaluation protocols.

Success rate is plain top-1 misclassification over *all* evaluation
images. Adversarial examples are crafted once per (white box, attack) and
every transform is applied afterwards to that same batch.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .attack import craft
from .graph import forward, predict_logits
from .validation import check_images, check_labels
from .xform import IDENTITY, TransformSpec, rotate
from .zoo import as_graph

__all__ = [
    "TransferRow",
    "TransferReport",
    "SweepCurve",
    "FeatureDiffReport",
    "success_rate",
    "clean_transform_protocol",
    "single_model_protocol",
    "ensemble_protocol",
    "rotation_protocol",
    "ratio_statistics",
    "rotation_sweep",
    "feature_diff",
    "select_feature_pair",
]


@dataclass
class TransferRow:
    black_box: str
    baseline_rate: float
    transformed_rate: float
    baseline_predictions: np.ndarray = field(default=None, repr=False, compare=False)
    transformed_predictions: np.ndarray = field(default=None, repr=False, compare=False)


@dataclass
class TransferReport:
    """One table row group: a white box (or ensemble) and attack against black boxes."""

    white_box: str
    attack: str
    transform: str
    rows: list
    dataset: str = ""
    seed: int = 0
    n_images: int = 0
    labels: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def black_boxes(self):
        return [r.black_box for r in self.rows]

    def row(self, black_box):
        for r in self.rows:
            if r.black_box == black_box:
                return r
        raise KeyError(black_box)


@dataclass
class SweepCurve:
    black_box: str
    points: list  # [(angle_deg, rate)]

    @property
    def argmax(self):
        """Point with the highest rate; ties go to the smallest angle."""
        best = None
        for angle, rate in sorted(self.points):
            if best is None or rate > best[1]:
                best = (angle, rate)
        return best


@dataclass
class FeatureDiffReport:
    layer: str
    k: int
    indices: np.ndarray
    scores: np.ndarray
    maps_without: np.ndarray
    maps_with: np.ndarray
    abs_diff: np.ndarray
    input_without: np.ndarray
    input_with: np.ndarray


def _name(model):
    return as_graph(model).name


def _predict(model, X):
    return predict_logits(as_graph(model), X).argmax(axis=1)


def _rate_from_predictions(pred, labels):
    return 100.0 * int(np.count_nonzero(pred != labels)) / len(labels)


def success_rate(model, images, labels):
    """Percentage of ``images`` whose top-1 prediction differs from ``labels``."""
    graph = as_graph(model)
    images = check_images(images, graph.input_spec)
    if len(images) == 0:
        raise ValueError("success_rate needs at least one image")
    labels = check_labels(labels, graph.num_classes, len(images))
    return _rate_from_predictions(_predict(graph, images), labels)


def _evaluate(x, labels, models, spec, white_box, attack, dataset, seed):
    transformed = spec.apply(x)
    rows = []
    for m in models:
        base = _predict(m, x)
        if spec == IDENTITY:
            moved = base.copy()
        else:
            moved = _predict(m, transformed)
        rows.append(
            TransferRow(
                _name(m),
                _rate_from_predictions(base, labels),
                _rate_from_predictions(moved, labels),
                base,
                moved,
            )
        )
    return TransferReport(white_box, attack, str(spec), rows, dataset, seed, len(labels), labels)


def _prepare(models, X, y):
    graphs = [as_graph(m) for m in models]
    if not graphs:
        raise ValueError("at least one model is required")
    X = check_images(X, graphs[0].input_spec)
    if len(X) == 0:
        raise ValueError("at least one evaluation image is required")
    y = check_labels(y, graphs[0].num_classes, len(X))
    return graphs, X, y


def clean_transform_protocol(models, X, y, spec, dataset="", seed=0):
    """Misclassification of clean images with and without ``spec``; nothing is crafted."""
    graphs, X, y = _prepare(models, X, y)
    return _evaluate(X, y, graphs, spec, "", "clean", dataset, seed)


def _check_disjoint(white, black):
    white_names = {g.name for g in white}
    overlap = sorted(white_names & {g.name for g in black})
    if overlap:
        raise ValueError(f"white-box and black-box model sets overlap: {overlap}")


def single_model_protocol(white_box, black_boxes, X, y, attack_cfg, spec, x_adv=None, dataset="", attack_name=None):
    """Craft on ``white_box`` once, evaluate raw and transformed AEs on every black box.

    Pass a cached ``x_adv`` to skip crafting.
    """
    return ensemble_protocol([white_box], black_boxes, X, y, attack_cfg, spec, x_adv, dataset, attack_name)


def ensemble_protocol(ensemble, black_boxes, X, y, attack_cfg, spec, x_adv=None, dataset="", attack_name=None):
    """As :func:`single_model_protocol`, crafting on the mean-logit ensemble."""
    members = [as_graph(m) for m in ensemble]
    blacks, X, y = _prepare(black_boxes, X, y)
    _check_disjoint(members, blacks)
    if x_adv is None:
        x_adv = craft(members, X, y, attack_cfg)
    elif x_adv.shape != X.shape:
        raise ValueError(f"cached AEs have shape {x_adv.shape}, expected {X.shape}")
    name = "+".join(m.name for m in members)
    return _evaluate(x_adv, y, blacks, spec, name, attack_name or attack_cfg.variant, dataset, attack_cfg.seed)


def rotation_protocol(white_box, black_boxes, X, y, attack_cfg, angles=(1.0, -1.0), x_adv=None, dataset="", attack_name=None):
    """Small-rotation comparison: one report per angle, all on the same AEs."""
    members = white_box if isinstance(white_box, (list, tuple)) else [white_box]
    if x_adv is None:
        blacks, X, y = _prepare(black_boxes, X, y)
        _check_disjoint([as_graph(m) for m in members], blacks)
        x_adv = craft(members, X, y, attack_cfg)
    return [
        ensemble_protocol(members, black_boxes, X, y, attack_cfg, TransformSpec.rotation(a), x_adv, dataset, attack_name)
        for a in angles
    ]


def ratio_statistics(reports):
    """Max and mean of transformed/baseline over all cells with a nonzero baseline.

    Returns ``(max_ratio, mean_ratio, n_cells, n_skipped)``; ratios are NaN
    when every baseline is zero.
    """
    ratios = []
    skipped = 0
    for rep in reports:
        for row in rep.rows:
            if row.baseline_rate > 0:
                ratios.append(row.transformed_rate / row.baseline_rate)
            else:
                skipped += 1
    if not ratios:
        return float("nan"), float("nan"), 0, skipped
    return max(ratios), float(np.mean(ratios)), len(ratios), skipped


def rotation_sweep(white_box, black_boxes, X, y, attack_cfg, stride_deg=10, x_adv=None, order=None):
    """Success rate per black box over rotations 0, stride, ..., 360 - stride.

    ``order`` optionally permutes the evaluation order of angles; curves are
    always reported sorted by angle.
    """
    if stride_deg <= 0 or 360 % stride_deg:
        raise ValueError(f"stride {stride_deg} must be a positive divisor of 360")
    members = white_box if isinstance(white_box, (list, tuple)) else [white_box]
    blacks, X, y = _prepare(black_boxes, X, y)
    _check_disjoint([as_graph(m) for m in members], blacks)
    if x_adv is None:
        x_adv = craft(members, X, y, attack_cfg)
    angles = [i * stride_deg for i in range(360 // stride_deg)]
    if order is not None:
        angles = [angles[i] for i in order]
    rates = {g.name: {} for g in blacks}
    for angle in angles:
        rotated = rotate(x_adv, angle)
        for g in blacks:
            rates[g.name][angle] = _rate_from_predictions(_predict(g, rotated), y)
    return [SweepCurve(g.name, sorted(rates[g.name].items())) for g in blacks]


def _as_batch(x):
    x = np.asarray(x, dtype=np.float32)
    return x[None] if x.ndim == 3 else x


def feature_diff(black_box, x_fail, x_success, layer, k=16):
    """Rank the channels of ``layer`` by mean absolute activation change.

    ``x_fail`` is an AE the black box still classifies correctly and
    ``x_success`` its slightly rotated twin that fools it. Channels are
    sorted by descending mean absolute difference (stable, so ties keep
    the lower index first) and the top ``k`` are returned.
    """
    graph = as_graph(black_box)
    a, b = _as_batch(x_fail), _as_batch(x_success)
    if len(a) != 1 or len(b) != 1:
        raise ValueError("feature_diff compares exactly one image pair")
    _, acts_a = forward(graph, a, taps=[layer])
    _, acts_b = forward(graph, b, taps=[layer])
    fa, fb = acts_a[layer][0], acts_b[layer][0]
    channels = fa.shape[-1]
    if k > channels:
        warnings.warn(f"k={k} exceeds the {channels} channels of {layer!r}; clamping", stacklevel=2)
        k = channels
    diff = np.abs(fa - fb)
    scores = diff.reshape(-1, channels).astype(np.float64).mean(axis=0)
    order = np.argsort(-scores, kind="stable")[:k]
    move = lambda t: np.moveaxis(t[..., order], -1, 0)  # noqa: E731
    return FeatureDiffReport(layer, k, order, scores, move(fa), move(fb), move(diff), a[0], b[0])


def select_feature_pair(black_box, x_adv, labels, angles=(1.0, -1.0)):
    """First AE that fails on ``black_box`` but succeeds after one of ``angles``.

    Returns ``(index, angle, x_fail, x_success)`` or ``None``.
    """
    graph = as_graph(black_box)
    base = _predict(graph, x_adv)
    for angle in angles:
        rotated = rotate(x_adv, angle)
        moved = _predict(graph, rotated)
        hits = np.flatnonzero((base == labels) & (moved != labels))
        if hits.size:
            i = int(hits[0])
            return i, float(angle), x_adv[i], rotated[i]
    return None
