"""Gradient-sign transfer attacks.

Every attack runs the same momentum loop::

    g <- mu * g + grad / ||grad||_1          (per image)
    x <- clip_[0,1](clip_eps(x + alpha * sign(g)))

and differs only in how ``grad`` is produced (input diversity, Gaussian
smoothing, scale copies, flat-region sampling) or, for GI-FGSM, in how the
momentum is initialised.
"""

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import NumericError
from .graph import _backward, _run, cross_entropy, loss_and_gradients
from .validation import check_images, check_labels, check_unit_range
from .zoo import as_graph

__all__ = [
    "VARIANTS",
    "AttackConfig",
    "craft",
    "ensemble_gradient",
    "gaussian_kernel",
    "smooth_gradient",
    "diversity_indices",
    "TransferAttack",
]

VARIANTS = ("IFGSM", "MIFGSM", "DIM", "TIM", "SIM", "PGN", "GIFGSM")


@dataclass(frozen=True)
class AttackConfig:
    """Attack hyperparameters.

    ``epsilon`` and ``step_size`` are in [0, 1] pixel units; ``step_size``
    defaults to ``epsilon / iters``. ``neighborhood`` is in units of
    ``epsilon``.
    """

    variant: str = "MIFGSM"
    epsilon: float = 16 / 255
    iters: int = 10
    step_size: float = None
    momentum: float = 1.0
    diversity_prob: float = 0.5
    resize_ratio: float = 1.1
    kernel_size: int = 7
    n_copies: int = 5
    n_samples: int = 20
    balance: float = 0.5
    neighborhood: float = 3.0
    pre_iters: int = 5
    global_factor: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        checks = [
            (0 <= self.epsilon <= 1, "epsilon must lie in [0, 1]"),
            (self.iters >= 1, "iters must be >= 1"),
            (self.step_size is None or self.step_size > 0, "step_size must be > 0"),
            (self.momentum >= 0, "momentum must be >= 0"),
            (0 <= self.diversity_prob <= 1, "diversity_prob must lie in [0, 1]"),
            (self.resize_ratio >= 1, "resize_ratio must be >= 1"),
            (self.kernel_size >= 1 and self.kernel_size % 2 == 1, "kernel_size must be odd"),
            (self.n_copies >= 1, "n_copies must be >= 1"),
            (self.n_samples >= 1, "n_samples must be >= 1"),
            (0 <= self.balance <= 1, "balance must lie in [0, 1]"),
            (self.neighborhood >= 0, "neighborhood must be >= 0"),
            (self.pre_iters >= 0, "pre_iters must be >= 0"),
            (self.global_factor >= 1, "global_factor must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @property
    def alpha(self):
        return self.step_size if self.step_size is not None else self.epsilon / self.iters

    @property
    def effective_momentum(self):
        return 0.0 if self.variant == "IFGSM" else self.momentum

    def to_dict(self):
        return asdict(self)

    def replace(self, **changes):
        return replace(self, **changes)


def ensemble_gradient(models, x, labels):
    """Input gradient of the cross-entropy of the members' mean logits."""
    models = [as_graph(m) for m in (models if isinstance(models, (list, tuple)) else [models])]
    if len(models) == 1:
        return loss_and_gradients(models[0], x, labels)[1]
    spec = models[0].input_spec
    if any(m.input_spec != spec for m in models):
        raise ValueError("ensemble members must share one input_spec")
    runs = [_run(m, x, tape=True) for m in models]
    mean_logits = sum(r[0] for r in runs) / len(models)
    _, dmean = cross_entropy(mean_logits, labels)
    dmember = dmean / len(models)
    total = None
    for m, (_, _, caches) in zip(models, runs):
        dx, _ = _backward(m, caches, dmember)
        total = dx if total is None else total + dx
    if not np.all(np.isfinite(total)):
        raise NumericError("non-finite input gradient")
    return total


def _l1_normalize(g):
    norm = np.abs(g).sum(axis=tuple(range(1, g.ndim)), keepdims=True)
    return g / np.where(norm == 0, 1, norm).astype(g.dtype)


def gaussian_kernel(size, sigma=None):
    """Normalised 2-D Gaussian of odd ``size``; ``sigma`` defaults to size/3."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    sigma = size / 3 if sigma is None else sigma
    r = np.arange(size) - size // 2
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    return k / k.sum()


def smooth_gradient(g, size):
    """Depthwise same-padded convolution of ``g`` with a Gaussian kernel."""
    if size == 1:
        return g
    kernel = gaussian_kernel(size).astype(g.dtype)
    r = size // 2
    gp = np.pad(g, ((0, 0), (r, r), (r, r), (0, 0)))
    h, w = g.shape[1:3]
    out = np.zeros_like(g)
    for a in range(size):
        for b in range(size):
            # kernel is symmetric, so correlation and convolution coincide
            out += kernel[a, b] * gp[:, a : a + h, b : b + w, :]
    return out


def _axis_map(size, resized, pad_before, total):
    """Nearest-neighbour source index per output position (-1 = zero pad)."""
    padded = (np.arange(size) * total) // size
    local = padded - pad_before
    valid = (local >= 0) & (local < resized)
    return np.where(valid, (np.clip(local, 0, resized - 1) * size) // resized, -1)


def diversity_indices(shape_hw, rng, ratio=1.1):
    """Draw one input-diversity transform for an ``(h, w)`` image.

    The image is resized (nearest neighbour) so its height becomes
    ``r ~ U{h, ..., ceil(ratio * h)}``, zero-padded at a random offset to
    ``ceil(ratio * h)``, then resized back to ``h``. Returns the row and
    column source maps (``-1`` marks padding) and ``r``.
    """
    h, w = shape_hw
    th, tw = math.ceil(ratio * h), math.ceil(ratio * w)
    r = int(rng.integers(h, th + 1))
    rw = min(max(round(r * w / h), w), tw)
    top = int(rng.integers(0, th - r + 1))
    left = int(rng.integers(0, tw - rw + 1))
    return _axis_map(h, r, top, th), _axis_map(w, rw, left, tw), r


def _gather(x, rows, cols):
    out = x[:, np.clip(rows, 0, None)][:, :, np.clip(cols, 0, None)]
    mask = (rows >= 0)[None, :, None, None] & (cols >= 0)[None, None, :, None]
    return np.where(mask, out, 0).astype(x.dtype)


def _scatter(g, rows, cols, shape):
    g = np.where(((rows >= 0)[None, :, None, None] & (cols >= 0)[None, None, :, None]), g, 0).astype(g.dtype)
    tmp = np.zeros((shape[0], g.shape[1], shape[2], shape[3]), dtype=g.dtype)
    np.add.at(tmp, (slice(None), slice(None), np.clip(cols, 0, None)), g)
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, (slice(None), np.clip(rows, 0, None)), tmp)
    return out


class _GradientOracle:
    """Produces the variant-specific gradient for one crafting job."""

    def __init__(self, models, labels, cfg, rng):
        self.models = models
        self.labels = labels
        self.cfg = cfg
        self.rng = rng

    def plain(self, x):
        return ensemble_gradient(self.models, x, self.labels)

    def __call__(self, x):
        cfg = self.cfg
        v = cfg.variant
        if v == "DIM":
            if self.rng.random() < cfg.diversity_prob:
                rows, cols, _ = diversity_indices(x.shape[1:3], self.rng, cfg.resize_ratio)
                g = self.plain(_gather(x, rows, cols))
                return _scatter(g, rows, cols, x.shape)
            return self.plain(x)
        if v == "TIM":
            return smooth_gradient(self.plain(x), cfg.kernel_size)
        if v == "SIM":
            total = self.plain(x)
            for i in range(1, cfg.n_copies):
                scale = np.float32(0.5**i)
                total = total + scale * self.plain(x * scale)
            return total / np.float32(cfg.n_copies)
        if v == "PGN":
            return self._pgn(x)
        return self.plain(x)

    def _pgn(self, x):
        cfg = self.cfg
        bound = cfg.neighborhood * cfg.epsilon
        delta = np.float32(cfg.balance)
        total = None
        for _ in range(cfg.n_samples):
            near = x
            if bound > 0:
                near = x + self.rng.uniform(-bound, bound, x.shape).astype(x.dtype)
            g1 = self.plain(near)
            if cfg.balance > 0:
                ahead = near - np.float32(cfg.alpha) * _l1_normalize(g1)
                g = (1 - delta) * g1 + delta * self.plain(ahead)
            else:
                g = g1
            total = g if total is None else total + g
        return total / np.float32(cfg.n_samples)


def _step(x, g, x_clean, alpha, eps):
    x = x + np.float32(alpha) * np.sign(g)
    x = np.clip(x, x_clean - np.float32(eps), x_clean + np.float32(eps))
    return np.clip(x, 0, 1).astype(x_clean.dtype)


def _momentum_loop(oracle, x_clean, g, iters, alpha, cfg, phase):
    mu = np.float32(cfg.effective_momentum)
    x = x_clean.copy()
    for t in range(iters):
        try:
            ghat = oracle(x)
        except NumericError as exc:
            raise NumericError(f"{exc} at {phase} iteration {t}") from exc
        if not np.all(np.isfinite(ghat)):
            raise NumericError(f"non-finite gradient at {phase} iteration {t}")
        g = mu * g + _l1_normalize(ghat)
        x = _step(x, g, x_clean, alpha, cfg.epsilon)
    return x, g


def initial_momentum(oracle, x_clean, cfg):
    """GI-FGSM pre-convergence: momentum after ``pre_iters`` large steps."""
    g = np.zeros_like(x_clean)
    if cfg.variant != "GIFGSM" or cfg.pre_iters == 0:
        return g
    _, g = _momentum_loop(oracle, x_clean, g, cfg.pre_iters, cfg.global_factor * cfg.alpha, cfg, "pre-convergence")
    return g


def craft(models, x_clean, labels, cfg, job_id=0):
    """Craft non-targeted adversarial examples.

    Parameters
    ----------
    models : ModelGraph, CNNClassifier, or a list of them (ensemble)
    x_clean : ndarray (b, h, w, c) in [0, 1]
    labels : ndarray (b,)
    cfg : AttackConfig
    job_id : int
        Mixed with ``cfg.seed`` to derive this job's random stream.

    Returns
    -------
    ndarray of the same shape and dtype as ``x_clean``.
    """
    members = [as_graph(m) for m in (models if isinstance(models, (list, tuple)) else [models])]
    x_clean = check_unit_range(check_images(x_clean, members[0].input_spec), "x_clean")
    labels = check_labels(labels, members[0].num_classes, len(x_clean))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, job_id]))
    oracle = _GradientOracle(members, labels, cfg, rng)
    if cfg.variant == "GIFGSM":
        g0 = initial_momentum(_GradientOracle(members, labels, cfg.replace(variant="MIFGSM"), rng), x_clean, cfg)
    else:
        g0 = np.zeros_like(x_clean)
    x_adv, _ = _momentum_loop(oracle, x_clean, g0, cfg.iters, cfg.alpha, cfg, "attack")
    return x_adv


class TransferAttack(TransformerMixin, BaseEstimator):
    """Transformer that maps clean images to adversarial examples.

    ``source`` is the white-box model (or list of models for an ensemble).
    Labels are required, so use ``transform(X, y)`` or ``fit_transform(X, y)``.
    """

    def __init__(
        self,
        source=None,
        variant="MIFGSM",
        epsilon=16 / 255,
        iters=10,
        step_size=None,
        momentum=1.0,
        diversity_prob=0.5,
        kernel_size=7,
        n_copies=5,
        n_samples=20,
        balance=0.5,
        neighborhood=3.0,
        pre_iters=5,
        global_factor=10.0,
        random_state=0,
    ):
        self.source = source
        self.variant = variant
        self.epsilon = epsilon
        self.iters = iters
        self.step_size = step_size
        self.momentum = momentum
        self.diversity_prob = diversity_prob
        self.kernel_size = kernel_size
        self.n_copies = n_copies
        self.n_samples = n_samples
        self.balance = balance
        self.neighborhood = neighborhood
        self.pre_iters = pre_iters
        self.global_factor = global_factor
        self.random_state = random_state

    def _config(self):
        params = self.get_params(deep=False)
        params.pop("source")
        params["seed"] = params.pop("random_state")
        return AttackConfig(**params)

    def fit(self, X=None, y=None):
        if self.source is None:
            raise ValueError("TransferAttack needs a source model")
        self.config_ = self._config()
        return self

    def transform(self, X, y=None):
        if y is None:
            raise ValueError("TransferAttack.transform needs the true labels y")
        cfg = getattr(self, "config_", None) or self._config()
        return craft(self.source, X, y, cfg)

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X, y)
