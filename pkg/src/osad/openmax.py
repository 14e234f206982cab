"""OpenMax recalibration with per-class Weibull tail models.

The belief in class ``i`` scales that class's logit; the mass removed from
the calibrated logits is pooled into an extra open-set logit, and a softmax
over the ``C+1`` entries gives the final scores.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .errors import CalibrationError, ShapeError

logger = logging.getLogger(__name__)

SHAPE_FLOOR = 0.05
SCALE_FLOOR = 1e-6
BELIEFS = ("cdf", "literal")


def _shape_equation(k: float, logx: np.ndarray) -> float:
    # profile-likelihood score for the shape; data pre-scaled so max(x) == 1
    xk = np.exp(k * logx)
    return float(np.sum(xk * logx) / np.sum(xk) - 1.0 / k - logx.mean())


def fit_weibull(samples, tol: float = 1e-9, maxiter: int = 200) -> tuple[float, float]:
    """Maximum-likelihood ``(shape, scale)`` of a two-parameter Weibull."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise CalibrationError("need at least two samples for a Weibull fit")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise CalibrationError("Weibull samples must be finite and nonnegative")
    top = x.max()
    if top <= 0 or np.all(x == x[0]) or np.any(x == 0):
        warnings.warn("degenerate Weibull tail; flooring shape and scale", RuntimeWarning, stacklevel=2)
        return SHAPE_FLOOR, max(float(top), SCALE_FLOOR)
    logx = np.log(x / top)
    lo, hi = 1e-3, 1.0
    while _shape_equation(hi, logx) < 0:
        hi *= 2.0
        if hi > 1e6:
            raise CalibrationError("Weibull shape root not bracketed")
    while _shape_equation(lo, logx) > 0:
        lo /= 2.0
    k = brentq(_shape_equation, lo, hi, args=(logx,), xtol=tol, maxiter=maxiter)
    scale = top * np.mean(np.exp(k * logx)) ** (1.0 / k)
    if k < SHAPE_FLOOR or scale < SCALE_FLOOR:
        warnings.warn("Weibull fit below floor; clamping", RuntimeWarning, stacklevel=2)
    return max(float(k), SHAPE_FLOOR), max(float(scale), SCALE_FLOOR)


def weibull_cdf(d, shape, scale):
    return 1.0 - np.exp(-np.power(np.asarray(d) / scale, shape))


@dataclass
class OpenMaxModel:
    class_means: np.ndarray  # (C, d)
    shapes: np.ndarray  # (C,)
    scales: np.ndarray  # (C,)
    sigma: int = 3
    tail_size: int = 20
    threshold: float = 0.95
    feature_space: str = "latent"
    belief: str = "cdf"

    def __post_init__(self):
        self.class_means = np.asarray(self.class_means, dtype=np.float64)
        self.shapes = np.asarray(self.shapes, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        c = self.class_means.shape[0]
        if self.shapes.shape != (c,) or self.scales.shape != (c,):
            raise ShapeError("one (mean, shape, scale) triple per known class is required")
        if not (np.all(np.isfinite(self.shapes)) and np.all(self.shapes > 0)
                and np.all(np.isfinite(self.scales)) and np.all(self.scales > 0)):
            raise CalibrationError("Weibull parameters must be finite and positive")
        if self.sigma < 1:
            raise CalibrationError("sigma must be at least 1")
        if not 0 < self.threshold < 1:
            raise CalibrationError("threshold must lie in (0, 1)")
        if self.belief not in BELIEFS:
            raise CalibrationError(f"unknown belief {self.belief!r}; valid options: {', '.join(BELIEFS)}")

    @property
    def num_classes(self) -> int:
        return self.class_means.shape[0]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("class_means", "shapes", "scales"):
            d[k] = np.asarray(d[k]).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OpenMaxModel":
        return cls(**d)

    def save(self, path, extra: dict | None = None):
        payload = {"openmax": self.to_dict(), **(extra or {})}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "OpenMaxModel":
        return cls.from_dict(json.loads(Path(path).read_text())["openmax"])


def fit_evt(features, labels, num_classes: int, tail_size: int = 20, sigma: int = 3,
            predictions=None, threshold: float = 0.95, feature_space: str = "latent",
            belief: str = "cdf") -> OpenMaxModel:
    """Class means and Weibull fits of the largest distances to each mean.

    When ``predictions`` is given only correctly classified samples are used.
    """
    v = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    keep = np.ones(len(y), dtype=bool) if predictions is None else np.asarray(predictions) == y
    means, shapes, scales = [], [], []
    for c in range(num_classes):
        vc = v[keep & (y == c)]
        if len(vc) < max(tail_size, 2):
            raise CalibrationError(
                f"class {c} has {len(vc)} usable samples; at least tail_size={tail_size} needed")
        mu = vc.mean(axis=0)
        dist = np.linalg.norm(vc - mu, axis=1)
        tail = np.sort(dist)[-tail_size:]
        k, lam = fit_weibull(tail)
        means.append(mu)
        shapes.append(k)
        scales.append(lam)
    return OpenMaxModel(np.stack(means), np.array(shapes), np.array(scales), sigma, tail_size,
                        threshold, feature_space, belief)


def ranks(logits) -> np.ndarray:
    """1-based position of each class in the descending sort of its row."""
    l = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    order = np.argsort(-l, axis=1, kind="stable")
    r = np.empty_like(order)
    rows = np.arange(l.shape[0])[:, None]
    r[rows, order] = np.arange(1, l.shape[1] + 1)
    return r


def belief(v, logits, model: OpenMaxModel) -> np.ndarray:
    """Per-class weights in [0, 1]; classes ranked at or below ``sigma`` keep weight 1.

    ``model.belief == "literal"`` evaluates ``1 - a * exp(-(d/scale)^shape)``;
    ``"cdf"`` uses the Weibull CDF in place of the exponential factor, so
    samples far from a class mean lose more of that class's logit.
    """
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    l = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if l.shape[1] != model.num_classes:
        raise ShapeError(f"expected {model.num_classes} logits, got {l.shape[1]}")
    if v.shape[1] != model.class_means.shape[1]:
        raise ShapeError("feature dimension does not match the calibrated means")
    d = np.linalg.norm(v[:, None, :] - model.class_means[None], axis=2)
    alpha = np.maximum(0.0, (model.sigma - ranks(l)) / model.sigma)
    tail = np.exp(-np.power(d / model.scales, model.shapes))
    if model.belief == "cdf":
        tail = 1.0 - tail
    return 1.0 - alpha * tail


def recalibrate(logits, weights) -> np.ndarray:
    l = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if l.shape != w.shape:
        raise ShapeError("logits and weights must have the same shape")
    return np.concatenate([l * w, (l * (1.0 - w)).sum(axis=1, keepdims=True)], axis=1)


def softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class OpenMaxScores:
    probs: np.ndarray  # (n, C+1); last column is the open-set probability
    recalibrated_logits: np.ndarray

    @property
    def open_score(self) -> np.ndarray:
        return self.probs[:, -1]


def openmax_probs(logits, v, model: OpenMaxModel, weights=None) -> OpenMaxScores:
    w = belief(v, logits, model) if weights is None else weights
    lhat = recalibrate(logits, w)
    return OpenMaxScores(softmax(lhat, axis=1), lhat)


def predict(probs, threshold: float = 0.95) -> np.ndarray:
    """Known-class argmax, or ``C`` (open) when the open slot wins or confidence is low.

    Ties between the open slot and the best known class resolve to open.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    c = p.shape[1] - 1
    known = p[:, :c]
    best = known.argmax(axis=1)
    top = known.max(axis=1)
    is_open = (p[:, c] >= top) | (top < threshold)
    return np.where(is_open, c, best)
