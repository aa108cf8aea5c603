"""Deterministic and probabilistic forecast scoring.

Implements mean squared error, the closed-form Gaussian continuous ranked
probability score, pinball (quantile) loss, and the Winkler interval
score, plus an evaluation driver that scores a model over a windowed
dataset and assembles report tables.

Quantile and interval forecasts are analytic transforms of the Gaussian
output heads: the q-quantile is ``mu + sigma * PhiInv(q)`` and the central
(1 - alpha) interval uses the alpha/2 and 1 - alpha/2 quantiles.
"""

import csv
import io
import json
import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .errors import ContractError, InputError

DEFAULT_QUANTILES = tuple(round(0.1 * k, 1) for k in range(1, 10))
DEFAULT_INTERVAL_ALPHA = 0.1

_STD_NORMAL = NormalDist()
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

REPORT_COLUMNS = ("model", "variant", "mse", "crps", "quantile_loss", "winkler")


def mse(y, mu) -> float:
    """Mean squared error between aligned series."""
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if y.shape != mu.shape:
        raise ContractError(f"series lengths differ: {y.shape} vs {mu.shape}")
    if y.size == 0:
        raise ContractError("mse requires at least one observation")
    return float(np.mean((y - mu) ** 2))


def crps_gaussian(y: float, mu: float, sigma: float) -> float:
    """Closed-form CRPS of a Gaussian forecast N(mu, sigma^2) against y.

    CRPS = sigma * [ z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi) ],
    with z = (y - mu) / sigma.
    """
    if sigma <= 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    z = (y - mu) / sigma
    cdf = 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
    pdf = _INV_SQRT_2PI * math.exp(-0.5 * z * z)
    return sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - _INV_SQRT_PI)


def _crps_gaussian_vec(y: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    z = (y - mu) / sigma
    cdf = 0.5 * (1.0 + np.vectorize(math.erf)(z / math.sqrt(2.0)))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - _INV_SQRT_PI)


def pinball(y, quantile_forecasts, quantiles=DEFAULT_QUANTILES) -> float:
    """Mean pinball loss over steps and quantile levels.

    ``quantile_forecasts`` has one row per quantile level, aligned with
    ``quantiles``; each row is a forecast series aligned with ``y``.
    """
    y = np.asarray(y, dtype=np.float64)
    q_hat = np.asarray(quantile_forecasts, dtype=np.float64)
    quantiles = np.asarray(quantiles, dtype=np.float64)
    if np.any(quantiles <= 0.0) or np.any(quantiles >= 1.0):
        raise ContractError(f"quantiles must lie strictly inside (0, 1): {quantiles}")
    if q_hat.ndim == 1:
        q_hat = q_hat[None, :]
    if q_hat.shape != (quantiles.size, y.size):
        raise ContractError(
            f"quantile forecasts must have shape ({quantiles.size}, {y.size}), "
            f"got {q_hat.shape}"
        )
    diff = y[None, :] - q_hat
    q = quantiles[:, None]
    loss = np.maximum(q * diff, (q - 1.0) * diff)
    return float(loss.mean())


def winkler(y: float, lower: float, upper: float,
            alpha_w: float = DEFAULT_INTERVAL_ALPHA) -> float:
    """Interval score at central level 1 - alpha_w: width plus miss penalties."""
    if not 0.0 < alpha_w < 1.0:
        raise ContractError(f"alpha_w must lie in (0, 1), got {alpha_w}")
    if lower > upper:
        raise ContractError(f"inverted interval: [{lower}, {upper}]")
    score = upper - lower
    if y < lower:
        score += (2.0 / alpha_w) * (lower - y)
    elif y > upper:
        score += (2.0 / alpha_w) * (y - upper)
    return float(score)


def gaussian_quantiles(mu: np.ndarray, sigma: np.ndarray,
                       quantiles=DEFAULT_QUANTILES) -> np.ndarray:
    """Per-quantile forecast rows derived from Gaussian parameters."""
    z = np.array([_STD_NORMAL.inv_cdf(q) for q in quantiles])
    return mu[None, :] + z[:, None] * sigma[None, :]


@dataclass
class ScoreRow:
    """All four metrics for one model variant."""

    model: str
    variant: str
    mse: float
    crps: float
    quantile_loss: float
    winkler: float

    def as_list(self, scale: float = 1.0):
        return [self.model, self.variant, self.mse / scale, self.crps / scale,
                self.quantile_loss / scale, self.winkler / scale]


@dataclass
class ScoreReport:
    """Rows of metric means plus the evaluation count and report scale."""

    rows: list = field(default_factory=list)
    count: int = 0
    scale: float = 1.0  # presentation divisor, e.g. 1e-2 for x10^-2 tables

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(REPORT_COLUMNS)
        for row in self.rows:
            writer.writerow(row.as_list(self.scale))
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "count": self.count,
            "scale": self.scale,
            "rows": [dict(zip(REPORT_COLUMNS, row.as_list(self.scale)))
                     for row in self.rows],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def row(self, variant: str) -> ScoreRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise ContractError(f"report has no variant {variant!r}")


def score_forecasts(y: np.ndarray, mu: np.ndarray, sigma: np.ndarray,
                    quantiles=DEFAULT_QUANTILES,
                    alpha_w: float = DEFAULT_INTERVAL_ALPHA) -> dict:
    """All four metric means for aligned truth/mean/std arrays."""
    y = np.asarray(y, dtype=np.float64).ravel()
    mu = np.asarray(mu, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    if not (y.shape == mu.shape == sigma.shape):
        raise ContractError("y, mu, sigma must be aligned")
    if np.any(sigma <= 0):
        raise ContractError("sigma values must be positive")
    q_rows = gaussian_quantiles(mu, sigma, quantiles)
    z_hi = _STD_NORMAL.inv_cdf(1.0 - alpha_w / 2.0)
    lower, upper = mu - z_hi * sigma, mu + z_hi * sigma
    wink = np.mean([winkler(float(yv), float(lo), float(hi), alpha_w)
                    for yv, lo, hi in zip(y, lower, upper)])
    return {
        "mse": mse(y, mu),
        "crps": float(_crps_gaussian_vec(y, mu, sigma).mean()),
        "quantile_loss": pinball(y, q_rows, quantiles),
        "winkler": float(wink),
    }


def evaluate_model(predict_fn, dataset, variant: str, model: str = "forecaster",
                   quantiles=DEFAULT_QUANTILES,
                   alpha_w: float = DEFAULT_INTERVAL_ALPHA) -> ScoreRow:
    """Score ``predict_fn(window) -> (mu, sigma2)`` over a windowed dataset.

    Forecast parameters and targets are compared in physical units; the
    caller's ``predict_fn`` is responsible for denormalization.
    """
    windows = list(dataset)
    if not windows:
        raise InputError(f"dataset for group {dataset.group_id!r} is empty")
    truths, means, stds = [], [], []
    for window in windows:
        mu, sigma2 = predict_fn(window)
        truths.append(np.asarray(window.target_loads, dtype=np.float64))
        means.append(np.asarray(mu, dtype=np.float64))
        stds.append(np.sqrt(np.asarray(sigma2, dtype=np.float64)))
    y = np.concatenate(truths)
    mu = np.concatenate(means)
    sigma = np.concatenate(stds)
    scores = score_forecasts(y, mu, sigma, quantiles, alpha_w)
    return ScoreRow(model=model, variant=variant, **scores)
