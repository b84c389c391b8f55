"""Probabilistic-forecast evaluation: quantile score, coverage, width.

All three metrics operate on de-normalized values so reports are in the
original demand units.  The headline numbers are macro averages, i.e.
unweighted means over clients; sample-weighted variants are included in
every report for completeness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError, UsageError
from .forecaster import ForecasterModel, forward_batch


@dataclass(frozen=True)
class ClientScore:
    """Evaluation of one client on its own test windows."""

    client_id: str
    qs: float
    mil: float
    icp: float
    n: int
    qs_per_quantile: tuple[float, ...]


@dataclass(frozen=True)
class EvalReport:
    """Per-client scores plus macro and sample-weighted averages."""

    quantiles: tuple[float, ...]
    clients: tuple[ClientScore, ...]
    excluded: tuple[str, ...]
    macro_qs: float
    macro_mil: float
    macro_icp: float
    weighted_qs: float
    weighted_mil: float
    weighted_icp: float

    def to_dict(self) -> dict:
        return {
            "quantiles": list(self.quantiles),
            "clients": [
                {
                    "client_id": c.client_id,
                    "qs": c.qs,
                    "mil": c.mil,
                    "icp": c.icp,
                    "n": c.n,
                    "qs_per_quantile": dict(zip(map(str, self.quantiles), c.qs_per_quantile)),
                }
                for c in self.clients
            ],
            "excluded": list(self.excluded),
            "macro": {"qs": self.macro_qs, "mil": self.macro_mil, "icp": self.macro_icp},
            "weighted": {
                "qs": self.weighted_qs,
                "mil": self.weighted_mil,
                "icp": self.weighted_icp,
            },
        }

    def csv_rows(self) -> list[dict]:
        """Rows for the fixed-schema CSV: client_id, qs, mil, icp, n."""
        rows = [
            {"client_id": c.client_id, "qs": c.qs, "mil": c.mil, "icp": c.icp, "n": c.n}
            for c in self.clients
        ]
        rows.append(
            {
                "client_id": "macro",
                "qs": self.macro_qs,
                "mil": self.macro_mil,
                "icp": self.macro_icp,
                "n": int(sum(c.n for c in self.clients)),
            }
        )
        return rows


def _paired(y, other, name: str) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    other = np.asarray(other, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise UsageError(f"{name} needs at least one sample")
    if y.shape != other.shape:
        raise StructuralError(f"{name} inputs have different lengths")
    return y, other


def quantile_score(y: np.ndarray, yhat: np.ndarray, q: float) -> float:
    """Mean pinball deviation at one quantile level.

    Over-prediction (y < yhat) costs (1-q)|y - yhat|, under- or exact
    prediction costs q|y - yhat|.
    """
    y, yhat = _paired(y, yhat, "quantile_score")
    if not 0.0 < q < 1.0:
        raise UsageError(f"quantile level must lie in (0, 1), got {q}")
    diff = yhat - y
    return float(np.mean(np.where(diff > 0, 1.0 - q, -q) * diff))


def icp(y: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> float:
    """Fraction of observations inside [lower, upper], inclusive.

    Crossed intervals (lower > upper) are kept as-is and simply fail to
    cover, so calibration problems stay visible.
    """
    y, lower = _paired(y, lower, "icp")
    _, upper = _paired(y, upper, "icp")
    return float(np.mean((lower <= y) & (y <= upper)))


def mil(lower: np.ndarray, upper: np.ndarray) -> float:
    """Mean absolute interval width."""
    lower, upper = _paired(lower, upper, "mil")
    return float(np.mean(np.abs(upper - lower)))


def _denormalize(values: np.ndarray, data) -> np.ndarray:
    mean = float(getattr(data, "mean", 0.0))
    std = float(getattr(data, "std", 1.0))
    return values * std + mean


def _client_score(
    client_id: str, model: ForecasterModel, data, quantiles: tuple[float, ...]
) -> ClientScore:
    q = np.asarray(quantiles, dtype=np.float64)
    preds = _denormalize(forward_batch(model, data.inputs), data)
    targets = _denormalize(np.asarray(data.targets, dtype=np.float64), data)
    diff = preds - targets[:, :, np.newaxis]
    weights = np.where(diff > 0, 1.0 - q, -q)
    qs = float(np.mean(weights * diff))
    per_q = tuple(float(np.mean(weights[:, :, k] * diff[:, :, k])) for k in range(q.size))
    lo = preds[:, :, int(np.argmin(q))].reshape(-1)
    hi = preds[:, :, int(np.argmax(q))].reshape(-1)
    flat_y = targets.reshape(-1)
    return ClientScore(
        client_id=client_id,
        qs=qs,
        mil=mil(lo, hi),
        icp=icp(flat_y, lo, hi),
        n=int(preds.shape[0]),
        qs_per_quantile=per_q,
    )


def evaluate(
    models: dict[str, ForecasterModel],
    test_data: dict[str, object],
    quantiles: tuple[float, ...] | None = None,
) -> EvalReport:
    """Score every client on its own test windows.

    Clients with no test windows are excluded from all averages and
    listed in the report.  Predictions and targets are converted back
    to original units with each dataset's normalization stats.
    """
    if not models:
        raise UsageError("evaluate needs at least one client model")
    if quantiles is None:
        quantiles = next(iter(models.values())).config.quantiles
    quantiles = tuple(float(v) for v in quantiles)

    scores = []
    excluded = []
    for client_id in sorted(models):
        data = test_data.get(client_id)
        if data is None or len(np.asarray(data.inputs)) == 0:
            excluded.append(client_id)
            continue
        scores.append(_client_score(client_id, models[client_id], data, quantiles))
    if not scores:
        raise UsageError("every client was excluded: no test windows at all")

    ns = np.array([c.n for c in scores], dtype=np.float64)

    def macro(attr):
        return float(np.mean([getattr(c, attr) for c in scores]))

    def weighted(attr):
        vals = np.array([getattr(c, attr) for c in scores])
        return float(np.sum(vals * ns) / np.sum(ns))

    return EvalReport(
        quantiles=quantiles,
        clients=tuple(scores),
        excluded=tuple(excluded),
        macro_qs=macro("qs"),
        macro_mil=macro("mil"),
        macro_icp=macro("icp"),
        weighted_qs=weighted("qs"),
        weighted_mil=weighted("mil"),
        weighted_icp=weighted("icp"),
    )
