"""Coefficient curves and predictions from a fitted model."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .datamodel import LongitudinalDataset
from .kernel import kernel_matrix
from .solver import FittedModel


class ExtrapolationWarning(UserWarning):
    pass


def _weights(model: FittedModel) -> np.ndarray:
    # p x N representer weights theta_j u_a x_aj, zero for unselected j
    return model.beta_coeffs * model.knot_x


def coefficient_curves(model: FittedModel, times) -> np.ndarray:
    """``p x T`` array of every coefficient curve at ``times``."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    K = kernel_matrix(model.kernel, model.knot_times, times)
    return _weights(model) @ K


def coefficient_curve(model: FittedModel, j: int, times) -> np.ndarray:
    if not 0 <= j < model.p:
        raise IndexError(f"covariate index {j} out of range for p={model.p}")
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if j not in model.selected:
        if np.any((times < 0) | (times > 1)):
            raise ValueError("times must lie in [0, 1]")
        return np.zeros(times.shape)
    K = kernel_matrix(model.kernel, model.knot_times, times)
    return _weights(model)[j] @ K


def _check_extrapolation(model, times, warn):
    if warn and np.max(times, initial=0.0) > np.max(model.knot_times):
        warnings.warn(
            f"predicting at t={np.max(times):.4g}, beyond the last training time "
            f"{np.max(model.knot_times):.4g}",
            ExtrapolationWarning,
            stacklevel=3,
        )


def predict_subject(model: FittedModel, new_x: Mapping, t: float, warn_extrapolation: bool = False) -> float:
    """``b + sum_{j selected} beta_j(t) x*_j(t)``.

    ``new_x`` maps covariate names (or integer indices) to values at ``t``;
    only selected covariates are needed.
    """
    _check_extrapolation(model, [t], warn_extrapolation)
    sel = model.selected
    if not sel:
        if not 0.0 <= t <= 1.0:
            raise ValueError("time must lie in [0, 1]")
        return float(model.b)
    xs = []
    for j in sel:
        name = model.covariate_names[j]
        if name in new_x:
            xs.append(float(new_x[name]))
        elif j in new_x:
            xs.append(float(new_x[j]))
        else:
            raise KeyError(f"missing value for selected covariate {name!r}")
    beta = coefficient_curves(model, [t])[sel, 0]
    return float(model.b + beta @ np.array(xs))


def predict_dataset(model: FittedModel, ds: LongitudinalDataset, warn_extrapolation: bool = False) -> np.ndarray:
    """Predictions for every visit of ``ds`` (matched to the model by covariate name)."""
    sel = model.selected
    _check_extrapolation(model, ds.times, warn_extrapolation)
    if not sel:
        return np.full(ds.N, float(model.b))
    names = [model.covariate_names[j] for j in sel]
    missing = [nm for nm in names if nm not in ds.covariate_names]
    if missing:
        raise KeyError(f"dataset lacks selected covariates: {missing}")
    cols = [ds.covariate_names.index(nm) for nm in names]
    X = ds.X[:, cols]
    if np.isnan(X).any():
        raise ValueError("selected covariates have missing values")
    K = kernel_matrix(model.kernel, model.knot_times, ds.times)
    beta = _weights(model)[sel] @ K  # s x N
    return model.b + np.einsum("sn,ns->n", beta, X)


@dataclass
class PredictionMetrics:
    squared_errors: np.ndarray
    rmse: float
    mae: float
    per_subject_rmse: dict


def evaluate_predictions(model: FittedModel, holdout: LongitudinalDataset) -> PredictionMetrics:
    if holdout.N == 0:
        raise ValueError("empty holdout")
    err = holdout.y - predict_dataset(model, holdout)
    sq = err**2
    per = {
        sid: float(np.sqrt(np.mean(sq[holdout.subject_index == i])))
        for i, sid in enumerate(holdout.subject_ids)
    }
    return PredictionMetrics(sq, float(np.sqrt(sq.mean())), float(np.abs(err).mean()), per)


def write_predictions_csv(path, subject_ids, times, y_pred, y_true=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "time", "y_true", "y_pred"])
        for k, (sid, t, yp) in enumerate(zip(subject_ids, times, y_pred)):
            yt = "" if y_true is None or y_true[k] is None else repr(float(y_true[k]))
            w.writerow([sid, repr(float(t)), yt, repr(float(yp))])


def write_curves_csv(path, model: FittedModel, times, only_selected: bool = True) -> None:
    times = np.asarray(times, dtype=float)
    curves = coefficient_curves(model, times)
    idx = model.selected if only_selected else range(model.p)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["covariate", "t", "beta"])
        for j in idx:
            for t, v in zip(times, curves[j]):
                w.writerow([model.covariate_names[j], repr(float(t)), repr(float(v))])
