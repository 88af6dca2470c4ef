"""Versioned JSON model files.

Python's float repr is the shortest string that round-trips, so writing
floats through ``json`` keeps every real bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

from .kernel import KernelSpec
from .solver import FitConfig, FittedModel

SCHEMA = "sparsevc.model"
VERSION = 1


class ModelFormatError(ValueError):
    pass


def model_to_dict(model: FittedModel, time_divisor: float = 1.0) -> dict:
    return {
        "schema": SCHEMA,
        "version": VERSION,
        "kernel": model.kernel.to_dict(),
        "covariate_names": list(model.covariate_names),
        "time_divisor": float(time_divisor),
        "b": float(model.b),
        "theta": [float(v) for v in model.theta],
        "selected": [model.covariate_names[j] for j in model.selected],
        "tau0": float(model.tau0),
        "tau1": float(model.tau1),
        "M": float(model.M),
        "knot_times": [float(v) for v in model.knot_times],
        "knot_x": [[float(v) for v in row] for row in model.knot_x],
        "u": [float(v) for v in model.u],
        "config": model.config.to_dict(),
    }


def model_from_dict(d: dict) -> tuple[FittedModel, float]:
    if d.get("schema") != SCHEMA:
        raise ModelFormatError("not a sparsevc model file")
    if d.get("version") != VERSION:
        raise ModelFormatError(f"unsupported model file version {d.get('version')!r}")
    try:
        names = tuple(d["covariate_names"])
        model = FittedModel(
            b=float(d["b"]),
            theta=np.array(d["theta"], dtype=float),
            u=np.array(d["u"], dtype=float),
            knot_times=np.array(d["knot_times"], dtype=float),
            knot_x=np.array(d["knot_x"], dtype=float).reshape(len(names), -1),
            kernel=KernelSpec.from_dict(d["kernel"]),
            covariate_names=names,
            config=FitConfig.from_dict(d["config"]),
            tau0=float(d["tau0"]),
            M=float(d["M"]),
            tau1=float(d["tau1"]),
        )
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from None
    if [names[j] for j in model.selected] != list(d["selected"]):
        raise ModelFormatError("selected set does not match the stored weights")
    return model, float(d.get("time_divisor", 1.0))


def save_model(model: FittedModel, path, time_divisor: float = 1.0) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, time_divisor), fh, indent=1)
        fh.write("\n")


def load_model(path) -> tuple[FittedModel, float]:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: {exc}") from None
    return model_from_dict(d)
