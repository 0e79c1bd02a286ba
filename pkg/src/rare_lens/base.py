"""Estimator plumbing: get_params/set_params and input validation helpers.

The learnable components follow the familiar fit/transform/predict shape so
they can sit inside ordinary model-selection tooling: constructor arguments
are hyperparameters, fitted state lands in trailing-underscore attributes.
"""

from __future__ import annotations

import inspect

import numpy as np

from .errors import NotFittedError, ShapeError


class ParamMixin:
    """sklearn-compatible get_params/set_params from the __init__ signature."""

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [n for n in sig.parameters if n != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {n: getattr(self, n) for n in self._param_names()}

    def set_params(self, **params) -> "ParamMixin":
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(f"unknown parameter {name!r} for {type(self).__name__}")
            setattr(self, name, value)
        return self

    def __repr__(self) -> str:
        args = ", ".join(f"{n}={getattr(self, n)!r}" for n in self._param_names())
        return f"{type(self).__name__}({args})"


def check_is_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"{type(estimator).__name__} must be fit before this call"
        )


def check_matrix(x, name: str, cols: int | None = None) -> np.ndarray:
    """Coerce to a finite float64 2-d array, optionally with fixed width."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise ShapeError(f"{name} must have {cols} columns, got {arr.shape[1]}")
    if not np.isfinite(arr).all():
        raise ShapeError(f"{name} contains non-finite values")
    return arr


def check_vector(x, name: str, size: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if size is not None and arr.shape[0] != size:
        raise ShapeError(f"{name} must have {size} entries, got {arr.shape[0]}")
    if not np.isfinite(arr).all():
        raise ShapeError(f"{name} contains non-finite values")
    return arr


def check_labels(y, name: str, n_classes: int) -> np.ndarray:
    arr = np.asarray(y, dtype=np.intp).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ShapeError(f"{name} labels must lie in [0, {n_classes})")
    return arr
