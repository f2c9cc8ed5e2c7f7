"""Shared test helpers."""

from typing import Callable, Dict

import numpy as np
import pytest

from trailersmith.genres import GenreSet
from trailersmith.records import TrailerRecord


def numeric_gradient(loss: Callable[[], float], array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of `loss()` with respect to `array`, perturbed in place."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = loss()
        flat[i] = original - step
        lower = loss()
        flat[i] = original
        grad_flat[i] = (upper - lower) / (2 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||analytic - numeric|| / (||analytic|| + ||numeric||)."""
    scale = max(float(np.linalg.norm(analytic) + np.linalg.norm(numeric)), floor)
    return float(np.linalg.norm(analytic - numeric)) / scale


@pytest.fixture
def gradcheck() -> Callable[..., Dict[str, float]]:
    """Compare analytic gradients of a scalar Tensor-valued function with finite differences."""
    def check(build_loss, params: Dict[str, np.ndarray], step: float = 1e-5) -> Dict[str, float]:
        from trailersmith.tensor import Tensor

        tensors = {name: Tensor(value, requires_grad=True, name=name) for name, value in params.items()}
        loss = build_loss(tensors)
        loss.backward()
        errors = {}
        for name, tensor in tensors.items():
            def evaluate() -> float:
                return build_loss(tensors).item()
            numeric = numeric_gradient(evaluate, tensor.data, step)
            errors[name] = max_relative_error(tensor.grad, numeric)
        return errors
    return check


@pytest.fixture
def model_gradcheck() -> Callable[..., Dict[str, float]]:
    """Like `gradcheck`, but over every parameter of an aggregation model."""
    def check(model, build_loss, step: float = 1e-5) -> Dict[str, float]:
        model.params.zero_grad()
        build_loss().backward()
        analytic = model.params.grads()
        errors = {}
        for name, tensor in model.params.items():
            numeric = numeric_gradient(lambda: build_loss().item(), tensor.data, step)
            errors[name] = max_relative_error(analytic[name], numeric)
        return errors
    return check


@pytest.fixture
def make_record() -> Callable[..., TrailerRecord]:
    def build(trailer_id: str, genres, feature_path: str = None, fps: float = 24,
              duration_frames: int = 240) -> TrailerRecord:
        return TrailerRecord(id=trailer_id, feature_path=feature_path or f"features/{trailer_id}.dvtf",
                             genres=GenreSet.from_names(genres), fps=fps, duration_frames=duration_frames)
    return build
