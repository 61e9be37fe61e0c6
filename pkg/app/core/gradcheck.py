"""
Gradient Check - Central finite differences against the analytic backward pass
"""
import logging
from typing import Callable, Dict, Optional

import numpy as np

from app.core.tensor import Tensor

logger = logging.getLogger(__name__)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numerical_gradient(loss_fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` with respect to every entry of ``tensor``."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = loss_fn().item()
        flat[i] = original - h
        minus = loss_fn().item()
        flat[i] = original
        out[i] = (plus - minus) / (2 * h)
    return grad


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> Dict[str, float]:
    """
    Compare analytic and numeric gradients for every named parameter.

    ``loss_fn`` must rebuild the graph on each call and be deterministic.
    Returns the maximum relative error per parameter.
    """
    for tensor in params.values():
        tensor.zero_grad()
    loss_fn().backward()
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)).astype(np.float64).copy() for name, t in params.items()}

    errors: Dict[str, float] = {}
    for name, tensor in params.items():
        numeric = numerical_gradient(loss_fn, tensor, h)
        errors[name] = float(relative_error(analytic[name], numeric, floor).max(initial=0.0))
        logger.debug(f"gradcheck {name}: max relative error {errors[name]:.2e}")
    return errors


def max_error(errors: Dict[str, float]) -> Optional[float]:
    return max(errors.values()) if errors else None
