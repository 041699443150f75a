import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


def finite_difference_gradient(fn, x: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Central-difference gradient of a scalar function, independent of autograd."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            f_plus = float(fn(x))
            flat[i] = orig - eps
            f_minus = float(fn(x))
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def autograd_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().double().requires_grad_(True)
    out = fn(x)
    (grad,) = torch.autograd.grad(out, x)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def check_gradient(fn, x: torch.Tensor, tol: float = 1e-4, eps: float = 1e-3) -> float:
    err = relative_error(autograd_gradient(fn, x), finite_difference_gradient(fn, x, eps))
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err


def unit_rows_np(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)
