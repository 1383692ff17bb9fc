"""
Sparse activations and small differentiable building blocks.

entmax15 (alpha = 1.5 entmax) is solved exactly by sorting and thresholding;
entmoid15 is its two-class reduction. Both are torch autograd Functions with
hand-derived backward passes so gradients stay exact at sparse points.
"""
from typing import Optional

import torch
from torch import nn
from torch.autograd import Function

from exceptions import InvalidArgumentError

# Stand-in for -inf inside the threshold computation.
_NEG_SENTINEL = -1e30


def _check_finite(z: torch.Tensor, name: str) -> None:
    if torch.isnan(z).any() or torch.isposinf(z).any():
        raise InvalidArgumentError(f"{name} must be finite", {"op": name})


def _entmax15_threshold(z: torch.Tensor) -> torch.Tensor:
    """Exact 1.5-entmax along the last dimension of half-scaled, max-shifted logits."""
    z_srt, _ = torch.sort(z, dim=-1, descending=True)
    d = z.shape[-1]
    rho = torch.arange(1, d + 1, dtype=z.dtype, device=z.device)

    mean = z_srt.cumsum(-1) / rho
    mean_sq = (z_srt ** 2).cumsum(-1) / rho
    ss = rho * (mean_sq - mean ** 2)
    delta = (1 - ss) / rho
    tau = mean - torch.sqrt(torch.clamp(delta, min=0))

    support_size = (tau <= z_srt).sum(dim=-1, keepdim=True)
    tau_star = tau.gather(-1, support_size - 1)
    return torch.clamp(z - tau_star, min=0) ** 2


def entmax15_vjp(probs: torch.Tensor, upstream: torch.Tensor) -> torch.Tensor:
    """
    Vector-Jacobian product of entmax15 along the last dimension.

    The Jacobian on the support is diag(s) - s s^T / sum(s) with s = sqrt(p);
    it is zero off the support.

    Args:
        probs: Output of entmax15
        upstream: Gradient with respect to that output

    Returns:
        Gradient with respect to the logits
    """
    if probs.shape != upstream.shape:
        raise InvalidArgumentError(
            "probs and upstream must have the same shape",
            {"probs": tuple(probs.shape), "upstream": tuple(upstream.shape)}
        )
    s = probs.sqrt()
    grad = upstream * s
    q = grad.sum(dim=-1, keepdim=True) / s.sum(dim=-1, keepdim=True)
    return grad - q * s


class Entmax15Function(Function):

    @staticmethod
    def forward(ctx, z):
        z = torch.where(torch.isneginf(z), torch.full_like(z, _NEG_SENTINEL), z)
        z = z / 2
        z = z - z.max(dim=-1, keepdim=True).values
        probs = _entmax15_threshold(z)
        probs = probs / probs.sum(dim=-1, keepdim=True)
        ctx.save_for_backward(probs)
        return probs

    @staticmethod
    def backward(ctx, grad_output):
        probs, = ctx.saved_tensors
        return entmax15_vjp(probs, grad_output)


def one_hot_argmax(z: torch.Tensor) -> torch.Tensor:
    """Exact one-hot of the argmax along the last dimension; ties go to the lowest index."""
    index = torch.argmax(z, dim=-1, keepdim=True)
    return torch.zeros_like(z).scatter_(-1, index, 1.0)


def entmax15(z: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """
    1.5-entmax of z / temperature along the last dimension.

    Entries equal to -inf receive exactly zero probability. At temperature 0
    the result is the exact one-hot argmax, with no gradient.

    Args:
        z: Logits, any shape
        temperature: Non-negative temperature

    Returns:
        Probabilities with the same shape as z

    Raises:
        InvalidArgumentError: If z has NaN/+inf entries or temperature < 0
    """
    _check_finite(z, "entmax15")
    if temperature < 0:
        raise InvalidArgumentError("temperature must be >= 0", {"temperature": temperature})
    if temperature == 0:
        return one_hot_argmax(z.detach())
    return Entmax15Function.apply(z / temperature)


def _entmoid15_forward(x: torch.Tensor) -> torch.Tensor:
    is_pos = x >= 0
    a = x.abs()
    tau = (a + torch.sqrt(torch.relu(8 - a ** 2))) / 2
    tau = torch.where(tau <= a, torch.full_like(tau, 2.0), tau)
    y_neg = 0.25 * torch.relu(tau - a) ** 2
    return torch.where(is_pos, 1 - y_neg, y_neg)


def _entmoid15_backward(output: torch.Tensor, grad_output: torch.Tensor) -> torch.Tensor:
    s0, s1 = output.sqrt(), (1 - output).sqrt()
    grad = grad_output * s0
    return grad - grad / (s0 + s1) * s0


class Entmoid15Function(Function):

    @staticmethod
    def forward(ctx, x):
        output = _entmoid15_forward(x)
        ctx.save_for_backward(output)
        return output

    @staticmethod
    def backward(ctx, grad_output):
        output, = ctx.saved_tensors
        return _entmoid15_backward(output, grad_output)


def entmoid15(x: torch.Tensor) -> torch.Tensor:
    """Sparse sigmoid: first component of entmax15([x, 0]); exactly 0 for x <= -2 and 1 for x >= 2."""
    _check_finite(x, "entmoid15")
    if torch.isneginf(x).any():
        raise InvalidArgumentError("entmoid15 input must be finite", {"op": "entmoid15"})
    return Entmoid15Function.apply(x)


def entmoid15_grad(x: torch.Tensor) -> torch.Tensor:
    """Derivative of entmoid15, zero outside (-2, 2)."""
    _check_finite(x, "entmoid15_grad")
    return _entmoid15_backward(_entmoid15_forward(x), torch.ones_like(x))


def dropout(
    m: torch.Tensor,
    rate: float,
    training: bool,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """
    Inverted dropout with an explicit generator.

    Args:
        m: Input tensor
        rate: Drop probability in [0, 1)
        training: Identity when False
        generator: Random source; the global one when None

    Returns:
        Tensor with dropped entries zeroed and survivors scaled by 1 / (1 - rate)
    """
    if not 0.0 <= rate < 1.0:
        raise InvalidArgumentError("dropout rate must be in [0, 1)", {"rate": rate})
    if not training or rate == 0.0:
        return m
    keep = torch.rand(m.shape, generator=generator, dtype=m.dtype, device=m.device) >= rate
    return m * keep / (1.0 - rate)


class Entmax15(nn.Module):

    def __init__(self, temperature: float = 1.0):
        super().__init__()
        self.temperature = temperature

    def forward(self, z):
        return entmax15(z, self.temperature)


class Entmoid15(nn.Module):

    def forward(self, x):
        return entmoid15(x)
