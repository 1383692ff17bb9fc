"""
QHAdam: quasi-hyperbolic interpolation between plain gradient steps and Adam.

    m = beta1 m + (1 - beta1) g          m_hat = m / (1 - beta1^t)
    v = beta2 v + (1 - beta2) g^2        v_hat = v / (1 - beta2^t)
    p = p - lr * ((1 - nu1) g + nu1 m_hat) / (sqrt((1 - nu2) g^2 + nu2 v_hat) + eps)

nu1 = nu2 = 1 recovers Adam.
"""
from typing import Callable, List, Optional, Sequence, Tuple

import torch
from torch.optim import Optimizer

from exceptions import InvalidArgumentError, NumericalError


@torch.no_grad()
def qhadam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    exp_avgs: Sequence[torch.Tensor],
    exp_avg_sqs: Sequence[torch.Tensor],
    steps: Sequence[int],
    lr: float,
    nus: Tuple[float, float] = (0.7, 1.0),
    betas: Tuple[float, float] = (0.95, 0.998),
    eps: float = 1e-8,
) -> None:
    """
    Apply one QHAdam update in place.

    Args:
        params: Parameters to update
        grads: Their gradients
        exp_avgs: First moment accumulators, updated in place
        exp_avg_sqs: Second moment accumulators, updated in place
        steps: 1-based step count of each parameter after this update
        lr: Learning rate
        nus: (nu1, nu2) immediate discount factors
        betas: Moment decay rates
        eps: Denominator epsilon

    Raises:
        NumericalError: If any gradient is not finite
    """
    nu1, nu2 = nus
    beta1, beta2 = betas
    for param, grad, step in zip(params, grads, steps):
        if not torch.isfinite(grad).all():
            raise NumericalError("non-finite gradient", {"shape": tuple(param.shape), "step": step})

    for param, grad, exp_avg, exp_avg_sq, step in zip(params, grads, exp_avgs, exp_avg_sqs, steps):
        exp_avg.mul_(beta1).add_(grad, alpha=1 - beta1)
        exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
        m_hat = exp_avg / (1 - beta1 ** step)
        v_hat = exp_avg_sq / (1 - beta2 ** step)

        numerator = (1 - nu1) * grad + nu1 * m_hat
        denominator = ((1 - nu2) * grad * grad + nu2 * v_hat).sqrt().add_(eps)
        param.addcdiv_(numerator, denominator, value=-lr)


class QHAdam(Optimizer):
    """
    torch optimizer wrapper around `qhadam_step`.

    Args:
        params: Iterable of parameters or parameter groups
        lr: Learning rate; changed per step by the training schedule
        nus: (nu1, nu2)
        betas: (beta1, beta2)
        eps: Denominator epsilon
    """

    def __init__(self, params, lr: float = 1e-3, nus=(0.7, 1.0), betas=(0.95, 0.998), eps: float = 1e-8):
        if lr < 0.0:
            raise InvalidArgumentError("learning rate must be >= 0", {"lr": lr})
        for name, pair, upper in (("nus", nus, 1.0), ("betas", betas, 1.0)):
            for value in pair:
                if not 0.0 <= value <= upper or (name == "betas" and value == upper):
                    raise InvalidArgumentError(f"invalid {name}", {name: tuple(pair)})
        if eps <= 0.0:
            raise InvalidArgumentError("eps must be > 0", {"eps": eps})
        super().__init__(params, dict(lr=lr, nus=tuple(nus), betas=tuple(betas), eps=eps))

    def set_lr(self, lr: float) -> None:
        for group in self.param_groups:
            group["lr"] = lr

    @torch.no_grad()
    def step(self, closure: Optional[Callable[[], float]] = None) -> Optional[float]:
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            params: List[torch.Tensor] = []
            grads, exp_avgs, exp_avg_sqs, steps = [], [], [], []
            for p in group["params"]:
                if p.grad is None:
                    continue
                if p.grad.is_sparse:
                    raise InvalidArgumentError("sparse gradients are not supported")
                state = self.state[p]
                if len(state) == 0:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                params.append(p)
                grads.append(p.grad)
                exp_avgs.append(state["exp_avg"])
                exp_avg_sqs.append(state["exp_avg_sq"])
                steps.append(state["step"])

            qhadam_step(params, grads, exp_avgs, exp_avg_sqs, steps,
                        lr=group["lr"], nus=group["nus"], betas=group["betas"], eps=group["eps"])
        return loss
