"""AdamW with decoupled weight decay and the stepped warm-up/decay
learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .errors import NumericalError
from .tensor import Tensor


class AdamWState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, shapes):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.step = 0


def adamw_step(params, grads, state: AdamWState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 5e-5) -> None:
    """One update, in place on the parameter arrays.

    Decay is decoupled: each parameter first shrinks by lr*weight_decay,
    then receives the bias-corrected Adam step. A non-finite gradient
    aborts before any parameter is touched.
    """
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {i}; aborting step")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class AdamW:
    """Optimizer over named tensors; reads .grad, updates .data in place."""

    def __init__(self, named_params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 5e-5):
        self.named_params: list[tuple[str, Tensor]] = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamWState([p.data.shape for _, p in self.named_params])

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def step(self) -> None:
        grads = []
        for name, p in self.named_params:
            if p.grad is None:
                grads.append(np.zeros_like(p.data))
            elif not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in {name}; aborting step")
            else:
                grads.append(p.grad)
        adamw_step([p.data for _, p in self.named_params], grads, self.state,
                   self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


def lr_schedule(epoch: int, base_lr: float = 1e-3, warmup_epochs: int = 5,
                decay: float = 0.75, decay_every: int = 18) -> float:
    """Linear per-epoch ramp from base_lr/warmup_epochs up to base_lr, then
    multiply by ``decay`` every ``decay_every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if warmup_epochs > 0 and epoch < warmup_epochs:
        return base_lr * (epoch + 1) / warmup_epochs
    return base_lr * decay ** ((epoch - warmup_epochs) // decay_every)
