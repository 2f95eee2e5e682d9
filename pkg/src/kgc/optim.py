"""Adam with bias correction, plus global gradient-norm clipping.

Parameters whose gradients arrive as sparse row chunks (large embedding
tables) get a lazy update: only rows touched since the last step move, and
their first/second moments are the only ones decayed. This is the standard
sparse-Adam trade-off; decaying moments for 250k untouched rows per step
would defeat the point of sparse gradients.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def adam_update(param, grad, m, v, step, lr, beta1, beta2, eps):
    """One in-place Adam update on numpy arrays. ``step`` counts from 1."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_gradient_norm(params, max_norm):
    """Scale all gradients by max_norm/g when the global L2 norm g exceeds
    max_norm. Returns the pre-clip norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for p in params:
        if p.sparse_grad and p.row_grad:
            total += p.row_grad.norm_squared()
        elif p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.sparse_grad and p.row_grad:
                p.row_grad.scale(factor)
            elif p.grad is not None:
                p.grad *= factor
    return norm


class Adam(object):
    """Adam over named parameter tensors.

    State layout (per parameter name): first moment ``m``, second moment
    ``v``; a single global step counter drives bias correction for dense
    and sparse parameters alike.
    """

    def __init__(self, named_params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = dict(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.moments = {
            name: (np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in self.params.items()
        }

    def step(self):
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            m, v = self.moments[name]
            if p.sparse_grad:
                if not p.row_grad:
                    continue
                rows, grad = p.row_grad.coalesce()
                if p.data.ndim == 1:
                    grad = grad[:, 0]
                mr, vr = m[rows], v[rows]
                pr = p.data[rows]
                adam_update(pr, grad, mr, vr, t, self.lr,
                            self.beta1, self.beta2, self.eps)
                m[rows], v[rows] = mr, vr
                p.data[rows] = pr
            elif p.grad is not None:
                adam_update(p.data, p.grad, m, v, t, self.lr,
                            self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self):
        """Optimizer state as flat name -> array pairs for checkpointing."""
        out = {"step": np.asarray([self.step_count], dtype=np.float32)}
        for name, (m, v) in self.moments.items():
            out[f"{name}.m"] = m
            out[f"{name}.v"] = v
        return out

    def load_state_arrays(self, state):
        self.step_count = int(state["step"][0])
        for name in self.moments:
            m = state[f"{name}.m"].astype(self.params[name].data.dtype)
            v = state[f"{name}.v"].astype(self.params[name].data.dtype)
            self.moments[name] = (m.reshape(self.params[name].data.shape),
                                  v.reshape(self.params[name].data.shape))
