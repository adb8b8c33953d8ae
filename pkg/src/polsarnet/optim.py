"""Adam optimizer over a fixed parameter list."""

from __future__ import annotations

import numpy as np

from .tensor import NumericalError, check_finite


class Adam:
    """Adam with bias-corrected first and second moments.

    Parameters are (name, Tensor) pairs; updates go into tensor.data in
    place and gradients are cleared after every step. Moments live in the
    parameter's own precision.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.params = list(params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(t.data) for _, t in self.params]
        self.v = [np.zeros_like(t.data) for _, t in self.params]

    def step(self):
        """Apply one update using the gradients currently on the tensors."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for (name, p), m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
            check_finite(p.data, f"adam step on {name}")
        self.zero_grad()

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def state_entries(self):
        """Moment buffers and step counter, for checkpointing."""
        out = [("optim/step", np.asarray([self.step_count], dtype=np.float64))]
        for (name, _), m, v in zip(self.params, self.m, self.v):
            out.append((f"optim/m/{name}", m))
            out.append((f"optim/v/{name}", v))
        return out

    def load_state(self, entries):
        table = dict(entries)
        if "optim/step" in table:
            self.step_count = int(table["optim/step"][0])
        for i, (name, _) in enumerate(self.params):
            if f"optim/m/{name}" in table:
                self.m[i] = np.asarray(table[f"optim/m/{name}"], dtype=self.m[i].dtype).copy()
            if f"optim/v/{name}" in table:
                self.v[i] = np.asarray(table[f"optim/v/{name}"], dtype=self.v[i].dtype).copy()
