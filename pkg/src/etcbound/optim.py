"""Adam with an inverse-square-root learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np


def inverse_sqrt_lr(base_lr: float, warmup_steps: int, step: int) -> float:
    """lr(t) = base_lr * min(1, sqrt(warmup_steps / t)) with 1-based steps.

    Constant during warm-up, then decays as 1/sqrt(t).  A warm-up of zero
    steps is treated as one so the schedule stays positive.
    """
    if step < 1:
        raise ValueError("step is 1-based")
    w = max(1, int(warmup_steps))
    return base_lr * min(1.0, math.sqrt(w / step))


class Adam:
    """Standard Adam over a fixed list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_to_json_obj(self) -> dict:
        return {
            "t": self.t,
            "m": [[float(x) for x in arr.ravel()] for arr in self.m],
            "v": [[float(x) for x in arr.ravel()] for arr in self.v],
        }

    def load_state_json_obj(self, obj: dict) -> None:
        self.t = int(obj["t"])
        for arr, flat in zip(self.m, obj["m"]):
            arr[...] = np.array(flat, dtype=np.float64).reshape(arr.shape)
        for arr, flat in zip(self.v, obj["v"]):
            arr[...] = np.array(flat, dtype=np.float64).reshape(arr.shape)
