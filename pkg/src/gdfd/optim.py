"""Adam, heavy-ball momentum and the warmup/step-decay schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    kind: str
    buffers: dict[str, list[np.ndarray]] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9

    @classmethod
    def adam(cls, params: Sequence, beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimizerState":
        shapes = [_data(p) for p in params]
        return cls("adam", {"m": [np.zeros_like(p) for p in shapes],
                            "v": [np.zeros_like(p) for p in shapes]},
                   beta1=beta1, beta2=beta2, eps=eps)

    @classmethod
    def sgd_momentum(cls, params: Sequence, momentum=0.9) -> "OptimizerState":
        return cls("momentum", {"velocity": [np.zeros_like(_data(p)) for p in params]},
                   momentum=momentum)

    def to_arrays(self) -> tuple[dict[str, np.ndarray], dict[str, str]]:
        """Flatten into named arrays plus string metadata (checkpoint form)."""
        arrays = {f"opt/{name}/{i}": buf for name, bufs in self.buffers.items()
                  for i, buf in enumerate(bufs)}
        meta = {"opt.kind": self.kind, "opt.step": str(self.step),
                "opt.beta1": repr(self.beta1), "opt.beta2": repr(self.beta2),
                "opt.eps": repr(self.eps), "opt.momentum": repr(self.momentum)}
        return arrays, meta

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], meta: dict[str, str]) -> "OptimizerState":
        buffers: dict[str, dict[int, np.ndarray]] = {}
        for key, arr in arrays.items():
            if not key.startswith("opt/"):
                continue
            _, name, idx = key.split("/")
            buffers.setdefault(name, {})[int(idx)] = np.array(arr)
        return cls(meta["opt.kind"],
                   {name: [d[i] for i in sorted(d)] for name, d in buffers.items()},
                   step=int(meta["opt.step"]), beta1=float(meta["opt.beta1"]),
                   beta2=float(meta["opt.beta2"]), eps=float(meta["opt.eps"]),
                   momentum=float(meta["opt.momentum"]))


def _data(p):
    return p.data if isinstance(p, Tensor) else np.asarray(p)


def _check(params, grads, state, key):
    if len(params) != len(grads) or len(params) != len(state.buffers[key]):
        raise ValueError("parameter, gradient and state counts differ")
    for p, g, b in zip(params, grads, state.buffers[key]):
        if _data(p).shape != np.shape(g) or b.shape != np.shape(g):
            raise ValueError(f"shape mismatch: param {_data(p).shape}, grad {np.shape(g)}")


def adam_step(params: Sequence, grads: Sequence, state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    _check(params, grads, state, "m")
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for p, g, m, v in zip(params, grads, state.buffers["m"], state.buffers["v"]):
        g = np.asarray(g)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        data = _data(p)
        data -= update.astype(data.dtype)


def momentum_step(params: Sequence, grads: Sequence, state: OptimizerState, lr: float) -> None:
    """v <- mu * v + g;  p <- p - lr * v."""
    _check(params, grads, state, "velocity")
    state.step += 1
    for p, g, vel in zip(params, grads, state.buffers["velocity"]):
        vel *= state.momentum
        vel += g
        data = _data(p)
        data -= (lr * vel).astype(data.dtype)


class Optimizer:
    """Steps a fixed parameter list using the gradients left by backward."""

    def __init__(self, params: Sequence[Tensor], kind: str = "adam", **hyper):
        self.params = list(params)
        if kind == "adam":
            self.state = OptimizerState.adam(self.params, **hyper)
        elif kind == "momentum":
            self.state = OptimizerState.sgd_momentum(self.params, **hyper)
        else:
            raise ValueError(f"unknown optimizer {kind!r}")

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.state.kind == "adam":
            adam_step(self.params, grads, self.state, lr)
        else:
            momentum_step(self.params, grads, self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_schedule(step: int, base_lr: float, warmup: int, decay: float = 0.977,
                decay_interval: int = 1000) -> float:
    """Linear warmup from 0 to ``base_lr``, then ``decay`` every ``decay_interval`` steps."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < warmup:
        return base_lr * step / warmup
    return base_lr * decay ** ((step - warmup) // decay_interval)
