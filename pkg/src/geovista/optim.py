"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Parameter


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """AdamW over a name -> Parameter mapping.

    Parameters whose names appear in ``no_decay`` (or, when ``no_decay`` is
    None, all 1-D parameters: biases, norm gains, attention gains, mask
    tokens) are not weight-decayed.
    """

    def __init__(self, named_params, lr: float, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.05, no_decay: set[str] | None = None):
        self.params: dict[str, Parameter] = dict(named_params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                    weight_decay=weight_decay)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)
        if no_decay is None:
            no_decay = {n for n, p in self.params.items() if p.data.ndim <= 1}
        self.no_decay = set(no_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        st = self.state
        lr = st.lr if lr is None else lr
        st.step += 1
        c1 = 1.0 - st.beta1 ** st.step
        c2 = 1.0 - st.beta2 ** st.step
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = st.m[name]
            v = st.v[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            if name not in self.no_decay and st.weight_decay:
                p.data *= 1.0 - lr * st.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
        self.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.state.m[name]
            out[f"opt.v.{name}"] = self.state.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        for name in self.params:
            self.state.m[name][...] = arrays[f"opt.m.{name}"]
            self.state.v[name][...] = arrays[f"opt.v.{name}"]
        self.state.step = step


def adamw_step(opt: AdamW, lr: float | None = None) -> None:
    opt.step(lr)
