"""RMSprop with inverse-time learning-rate decay and coupled L2 weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter


class NumericalError(FloatingPointError):
    """A NaN/inf showed up in a loss or parameter update."""


@dataclass
class OptimConfig:
    lr0: float = 0.001
    lr_decay: float = 0.001
    rho: float = 0.9
    epsilon: float = 1e-8
    weight_decay: float = 1e-4
    # optional per-submodel override, keyed by parameter-name prefix ("fcn.", "resnet.")
    weight_decay_by_prefix: dict[str, float] = field(default_factory=dict)
    batch_size: int = 8

    def __post_init__(self):
        for key in ("lr0", "lr_decay", "epsilon", "weight_decay"):
            if getattr(self, key) < 0:
                raise ValueError(f"{key} must be >= 0")
        if not 0 < self.rho < 1:
            raise ValueError("rho must be in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def decay_for(self, name: str) -> float:
        for prefix, wd in self.weight_decay_by_prefix.items():
            if name.startswith(prefix):
                return wd
        return self.weight_decay

    def lr_at(self, step: int) -> float:
        return self.lr0 / (1.0 + self.lr_decay * step)


class RMSprop:
    """v <- rho v + (1-rho) g^2;  theta <- theta - lr_t g / (sqrt(v) + eps).

    g includes ``weight_decay * theta`` unless the parameter is flagged
    decay-exempt (biases, batch-norm scale/shift). ``lr_t = lr0/(1+decay*t)``
    with t the number of updates already applied.
    """

    def __init__(self, params: list[Parameter], cfg: OptimConfig):
        self.params = [p for p in params if p.trainable]
        self.cfg = cfg
        self.step_count = 0
        self.accumulators = {p.name: np.zeros_like(p.value) for p in self.params}
        if len(self.accumulators) != len(self.params):
            raise ValueError("parameter names must be unique")

    @property
    def lr(self) -> float:
        return self.cfg.lr_at(self.step_count)

    def step(self) -> None:
        cfg = self.cfg
        lr = self.lr
        updates = []
        for p in self.params:
            v = self.accumulators[p.name]
            if v.shape != p.value.shape:
                raise ValueError(f"accumulator for {p.name} has shape {v.shape}, parameter {p.value.shape}")
            g = p.grad
            wd = 0.0 if p.decay_exempt else cfg.decay_for(p.name)
            if wd:
                g = g + wd * p.value
            v_new = cfg.rho * v + (1 - cfg.rho) * g * g
            delta = lr * g / (np.sqrt(v_new) + cfg.epsilon)
            if not np.all(np.isfinite(delta)):
                raise NumericalError(f"non-finite update for {p.name} at step {self.step_count}")
            updates.append((p, v_new.astype(v.dtype, copy=False), delta))
        for p, v_new, delta in updates:
            self.accumulators[p.name] = v_new
            p.value -= delta.astype(p.value.dtype, copy=False)
        self.step_count += 1

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"opt/{k}": v for k, v in self.accumulators.items()}
        out["opt/step"] = np.array([self.step_count], dtype=np.float64)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name in self.accumulators:
            key = f"opt/{name}"
            if key in state:
                arr = np.asarray(state[key])
                if arr.shape != self.accumulators[name].shape:
                    raise ValueError(f"accumulator shape mismatch for {name}")
                self.accumulators[name] = arr.astype(self.accumulators[name].dtype).copy()
        if "opt/step" in state:
            self.step_count = int(np.asarray(state["opt/step"]).ravel()[0])


def rmsprop_step(params: list[Parameter], optimizer: RMSprop) -> None:
    """Apply one update to ``params`` using their populated ``grad`` buffers."""
    if [p.name for p in params if p.trainable] != [p.name for p in optimizer.params]:
        raise ValueError("optimizer was built for a different parameter list")
    optimizer.step()
