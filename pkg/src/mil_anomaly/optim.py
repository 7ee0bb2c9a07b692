"""Adam and learning-rate-scaled Adadelta, written out by hand.

Parameters are handled as the flat ``[W0, b0, W1, b1, ...]`` list from
``ModelParams.arrays()``. Steps return fresh arrays and leave inputs untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scorer import ModelParams

ADAM_DEFAULTS = {"learning_rate": 0.0005, "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8}
ADADELTA_DEFAULTS = {"learning_rate": 0.01, "rho": 0.95, "epsilon": 1e-6}
KINDS = {"adam": ADAM_DEFAULTS, "adadelta": ADADELTA_DEFAULTS}


class OptimizerError(ValueError):
    pass


@dataclass
class OptimizerState:
    kind: str
    hyperparams: dict
    step_count: int = 0
    # adam: (first moment, second moment); adadelta: (E[g^2], E[dx^2])
    slots: tuple[list[np.ndarray], list[np.ndarray]] = field(default_factory=lambda: ([], []))

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            self.kind,
            dict(self.hyperparams),
            self.step_count,
            ([a.copy() for a in self.slots[0]], [a.copy() for a in self.slots[1]]),
        )


def make_state(kind: str, hyperparams: dict | None, params: ModelParams) -> OptimizerState:
    if kind not in KINDS:
        raise OptimizerError(f"unknown optimizer {kind!r}; choose from {sorted(KINDS)}")
    hp = dict(KINDS[kind])
    for key, value in (hyperparams or {}).items():
        if value is None:
            continue
        if key not in hp:
            raise OptimizerError(f"{kind} has no hyperparameter {key!r}")
        hp[key] = float(value)
    if not hp["learning_rate"] > 0:
        raise OptimizerError(f"learning_rate must be positive, got {hp['learning_rate']}")
    if not hp["epsilon"] > 0:
        raise OptimizerError("epsilon must be positive")
    for key in ("beta1", "beta2", "rho"):
        if key in hp and not 0.0 <= hp[key] < 1.0:
            raise OptimizerError(f"{key} must lie in [0, 1), got {hp[key]}")
    zeros = lambda: [np.zeros_like(a) for a in params.arrays()]  # noqa: E731
    return OptimizerState(kind, hp, 0, (zeros(), zeros()))


def _check(params: ModelParams, grads: ModelParams, state: OptimizerState, kind: str):
    if state.kind != kind:
        raise OptimizerError(f"state is for {state.kind}, not {kind}")
    p, g = params.arrays(), grads.arrays()
    if len(p) != len(g) or any(a.shape != b.shape for a, b in zip(p, g)):
        raise OptimizerError("gradient shapes do not match parameter shapes")
    if any(a.shape != b.shape for a, b in zip(p, state.slots[0])):
        raise OptimizerError("optimizer state shapes do not match parameter shapes")
    if not all(np.all(np.isfinite(a)) for a in g):
        raise OptimizerError("non-finite gradient")
    return p, g


def adam_step(params: ModelParams, grads: ModelParams, state: OptimizerState):
    p, g = _check(params, grads, state, "adam")
    hp = state.hyperparams
    lr, b1, b2, eps = hp["learning_rate"], hp["beta1"], hp["beta2"], hp["epsilon"]
    t = state.step_count + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for theta, grad, m, v in zip(p, g, *state.slots):
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        new_p.append(theta - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return ModelParams.from_arrays(new_p), OptimizerState("adam", dict(hp), t, (new_m, new_v))


def adadelta_step(params: ModelParams, grads: ModelParams, state: OptimizerState):
    p, g = _check(params, grads, state, "adadelta")
    hp = state.hyperparams
    lr, rho, eps = hp["learning_rate"], hp["rho"], hp["epsilon"]
    new_p, new_sq, new_dx = [], [], []
    for theta, grad, sq, dx2 in zip(p, g, *state.slots):
        sq = rho * sq + (1.0 - rho) * grad * grad
        delta = -(np.sqrt(dx2 + eps) / np.sqrt(sq + eps)) * grad
        dx2 = rho * dx2 + (1.0 - rho) * delta * delta
        new_p.append(theta + lr * delta)
        new_sq.append(sq)
        new_dx.append(dx2)
    return ModelParams.from_arrays(new_p), OptimizerState(
        "adadelta", dict(hp), state.step_count + 1, (new_sq, new_dx)
    )


def step(params: ModelParams, grads: ModelParams, state: OptimizerState):
    if state.kind == "adam":
        return adam_step(params, grads, state)
    return adadelta_step(params, grads, state)
