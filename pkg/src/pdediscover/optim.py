"""Adam with a stepwise exponential learning-rate decay."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError


@dataclass
class AdamState:
    """Moments, step counter and schedule for a dict of named parameters.

    The learning rate applied at update ``t`` (0-based) is
    ``lr * decay ** (t // decay_every)``.
    """

    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.97
    decay_every: int = 200
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def learning_rate(self, step: int | None = None) -> float:
        step = self.step if step is None else step
        return self.lr * self.decay ** (step // self.decay_every)

    def copy(self) -> "AdamState":
        return copy.deepcopy(self)


def adam_step(params: dict, grads: dict, state: AdamState, masks: dict | None = None):
    """Apply one bias-corrected Adam update to ``params`` in place.

    Parameters
    ----------
    params, grads : dict of str -> ndarray
        Gradients must be shape-congruent with their parameters. Names absent
        from ``grads`` are left untouched.
    state : AdamState
        Updated in place; ``state.step`` grows by one.
    masks : dict of str -> ndarray, optional
        0/1 arrays; entries with mask 0 are frozen.

    Returns
    -------
    (params, state)
    """
    for name, g in grads.items():
        if name not in params:
            raise InvalidArgumentError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise InvalidArgumentError(
                f"gradient shape {np.shape(g)} does not match parameter {name!r} {np.shape(params[name])}")
    lr = state.learning_rate()
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if masks is not None and name in masks:
            g = g * masks[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if masks is not None and name in masks:
            update = update * masks[name]
        params[name] = params[name] - update
    state.step = t
    return params, state


def run_adam(objective, params: dict, state: AdamState, iterations: int, masks: dict | None = None,
             checkpoint_every: int = 500, max_recoveries: int = 10, callback=None):
    """Minimize ``objective`` with Adam, recovering from numerical blowups.

    ``objective(params)`` returns ``(loss, grads, terms)`` where ``terms`` is
    a tuple of extra scalars recorded in the history. A blowup (a
    :class:`NumericalBlowupError`, or a non-finite loss or gradient) restores
    the last in-memory checkpoint and halves the base learning rate.

    Returns
    -------
    history : list of tuples
        ``(iteration, loss, *terms, lr)`` per completed update, iterations
        counted from 1.
    """
    from .errors import NumericalBlowupError, TrainingDivergedError

    history: list = []
    saved = ({k: v.copy() for k, v in params.items()}, state.copy(), 0)
    recoveries = 0
    it = 0
    while it < iterations:
        if checkpoint_every and it % checkpoint_every == 0 and saved[2] != it:
            saved = ({k: v.copy() for k, v in params.items()}, state.copy(), it)
        try:
            loss, grads, terms = objective(params)
            ok = np.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values())
        except NumericalBlowupError:
            ok = False
        if not ok:
            recoveries += 1
            if recoveries > max_recoveries:
                raise TrainingDivergedError(f"training diverged after {recoveries - 1} recoveries", history)
            snap_params, snap_state, snap_it = saved
            params.clear()
            params.update({k: v.copy() for k, v in snap_params.items()})
            lr = state.lr * 0.5
            state_restored = snap_state.copy()
            state_restored.lr = lr
            _assign(state, state_restored)
            del history[snap_it:]
            it = snap_it
            continue
        lr = state.learning_rate()
        adam_step(params, grads, state, masks)
        it += 1
        row = (it, float(loss)) + tuple(float(t) for t in terms) + (lr,)
        history.append(row)
        if callback is not None:
            callback(row)
    return history


def _assign(state: AdamState, other: AdamState) -> None:
    for name in state.__dataclass_fields__:
        setattr(state, name, getattr(other, name))
