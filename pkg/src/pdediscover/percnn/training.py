"""Gradient evaluation and the two-phase training schedule."""

from __future__ import annotations

import logging

import numpy as np

from ..autodiff import Tape
from ..errors import InvalidArgumentError
from ..field import as_field
from ..ops import ArrayOps, TapeOps
from ..optim import AdamState, run_adam
from .model import (PiBlockModel, TrainConfig, block_forward, isg_block, model_interpolant,
                    reconstruction_loss, rollout_generic)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iteration", "loss", "data_term", "ic_term", "lr")


def _grads_by_name(model, P, grads):
    out = {}
    for name, val in P.items():
        if hasattr(val, "tape") and val in grads:
            g = grads[val]
            if name == "hw":
                # lam = exp(raw)
                out["hw_raw"] = g * val.value
            else:
                out[name] = g
    return out


def _check_measurements(model: PiBlockModel, measurements, cfg: TrainConfig):
    meas = as_field(measurements, name="measurements")
    c = model.config
    s = cfg.spatial_stride
    if meas.shape[1] != c.n_components:
        raise InvalidArgumentError(f"measurements have {meas.shape[1]} components, model {c.n_components}")
    need = ((c.grid[0] - 1) // s + 1, (c.grid[1] - 1) // s + 1)
    if (c.grid[0] - 1) % s or (c.grid[1] - 1) % s or meas.shape[2:] != need:
        raise InvalidArgumentError(
            f"measurement grid {meas.shape[2:]} does not map into HR grid {c.grid} with stride {s}")
    if meas.shape[0] < 1:
        raise InvalidArgumentError("no measurement frames")
    return meas


def loss_and_grads(model: PiBlockModel, measurements, cfg: TrainConfig, names=None, interp=None):
    """Eq.-style loss and its gradients for the named parameters.

    Returns ``(loss, grads, (data_term, ic_term))``; ``grads`` is keyed by
    parameter name (``hw_raw`` for the highway coefficient).
    """
    meas = np.asarray(measurements, dtype=np.float64)
    names = model.params.keys() if names is None else names
    if interp is None:
        interp = model_interpolant(model, meas[0])
    st = cfg.temporal_stride
    n_roll = (meas.shape[0] - 1) * st
    tape = Tape()
    ops = TapeOps(tape)
    P = model.bind(ops, trainable=set(names))
    u0 = isg_block(ops, P, interp, model)
    keep = set(range(0, n_roll + 1, st))
    frames = rollout_generic(ops, lambda x: block_forward(ops, P, x, model), u0, n_roll, model.config.dt, keep)
    loss, data, ic = reconstruction_loss(ops, frames, meas, u0, interp, cfg.eta, cfg.spatial_stride, st)
    grads = tape.backward(loss)
    return float(loss.value), _grads_by_name(model, P, grads), (float(data.value), float(ic.value))


def evaluate_loss(model: PiBlockModel, measurements, cfg: TrainConfig):
    """Loss terms ``(loss, data, ic)`` without a tape."""
    meas = np.asarray(measurements, dtype=np.float64)
    interp = model_interpolant(model, meas[0])
    ops = ArrayOps()
    P = model.bind()
    st = cfg.temporal_stride
    n_roll = (meas.shape[0] - 1) * st
    u0 = isg_block(ops, P, interp, model)
    frames = rollout_generic(ops, lambda x: block_forward(ops, P, x, model), u0, n_roll, model.config.dt,
                             set(range(0, n_roll + 1, st)))
    loss, data, ic = reconstruction_loss(ops, frames, meas, u0, interp, cfg.eta, cfg.spatial_stride, st)
    return float(loss), float(data), float(ic)


def zero_dynamics_loss(model: PiBlockModel, measurements, cfg: TrainConfig) -> float:
    """Data misfit of the frozen-in-time model ``U(t) = I(u~0)``."""
    meas = np.asarray(measurements, dtype=np.float64)
    interp = model_interpolant(model, meas[0])
    s = cfg.spatial_stride
    coarse = interp[:, ::s, ::s]
    return float(np.mean([np.mean((coarse - m) ** 2) for m in meas]))


def pretrain_isg(model: PiBlockModel, lr_init, iterations: int | None = None, lr: float | None = None):
    """Fit the ISG corrector so that its output reproduces ``I(u~0)``."""
    g = model.isg
    iterations = g.pretrain_iters if iterations is None else iterations
    lr = g.pretrain_lr if lr is None else lr
    interp = model_interpolant(model, lr_init)
    names = model.isg_names

    def objective(params):
        tape = Tape()
        ops = TapeOps(tape)
        P = model.bind(ops, trainable=set(names))
        out = isg_block(ops, P, interp, model)
        loss = ops.mse(out, interp)
        grads = _grads_by_name(model, P, tape.backward(loss))
        return float(loss.value), grads, ()

    sub = {n: model.params[n] for n in names}
    state = AdamState(lr=lr)
    history = run_adam(objective, _Proxy(model.params, sub), state, iterations, checkpoint_every=0)
    return history


class _Proxy(dict):
    """Dict view that writes updates through to the model's parameter dict."""

    def __init__(self, target, items):
        super().__init__(items)
        self._target = target

    def __setitem__(self, key, value):
        super().__setitem__(key, value)
        self._target[key] = value

    def update(self, other=(), **kw):
        for k, v in dict(other, **kw).items():
            self[k] = v


def train(model: PiBlockModel, measurements, cfg: TrainConfig, callback=None, pretrain: bool = True):
    """Pretrain the ISG, then train block and ISG jointly.

    Parameters
    ----------
    model : PiBlockModel
        Updated in place and returned.
    measurements : ndarray, shape (n_frames, n_c, h, w)
    cfg : TrainConfig

    Returns
    -------
    (model, history)
        ``history`` rows follow :data:`HISTORY_COLUMNS`.
    """
    meas = _check_measurements(model, measurements, cfg)
    if cfg.iterations < 0:
        raise InvalidArgumentError("iterations must be >= 0")
    if pretrain and model.isg.pretrain_iters > 0:
        hist = pretrain_isg(model, meas[0])
        log.info("ISG pretraining: final mse %.3e", hist[-1][1] if hist else float("nan"))
    interp = model_interpolant(model, meas[0])
    names = [n for n in model.params if np.any(model.masks.get(n, 1.0))]

    def objective(params):
        return loss_and_grads(model, meas, cfg, names, interp)

    state = AdamState(lr=cfg.lr, decay=cfg.decay, decay_every=cfg.decay_every)
    history = run_adam(objective, _Proxy(model.params, {n: model.params[n] for n in names}), state,
                       cfg.iterations, masks=model.masks, checkpoint_every=cfg.checkpoint_every,
                       max_recoveries=cfg.max_recoveries, callback=callback)
    return model, history
