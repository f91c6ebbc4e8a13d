"""Coefficient refinement inside a recurrent model built from a discovered PDE.

The model's right-hand side is the discovered term set, evaluated by the
same code as the simulator (:func:`pdediscover.simulate.evaluate_rhs`),
marched by forward Euler from a frozen reconstructed initial state. Only
the scalar coefficients are trained.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tape
from .errors import InvalidArgumentError, NumericalBlowupError
from .field import as_field
from .library import TermDescriptor, term
from .ops import ArrayOps, TapeOps
from .optim import AdamState, run_adam
from .simulate import PdeSystem, evaluate_rhs


@dataclass
class FinetuneConfig:
    iterations: int = 5000
    lr: float = 0.001
    decay: float = 0.97
    decay_every: int = 200
    checkpoint_every: int = 500
    max_recoveries: int = 10

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown finetune keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class PhysicsModel:
    """Fixed term structure with trainable coefficients.

    Coefficients are stored as ``c = c0 * (1 + theta)`` per term, so one
    optimizer step changes every coefficient by a comparable relative
    amount regardless of its magnitude. ``u0`` is the frozen HR initial
    state ``(n_c, H, W)``.
    """

    system: PdeSystem
    u0: np.ndarray
    dx: float
    dt: float
    spatial_stride: int = 1
    temporal_stride: int = 1

    def __post_init__(self):
        self.u0 = np.asarray(self.u0, dtype=np.float64)
        if self.u0.ndim == 4:
            self.u0 = self.u0[0]
        if self.u0.shape[0] != self.system.n_components:
            raise InvalidArgumentError("initial state and system disagree on component count")
        if not np.all(np.isfinite(self.u0)):
            raise InvalidArgumentError("initial state is not finite")
        if not self.dt > 0:
            raise InvalidArgumentError("dt must be positive")
        self.base = [np.array([c if c != 0 else 1.0 for c in row]) for row in self.system.coefficients()]
        self.theta = {f"c{i}_{j}": np.asarray(c / b - 1.0) for i, (row, brow) in
                      enumerate(zip(self.system.coefficients(), self.base)) for j, (c, b) in enumerate(zip(row, brow))}

    def coefficients(self, theta=None) -> list:
        theta = self.theta if theta is None else theta
        return [[float(b * (1.0 + theta[f"c{i}_{j}"])) for j, b in enumerate(brow)]
                for i, brow in enumerate(self.base)]

    def current_system(self) -> PdeSystem:
        return self.system.with_coefficients(self.coefficients())

    def rollout(self, n_steps: int) -> np.ndarray:
        """Forward-Euler trajectory ``(n_steps + 1, n_c, H, W)`` with current coefficients."""
        ops = ArrayOps()
        coeffs = self.coefficients()
        comps = [self.u0[i] for i in range(self.u0.shape[0])]
        out = [self.u0]
        for k in range(1, n_steps + 1):
            comps = _euler(ops, comps, self.current_system(), self.dx, self.dt, coeffs)
            frame = np.stack(comps)
            if not np.all(np.isfinite(frame)):
                raise NumericalBlowupError(f"non-finite state at step {k}", step=k)
            out.append(frame)
        return np.stack(out)


def _euler(ops, comps, system, dx, dt, coeffs):
    rhs = evaluate_rhs(comps, system, dx, ops, coeffs=coeffs)
    return [ops.add(x, ops.scale(f, dt)) for x, f in zip(comps, rhs)]


def build_physics_model(terms, coefficients=None, u0=None, dx=1.0, dt=1.0, spatial_stride=1, temporal_stride=1,
                        name="discovered") -> PhysicsModel:
    """Assemble a :class:`PhysicsModel`.

    ``terms`` is either a :class:`PdeSystem` or per-component lists of term
    names/descriptors, with ``coefficients`` aligned to them.
    """
    if isinstance(terms, PdeSystem):
        system = terms
    else:
        if coefficients is None:
            raise InvalidArgumentError("coefficients are required with a bare term list")
        rows = []
        for trow, crow in zip(terms, coefficients):
            if len(trow) != len(crow):
                raise InvalidArgumentError("terms and coefficients differ in length")
            row = []
            for t, c in zip(trow, crow):
                t = term(t) if isinstance(t, str) else t
                if not isinstance(t, TermDescriptor):
                    raise InvalidArgumentError(f"unknown term {t!r}")
                if not np.isfinite(c):
                    raise InvalidArgumentError(f"coefficient of {t.name} is not finite")
                row.append((t, float(c)))
            rows.append(row)
        system = PdeSystem(rows, name)
    if u0 is None:
        raise InvalidArgumentError("an initial state is required")
    return PhysicsModel(system, u0, dx, dt, spatial_stride, temporal_stride)


def data_loss_and_grads(pm: PhysicsModel, measurements, theta=None):
    """Mean squared misfit over all measurement frames and its theta gradients."""
    meas = np.asarray(measurements, dtype=np.float64)
    theta = pm.theta if theta is None else theta
    tape = Tape()
    ops = TapeOps(tape)
    leaves = {}
    coeffs = []
    for i, brow in enumerate(pm.base):
        row = []
        for j, b in enumerate(brow):
            name = f"c{i}_{j}"
            node = tape.leaf(np.asarray(b * (1.0 + theta[name])), trainable=True, name=name)
            leaves[name] = node
            row.append(node)
        coeffs.append(row)
    s, st = pm.spatial_stride, pm.temporal_stride
    n_frames, n_c = meas.shape[0], meas.shape[1]
    comps = [pm.u0[i] for i in range(n_c)]
    idx = (slice(None, None, s), slice(None, None, s))
    data = None
    for k in range((n_frames - 1) * st + 1):
        if k > 0:
            comps = _euler(ops, comps, pm.system, pm.dx, pm.dt, coeffs)
            for c in comps:
                if not np.all(np.isfinite(ops.value(c))):
                    raise NumericalBlowupError(f"non-finite state at step {k}", step=k)
        if k % st:
            continue
        j = k // st
        for i in range(n_c):
            pred = ops.sample(comps[i], idx)
            if ops.value(pred).shape != meas[j, i].shape:
                raise InvalidArgumentError("measurement grid does not map into the model grid")
            term_ = ops.mse(pred, meas[j, i])
            data = term_ if data is None else ops.add(data, term_)
    loss = ops.scale(data, 1.0 / (n_frames * n_c))
    if not loss.requires_grad:
        return float(loss.value), {n: np.zeros(()) for n in leaves}
    g = tape.backward(loss)
    grads = {}
    for i, brow in enumerate(pm.base):
        for j, b in enumerate(brow):
            name = f"c{i}_{j}"
            grads[name] = np.asarray(g[leaves[name]] * b)
    return float(loss.value), grads


def finetune(pm: PhysicsModel, measurements, cfg: FinetuneConfig | None = None, callback=None):
    """Adam on the coefficients; returns ``(PdeSystem, history)``.

    History rows are ``(iteration, loss, lr)``. The term structure never
    changes; a coefficient may shrink toward zero but stays reported.
    """
    cfg = cfg or FinetuneConfig()
    meas = as_field(measurements, name="measurements")
    params = pm.theta
    if not params or cfg.iterations == 0:
        return pm.current_system(), []

    def objective(p):
        loss, grads = data_loss_and_grads(pm, meas, p)
        return loss, grads, ()

    state = AdamState(lr=cfg.lr, decay=cfg.decay, decay_every=cfg.decay_every)
    history = run_adam(objective, params, state, cfg.iterations, checkpoint_every=cfg.checkpoint_every,
                       max_recoveries=cfg.max_recoveries, callback=callback)
    pm.theta = params
    return pm.current_system(), history
