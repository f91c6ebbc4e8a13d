"""The recurrent product block, its initial-state generator, and the loss.

The block computes

    F(U) = sum_c f[o, c] * prod_l (K[l, c] * U + b[l, c]) + fb[o] + lam[o] * lap(U[o])

with circular padding, and the rollout marches ``U <- U + dt * F(U)``.
All model arithmetic goes through an ops backend (see :mod:`pdediscover.ops`)
so the same code serves inference and training.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.interpolate import make_interp_spline

from .. import stencils
from ..errors import InvalidArgumentError, NumericalBlowupError
from ..library import COMPONENTS
from ..ops import ArrayOps


def _from_dict(cls, d):
    d = dict(d or {})
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise InvalidArgumentError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    return cls(**d)


@dataclass
class PiBlockConfig:
    """Architecture of the recurrent block.

    ``kernel_size`` may be a per-layer list; all filters are stored at the
    largest size and smaller layers are masked to their centered footprint.
    ``frozen_filters`` pins individual ``(layer, channel)`` filters to a
    stencil applied to one component (``op`` in ``id``, ``x``, ``y``,
    ``lap``) with zero bias.
    """

    n_layers: int = 3
    n_channels: int = 16
    kernel_size: object = 5
    n_components: int = 2
    n_out: int | None = None
    separate_blocks: bool = False
    highway: bool = True
    highway_mode: str = "trainable"
    highway_init: object = 1e-3
    grid: tuple = (101, 101)
    dx: float = 0.01
    dt: float = 2.5e-4
    n_steps: int = 200
    frozen_filters: list = field(default_factory=list)

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if self.n_out is None:
            self.n_out = self.n_components
        sizes = self.layer_kernel_sizes
        if any(k % 2 != 1 or k < 1 for k in sizes):
            raise InvalidArgumentError(f"kernel sizes must be odd, got {sizes}")
        if self.n_layers < 1 or self.n_channels < 1:
            raise InvalidArgumentError("n_layers and n_channels must be >= 1")
        if not self.dt > 0:
            raise InvalidArgumentError("dt must be positive")
        if self.highway and self.n_out != self.n_components:
            raise InvalidArgumentError("the highway layer needs n_out == n_components")
        if self.highway_mode not in ("trainable", "frozen"):
            raise InvalidArgumentError(f"unknown highway mode {self.highway_mode!r}")

    @property
    def layer_kernel_sizes(self) -> list[int]:
        if isinstance(self.kernel_size, (list, tuple)):
            sizes = [int(k) for k in self.kernel_size]
            if len(sizes) != self.n_layers:
                raise InvalidArgumentError("kernel_size list must have one entry per layer")
            return sizes
        return [int(self.kernel_size)] * self.n_layers

    @property
    def kmax(self) -> int:
        return max(self.layer_kernel_sizes)

    @property
    def total_channels(self) -> int:
        return self.n_channels * (self.n_out if self.separate_blocks else 1)

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


@dataclass
class IsgConfig:
    """Initial-state generator: interpolation plus a conv residual corrector."""

    interpolation: str = "bicubic"
    depth: int = 3
    channels: int = 16
    kernel_size: int = 3
    pretrain_iters: int = 2000
    pretrain_lr: float = 0.002
    spatial_stride: int = 2

    def __post_init__(self):
        if self.interpolation not in ("bicubic", "bilinear"):
            raise InvalidArgumentError(f"unknown interpolation {self.interpolation!r}")
        if self.depth < 2:
            raise InvalidArgumentError("ISG depth must be >= 2")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


@dataclass
class TrainConfig:
    iterations: int = 15000
    lr: float = 0.002
    decay: float = 0.97
    decay_every: int = 200
    eta: float = 1.0
    seed: int = 0
    spatial_stride: int = 2
    temporal_stride: int = 5
    checkpoint_every: int = 500
    max_recoveries: int = 10

    def __post_init__(self):
        if self.eta < 0:
            raise InvalidArgumentError("eta must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)


# ---------------------------------------------------------------------------


def interpolation_matrix(n_coarse: int, n_fine: int, stride: int, method: str = "bicubic") -> np.ndarray:
    """Matrix mapping coarse samples at fine indices ``0, s, 2s, ...`` to the fine grid."""
    if (n_fine - 1) != stride * (n_coarse - 1):
        raise InvalidArgumentError(
            f"coarse grid of {n_coarse} does not embed in fine grid of {n_fine} with stride {stride}")
    k = 3 if method == "bicubic" else 1
    if n_coarse <= k:
        k = 1
    xc = np.arange(n_coarse, dtype=np.float64) * stride
    spline = make_interp_spline(xc, np.eye(n_coarse), k=k)
    mat = spline(np.arange(n_fine, dtype=np.float64))
    # exact at the coarse nodes
    mat[::stride] = np.eye(n_coarse)
    return mat


def interpolate(lr_frame, fine_shape, stride, method="bicubic") -> np.ndarray:
    """``I(u~)``: tensor-product spline interpolation of a ``(n_c, h, w)`` frame."""
    lr_frame = np.asarray(lr_frame, dtype=np.float64)
    if lr_frame.ndim == 4:
        lr_frame = lr_frame[0]
    _, h, w = lr_frame.shape
    ay = interpolation_matrix(h, fine_shape[0], stride, method)
    ax = interpolation_matrix(w, fine_shape[1], stride, method)
    return np.einsum("yi,cij,xj->cyx", ay, lr_frame, ax)


_FILTER_OPS = ("id", "x", "y", "lap")


def filter_stencil(op: str, size: int, dx: float) -> np.ndarray:
    """Kernel of side ``size`` for a frozen filter operator."""
    if op == "id":
        k = stencils.identity(1).kernel
    elif op in ("x", "y"):
        order = (1, 0) if op == "x" else (0, 1)
        k = stencils.taylor_filter(order, 5 if size >= 5 else 3, dx).kernel
    elif op == "lap":
        k = stencils.laplacian9(dx).kernel
    else:
        raise InvalidArgumentError(f"unknown filter op {op!r}; choose from {_FILTER_OPS}")
    if k.shape[0] > size:
        raise InvalidArgumentError(f"filter op {op!r} needs kernel size >= {k.shape[0]}")
    pad = (size - k.shape[0]) // 2
    return np.pad(k, pad)


class PiBlockModel:
    """Parameters, trainability masks and fixed operators of the network.

    ``params`` maps names to arrays (block: ``K``, ``b``, ``f``, ``fb``,
    ``hw_raw``; generator: ``isg_W{i}``, ``isg_b{i}``). ``masks`` holds
    0/1 arrays; masked-out entries never change during training.
    The highway coefficient is ``exp(hw_raw)``.
    """

    def __init__(self, config: PiBlockConfig, isg: IsgConfig | None = None, seed: int = 0, init: bool = True):
        self.config = config
        self.isg = isg if isg is not None else IsgConfig()
        self.seed = seed
        self.params: dict = {}
        self.masks: dict = {}
        self.highway_kernel = stencils.laplacian5x5(config.dx).kernel
        if init:
            self._init_params(np.random.default_rng(seed))
        n = sum(p.size for p in self.params.values())
        if init and n != self.expected_parameter_count():
            raise AssertionError(f"parameter count {n} != closed form {self.expected_parameter_count()}")

    # -- shapes -----------------------------------------------------------
    def expected_parameter_count(self) -> int:
        c = self.config
        nin, ntot, k = c.n_components, c.total_channels, c.kmax
        count = c.n_layers * ntot * (nin * k * k + 1) + c.n_out * ntot + c.n_out
        if c.highway:
            count += c.n_out
        g = self.isg
        widths = [nin] + [g.channels] * (g.depth - 1) + [nin]
        for a, b in zip(widths[:-1], widths[1:]):
            count += b * a * g.kernel_size**2 + b
        return count

    def _init_params(self, rng):
        c = self.config
        nin, ntot, k, nl = c.n_components, c.total_channels, c.kmax, c.n_layers
        bound = 0.5 / np.sqrt(nin * k * k)
        K = rng.uniform(-bound, bound, (nl * ntot, nin, k, k))
        b = rng.uniform(-bound, bound, nl * ntot)
        kmask = np.zeros_like(K)
        for l, kl in enumerate(c.layer_kernel_sizes):
            lo = (k - kl) // 2
            kmask[l * ntot:(l + 1) * ntot, :, lo:lo + kl, lo:lo + kl] = 1.0
        bmask = np.ones_like(b)
        K *= kmask
        f = np.full((c.n_out, ntot), 1.0 / c.n_channels)
        fmask = np.ones_like(f)
        if c.separate_blocks:
            fmask[:] = 0.0
            for o in range(c.n_out):
                fmask[o, o * c.n_channels:(o + 1) * c.n_channels] = 1.0
            f *= fmask
        for spec in c.frozen_filters:
            row = self._filter_row(spec)
            comp = spec["component"]
            comp = COMPONENTS.index(comp) if isinstance(comp, str) else int(comp)
            K[row] = 0.0
            K[row, comp] = filter_stencil(spec["op"], k, c.dx)
            kmask[row] = 0.0
            b[row] = 0.0
            bmask[row] = 0.0
        self.params.update(K=K, b=b, f=f, fb=np.zeros(c.n_out))
        self.masks.update(K=kmask, b=bmask, f=fmask)
        if c.highway:
            init = np.broadcast_to(np.asarray(c.highway_init, dtype=float), (c.n_out,))
            if np.any(init <= 0):
                raise InvalidArgumentError("highway coefficients must be positive")
            self.params["hw_raw"] = np.log(init)
            self.masks["hw_raw"] = np.full(c.n_out, 0.0 if c.highway_mode == "frozen" else 1.0)
        g = self.isg
        widths = [nin] + [g.channels] * (g.depth - 1) + [nin]
        for i, (a, bo) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            bd = 0.5 / np.sqrt(a * g.kernel_size**2)
            if i == g.depth:
                bd *= 0.1
            self.params[f"isg_W{i}"] = rng.uniform(-bd, bd, (bo, a, g.kernel_size, g.kernel_size))
            self.params[f"isg_b{i}"] = rng.uniform(-bd, bd, bo)

    def _filter_row(self, spec) -> int:
        c = self.config
        layer, ch = int(spec["layer"]), int(spec["channel"])
        if "block" in spec:
            ch += int(spec["block"]) * c.n_channels
        if not (0 <= layer < c.n_layers and 0 <= ch < c.total_channels):
            raise InvalidArgumentError(f"frozen filter {spec} out of range")
        return layer * c.total_channels + ch

    # -- helpers ----------------------------------------------------------
    @property
    def block_names(self) -> list[str]:
        return [n for n in ("K", "b", "f", "fb", "hw_raw") if n in self.params]

    @property
    def isg_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("isg_")]

    def highway_coefficients(self) -> np.ndarray:
        if "hw_raw" not in self.params:
            return np.zeros(self.config.n_out)
        return np.exp(self.params["hw_raw"])

    def filters(self, layer: int, channel: int) -> np.ndarray:
        """``(n_components, k, k)`` filter of one parallel layer/channel."""
        return self.params["K"][layer * self.config.total_channels + channel]

    def biases(self, layer: int) -> np.ndarray:
        ntot = self.config.total_channels
        return self.params["b"][layer * ntot:(layer + 1) * ntot]

    def copy(self) -> "PiBlockModel":
        return copy.deepcopy(self)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def bind(self, ops=None, trainable=()):
        """Parameter values for an ops backend; names in ``trainable`` become tape leaves."""
        ops = ops if ops is not None else ArrayOps()
        bound = {}
        tape = getattr(ops, "tape", None)
        for name, val in self.params.items():
            if name == "hw_raw":
                continue
            if tape is not None and name in trainable:
                bound[name] = tape.leaf(val, trainable=True, name=name)
            else:
                bound[name] = val
        if "hw_raw" in self.params:
            hw = np.exp(self.params["hw_raw"])
            if tape is not None and "hw_raw" in trainable:
                bound["hw"] = tape.leaf(hw, trainable=True, name="hw")
            else:
                bound["hw"] = hw
        return bound

    # -- construction from terms -----------------------------------------
    @classmethod
    def from_system(cls, system, dx, n_layers=None, kernel_size=5, highway=False, grid=(16, 16), dt=1e-3,
                    isg: IsgConfig | None = None):
        """Hand-set block whose output equals ``system``'s right-hand side.

        Each term gets one channel; its factors (component identities and at
        most one derivative) occupy layers, remaining layers are the constant
        1 (zero kernel, unit bias). Own-component Laplacian terms with positive
        coefficients go to a frozen highway layer when ``highway`` is set.
        """
        from ..library import _DERIV_SPEC

        rows = system.terms
        n_out = len(rows)
        chans = []
        hw = np.zeros(n_out)
        for o, row in enumerate(rows):
            for t, coef in row:
                own_lap = t.a == 0 and t.b == 0 and t.deriv == ("lap_u", "lap_v")[o] if o < 2 else False
                if highway and own_lap and coef > 0 and hw[o] == 0:
                    hw[o] = coef
                    continue
                factors = [("id", 0)] * t.a + [("id", 1)] * t.b
                if t.deriv != "1":
                    comp, op = _DERIV_SPEC[t.deriv]
                    factors.append((op, comp))
                chans.append((o, coef, factors))
        need = max([len(f) for _, _, f in chans] + [1])
        n_layers = need if n_layers is None else n_layers
        if need > n_layers:
            raise InvalidArgumentError(f"system needs {need} layers, got {n_layers}")
        use_highway = highway and bool(np.any(hw > 0))
        cfg = PiBlockConfig(n_layers=n_layers, n_channels=max(1, len(chans)), kernel_size=kernel_size,
                            n_components=2, n_out=n_out, highway=use_highway, highway_mode="frozen",
                            highway_init=list(np.where(hw > 0, hw, 1.0)), grid=grid, dx=dx, dt=dt)
        model = cls(cfg, isg, seed=0)
        k = cfg.kmax
        K = np.zeros_like(model.params["K"])
        b = np.zeros_like(model.params["b"])
        f = np.zeros_like(model.params["f"])
        ntot = cfg.total_channels
        for ch, (o, coef, factors) in enumerate(chans):
            for l in range(n_layers):
                row = l * ntot + ch
                if l < len(factors):
                    op, comp = factors[l]
                    K[row, comp] = filter_stencil(op, k, dx)
                else:
                    b[row] = 1.0
            f[o, ch] = coef
        model.params.update(K=K, b=b, f=f, fb=np.zeros(n_out))
        if use_highway:
            model.params["hw_raw"] = np.log(np.where(hw > 0, hw, 1.0))
            # components without a Laplacian term get a zero-weight highway
            model.params["hw_raw"] = np.where(hw > 0, model.params["hw_raw"], -np.inf)
            model.masks["hw_raw"] = np.zeros(n_out)
        return model


# ---------------------------------------------------------------------------
# forward passes (backend generic)


def block_forward(ops, P, state, model: PiBlockModel):
    c = model.config
    ntot = c.total_channels
    z = ops.conv(state, P["K"], P["b"])
    prod = ops.sample(z, (slice(0, ntot),))
    for l in range(1, c.n_layers):
        prod = ops.mul(prod, ops.sample(z, (slice(l * ntot, (l + 1) * ntot),)))
    out = ops.combine(prod, P["f"], P["fb"])
    if c.highway:
        lap = ops.stencil(state, model.highway_kernel)
        out = ops.add(out, ops.scale(lap, P["hw"]))
    return out


def isg_block(ops, P, interp, model: PiBlockModel):
    """``I(u~) + residual``; the last hidden map enters as ``h + h*h``."""
    g = model.isg
    h = interp
    x = h
    for i in range(1, g.depth):
        x = ops.conv(x, P[f"isg_W{i}"], P[f"isg_b{i}"])
    x = ops.add(x, ops.mul(x, x))
    r = ops.conv(x, P[f"isg_W{g.depth}"], P[f"isg_b{g.depth}"])
    return ops.add(h, r)


def rollout_generic(ops, step_fn, init, n_steps: int, dt: float, keep=None):
    """Forward-Euler march. Returns the list of kept frames (all by default)."""
    frames = {0: init}
    x = init
    for k in range(1, n_steps + 1):
        x = ops.add(x, ops.scale(step_fn(x), dt))
        v = ops.value(x)
        if not np.all(np.isfinite(v)):
            raise NumericalBlowupError(f"non-finite state at rollout step {k}", step=k)
        if keep is None or k in keep:
            frames[k] = x
    return frames


def reconstruction_loss(ops, frames, measurements, isg_out, interp_init, eta, spatial_stride, temporal_stride):
    """Data misfit on the measurement grid plus ``eta`` times the IC regularizer.

    ``frames`` maps HR step index to state; measurement frame ``j`` is
    compared with HR step ``j * temporal_stride`` sampled every
    ``spatial_stride`` pixels. Returns ``(loss, data_term, ic_term)``.
    """
    meas = np.asarray(measurements, dtype=np.float64)
    n_frames = meas.shape[0]
    s = spatial_stride
    idx = (slice(None), slice(None, None, s), slice(None, None, s))
    data = None
    for j in range(n_frames):
        k = j * temporal_stride
        if k not in frames:
            raise InvalidArgumentError(f"no prediction for HR step {k} (measurement frame {j})")
        pred = ops.sample(frames[k], idx)
        if ops.value(pred).shape != meas[j].shape:
            raise InvalidArgumentError(
                f"prediction on measurement grid has shape {ops.value(pred).shape}, measurements {meas[j].shape}")
        term = ops.mse(pred, meas[j])
        data = term if data is None else ops.add(data, term)
    data = ops.scale(data, 1.0 / n_frames)
    ic = ops.mse(isg_out, interp_init)
    if eta == 0:
        return data, data, ic
    return ops.add(data, ops.scale(ic, eta)), data, ic


# ---------------------------------------------------------------------------
# public numpy entry points


def _state(x, c):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise InvalidArgumentError("expected a single time step")
        x = x[0]
    if x.ndim != 3 or x.shape[0] != c.n_components:
        raise InvalidArgumentError(f"state must be ({c.n_components}, H, W), got {x.shape}")
    return x


def pi_block_forward(model: PiBlockModel, state) -> np.ndarray:
    """``F(U)`` for one ``(n_c, H, W)`` state."""
    x = _state(state, model.config)
    return block_forward(ArrayOps(), model.bind(), x, model)


def isg_forward(model: PiBlockModel, lr_init) -> np.ndarray:
    """HR initial state ``(1, n_c, H, W)`` from the first coarse frame."""
    interp = model_interpolant(model, lr_init)
    return isg_block(ArrayOps(), model.bind(), interp, model)[None]


def model_interpolant(model: PiBlockModel, lr_init) -> np.ndarray:
    lr = np.asarray(lr_init, dtype=np.float64)
    if lr.ndim == 4:
        lr = lr[0]
    if lr.ndim != 3 or lr.shape[0] != model.config.n_components:
        raise InvalidArgumentError(f"coarse frame must be (n_c, h, w), got {lr.shape}")
    return interpolate(lr, model.config.grid, model.isg.spatial_stride, model.isg.interpolation)


def rollout(model: PiBlockModel, hr_init, n_steps: int | None = None, dt: float | None = None) -> np.ndarray:
    """March the block from ``hr_init``; returns ``(n_steps + 1, n_c, H, W)``."""
    c = model.config
    n_steps = c.n_steps if n_steps is None else n_steps
    dt = c.dt if dt is None else dt
    if n_steps < 1:
        raise InvalidArgumentError("n_steps must be >= 1")
    x0 = _state(hr_init, c)
    P = model.bind()
    ops = ArrayOps()
    frames = rollout_generic(ops, lambda x: block_forward(ops, P, x, model), x0, n_steps, dt)
    return np.stack([frames[k] for k in range(n_steps + 1)])


def reconstruct(model: PiBlockModel, measurements, n_steps: int | None = None) -> np.ndarray:
    """HR trajectory from the measurements' first frame via ISG and rollout."""
    u0 = isg_forward(model, np.asarray(measurements)[0])[0]
    return rollout(model, u0, n_steps)
