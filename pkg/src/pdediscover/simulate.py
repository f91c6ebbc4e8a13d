"""Ground-truth trajectories and synthetic low-resolution measurements.

Right-hand sides are finite-difference discretizations on periodic grids
(``x_i = i * L / n``): nine-point Laplacian, fourth-order central first
derivatives, classical RK4 in time.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import stencils
from .errors import InvalidArgumentError, NumericalBlowupError
from .field import as_field, read_pft
from .library import COMPONENTS, TermDescriptor, TermEvaluator, term
from .ops import ArrayOps


@dataclass
class PdeSystem:
    """Right-hand side as ``(term, coefficient)`` lists, one list per component."""

    terms: list
    name: str = "custom"

    def __post_init__(self):
        fixed = []
        for comp_terms in self.terms:
            row = []
            seen = set()
            for t, c in comp_terms:
                t = term(t) if isinstance(t, str) else t
                if not isinstance(t, TermDescriptor):
                    raise InvalidArgumentError(f"bad term {t!r}")
                if t in seen:
                    raise InvalidArgumentError(f"duplicate term {t.name!r}")
                seen.add(t)
                row.append((t, float(c)))
            fixed.append(row)
        self.terms = fixed

    @property
    def n_components(self) -> int:
        return len(self.terms)

    def coefficients(self) -> list[list[float]]:
        return [[c for _, c in row] for row in self.terms]

    def with_coefficients(self, coeffs) -> "PdeSystem":
        return PdeSystem([[(t, c) for (t, _), c in zip(row, crow)]
                          for row, crow in zip(self.terms, coeffs)], self.name)

    def support(self) -> list[set]:
        return [{t for t, _ in row} for row in self.terms]

    def to_json(self) -> list:
        return [{"component": COMPONENTS[i], "term": t.name, "coefficient": c}
                for i, row in enumerate(self.terms) for t, c in row]

    @classmethod
    def from_json(cls, items, name="custom") -> "PdeSystem":
        rows = [[], []]
        for item in items:
            rows[COMPONENTS.index(item["component"])].append((item["term"], item["coefficient"]))
        return cls(rows, name)

    def to_text(self, digits: int = 5) -> str:
        lines = []
        for i, row in enumerate(self.terms):
            rhs = ""
            for t, c in row:
                mag = f"{abs(c):.{digits}g}"
                body = mag if t.name == "1" else f"{mag}*{t.name}"
                if not rhs:
                    rhs = f"-{body}" if c < 0 else body
                else:
                    rhs += f" - {body}" if c < 0 else f" + {body}"
            lines.append(f"{COMPONENTS[i]}_t = {rhs or '0'}")
        return "\n".join(lines)


def burgers(nu: float = 0.005) -> PdeSystem:
    """``u_t = nu lap(u) - u u_x - v u_y`` and likewise for ``v``."""
    return PdeSystem([
        [("lap(u)", nu), ("u*u_x", -1.0), ("v*u_y", -1.0)],
        [("lap(v)", nu), ("u*v_x", -1.0), ("v*v_y", -1.0)],
    ], "burgers")


def lambda_omega(beta: float = 1.0, mu_u: float = 0.1, mu_v: float = 0.1) -> PdeSystem:
    """Lambda-omega reaction-diffusion, reaction terms expanded into monomials."""
    return PdeSystem([
        [("lap(u)", mu_u), ("u", 1.0), ("u^3", -1.0), ("u*v^2", -1.0), ("u^2*v", beta), ("v^3", beta)],
        [("lap(v)", mu_v), ("v", 1.0), ("u^2*v", -1.0), ("v^3", -1.0), ("u^3", -beta), ("u*v^2", -beta)],
    ], "lambda_omega")


def gray_scott(mu_u: float = 2e-5, mu_v: float = 5e-6, kill: float = 0.06, feed: float = 0.04) -> PdeSystem:
    """Gray-Scott: ``u_t = mu_u lap(u) - u v^2 + f (1 - u)``, ``v_t = mu_v lap(v) + u v^2 - (f + k) v``."""
    return PdeSystem([
        [("lap(u)", mu_u), ("u*v^2", -1.0), ("1", feed), ("u", -feed)],
        [("lap(v)", mu_v), ("u*v^2", 1.0), ("v", -(feed + kill))],
    ], "gray_scott")


PRESETS = {"burgers": burgers, "lambda_omega": lambda_omega, "gray_scott": gray_scott}


def preset_system(name: str, params: dict | None = None) -> PdeSystem:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(**(params or {}))


# ---------------------------------------------------------------------------
# right-hand side and time stepping


def evaluate_rhs(comps, system: PdeSystem, dx: float, ops=None, ops_stencils=None, coeffs=None):
    """Per-component right-hand side on arrays or tape nodes.

    ``coeffs`` overrides the system's coefficients with per-term values (used
    by the fine-tuner to pass trainable nodes). The summation order is the
    order of ``system.terms``.
    """
    ops = ops if ops is not None else ArrayOps()
    ev = TermEvaluator(comps, dx, ops, ops_stencils)
    out = []
    for i, row in enumerate(system.terms):
        acc = None
        for j, (t, c) in enumerate(row):
            coef = c if coeffs is None else coeffs[i][j]
            val = ops.scale(ev(t), coef)
            acc = val if acc is None else ops.add(acc, val)
        if acc is None:
            acc = ops.const(np.zeros_like(ops.value(comps[i])))
        out.append(acc)
    return out


def _single_step(state) -> np.ndarray:
    x = np.asarray(state, dtype=np.float64)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise InvalidArgumentError("expected a single time step")
        x = x[0]
    if x.ndim != 3:
        raise InvalidArgumentError(f"expected state of shape (n_c, h, w), got {x.shape}")
    return x


def rhs_eval(system: PdeSystem, state, dx: float, step: int | None = None) -> np.ndarray:
    """Right-hand side ``F(u)`` for one state ``(n_c, h, w)`` (or ``(1, n_c, h, w)``)."""
    x = _single_step(state)
    if x.shape[0] != system.n_components:
        raise InvalidArgumentError(f"state has {x.shape[0]} components, system has {system.n_components}")
    if not np.all(np.isfinite(x)):
        raise NumericalBlowupError("non-finite state", step=step)
    comps = [x[i] for i in range(x.shape[0])]
    out = np.stack(evaluate_rhs(comps, system, dx))
    if not np.all(np.isfinite(out)):
        raise NumericalBlowupError(f"non-finite right-hand side at step {step}", step=step)
    return out.reshape(np.shape(state))


def euler_step(system, state, dt, dx, step=None):
    x = np.asarray(state, dtype=np.float64)
    return x + dt * rhs_eval(system, x, dx, step)


def rk4_step(system, state, dt, dx, step=None):
    """One classical Runge-Kutta step."""
    y = np.asarray(state, dtype=np.float64)
    k1 = rhs_eval(system, y, dx, step)
    k2 = rhs_eval(system, y + 0.5 * dt * k1, dx, step)
    k3 = rhs_eval(system, y + 0.5 * dt * k2, dx, step)
    k4 = rhs_eval(system, y + dt * k3, dx, step)
    out = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NumericalBlowupError(f"non-finite state after step {step}", step=step)
    return out


def integrate(system, state0, dx, dt, n_steps, integrator="rk4") -> np.ndarray:
    """Trajectory ``(n_steps + 1, n_c, h, w)`` starting from ``state0``."""
    stepper = {"rk4": rk4_step, "euler": euler_step}.get(integrator)
    if stepper is None:
        raise InvalidArgumentError(f"unknown integrator {integrator!r}")
    x = _single_step(state0)
    out = np.empty((n_steps + 1,) + x.shape)
    out[0] = x
    for k in range(n_steps):
        out[k + 1] = stepper(system, out[k], dt, dx, step=k + 1)
        if not np.all(np.isfinite(out[k + 1])):
            raise NumericalBlowupError(f"non-finite state at step {k + 1}", step=k + 1)
    return out


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SimConfig:
    """Simulation settings; ``grid`` points per side on a periodic square of side ``length``."""

    preset: str = "burgers"
    params: dict = field(default_factory=dict)
    grid: int = 101
    length: float = 1.0
    dt: float = 2.5e-4
    n_steps: int = 200
    seed: int = 0
    ic: dict = field(default_factory=lambda: {"type": "random", "cutoff": 2.0, "amplitude": 1.0})
    integrator: str = "rk4"
    stability_bound: float = 0.5

    @property
    def dx(self) -> float:
        return self.length / self.grid

    def system(self) -> PdeSystem:
        return preset_system(self.preset, self.params)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown sim keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class MeasurementConfig:
    """Strided subsampling plus Gaussian noise.

    ``noise_level`` multiplies each component's population standard
    deviation over the whole trajectory. ``n_frames`` defaults to
    ``(n_t - 1) // temporal_stride``, i.e. the final truth frame is dropped.
    """

    spatial_stride: int = 2
    temporal_stride: int = 5
    noise_level: float = 0.0
    seed: int = 0
    n_frames: int | None = None

    def __post_init__(self):
        if self.spatial_stride < 1 or self.temporal_stride < 1:
            raise InvalidArgumentError("strides must be >= 1")
        if self.noise_level < 0:
            raise InvalidArgumentError("noise level must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MeasurementConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown measure keys {sorted(unknown)}")
        return cls(**d)


PRESET_DEFAULTS = {
    "burgers": dict(sim=dict(preset="burgers", params={"nu": 0.005}, grid=101, length=1.0,
                             dt=2.5e-4, n_steps=200,
                             ic={"type": "random", "cutoff": 2.0, "amplitude": 1.0}),
                    measure=dict(spatial_stride=2, temporal_stride=5)),
    "lambda_omega": dict(sim=dict(preset="lambda_omega", params={"beta": 1.0, "mu_u": 0.1, "mu_v": 0.1},
                                  grid=101, length=20.0, dt=1.25e-2, n_steps=200,
                                  ic={"type": "random", "cutoff": 2.0, "amplitude": 1.0}),
                         measure=dict(spatial_stride=2, temporal_stride=5)),
    "gray_scott": dict(sim=dict(preset="gray_scott",
                                params={"mu_u": 2e-5, "mu_v": 5e-6, "kill": 0.06, "feed": 0.04},
                                grid=101, length=1.0, dt=0.5, n_steps=800,
                                ic={"type": "squares", "count": 12, "size": 0.08, "noise": 0.01}),
                       measure=dict(spatial_stride=4, temporal_stride=5)),
}


def preset_configs(preset: str) -> tuple[SimConfig, MeasurementConfig]:
    if preset not in PRESET_DEFAULTS:
        raise InvalidArgumentError(f"unknown preset {preset!r}")
    d = PRESET_DEFAULTS[preset]
    return SimConfig(**d["sim"]), MeasurementConfig(**d["measure"])


def check_stability(system: PdeSystem, dt: float, dx: float, bound: float) -> float:
    """Warn when ``dt * max|diffusion coefficient| / dx^2`` exceeds ``bound``."""
    diff = [abs(c) for row in system.terms for t, c in row if t.deriv in ("lap_u", "lap_v")]
    number = dt * max(diff, default=0.0) / dx**2
    if number > bound:
        warnings.warn(f"diffusion number {number:.3g} exceeds stability bound {bound}", RuntimeWarning)
    return number


# ---------------------------------------------------------------------------
# initial conditions


def smooth_random_field(n: int, rng, cutoff: float, n_components: int = 2) -> np.ndarray:
    """Periodic white noise low-passed by a Gaussian in wavenumber space.

    ``cutoff`` is the Gaussian width in integer wavenumbers. Each component
    is shifted to zero mean and scaled to unit max-abs.
    """
    noise = rng.standard_normal((n_components, n, n))
    k = np.fft.fftfreq(n, d=1.0 / n)
    kk = k[:, None] ** 2 + k[None, :] ** 2
    filt = np.exp(-0.5 * kk / cutoff**2)
    out = np.real(np.fft.ifft2(np.fft.fft2(noise) * filt))
    out -= out.mean(axis=(1, 2), keepdims=True)
    out /= np.max(np.abs(out), axis=(1, 2), keepdims=True)
    return out


def initial_condition(cfg: SimConfig) -> np.ndarray:
    ic = dict(cfg.ic)
    kind = ic.pop("type", "random")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.grid
    if kind == "random":
        amp = np.broadcast_to(np.asarray(ic.get("amplitude", 1.0), dtype=float), (2,))
        off = np.broadcast_to(np.asarray(ic.get("offset", 0.0), dtype=float), (2,))
        f = smooth_random_field(n, rng, float(ic.get("cutoff", 2.0)))
        return f * amp[:, None, None] + off[:, None, None]
    if kind == "squares":
        # Gray-Scott seeding: u=1, v=0 with perturbed squares at random positions
        u = np.ones((n, n))
        v = np.zeros((n, n))
        side = max(1, int(round(float(ic.get("size", 0.1)) * n)))
        for _ in range(int(ic.get("count", 1))):
            y0, x0 = rng.integers(0, n, size=2)
            ys = (y0 + np.arange(side)) % n
            xs = (x0 + np.arange(side)) % n
            u[np.ix_(ys, xs)] = 0.5
            v[np.ix_(ys, xs)] = 0.25
        amp = float(ic.get("noise", 0.01))
        u += amp * rng.standard_normal((n, n))
        v += amp * rng.standard_normal((n, n))
        return np.stack([u, v])
    if kind == "file":
        data = read_pft(ic["path"])
        return data[int(ic.get("frame", 0))]
    if kind == "array":
        return np.asarray(ic["data"], dtype=np.float64)
    raise InvalidArgumentError(f"unknown initial condition type {kind!r}")


def generate_ground_truth(config: SimConfig) -> np.ndarray:
    """Integrate the configured preset; returns ``(n_steps + 1, 2, grid, grid)``."""
    system = config.system()
    check_stability(system, config.dt, config.dx, config.stability_bound)
    u0 = initial_condition(config)
    if u0.shape != (system.n_components, config.grid, config.grid):
        raise InvalidArgumentError(f"initial condition has shape {u0.shape}")
    return integrate(system, u0, config.dx, config.dt, config.n_steps, config.integrator)


def measurement_indices(n_t: int, h: int, w: int, mc: MeasurementConfig):
    """Time, row and column indices of the measurement grid."""
    s, st = mc.spatial_stride, mc.temporal_stride
    if (h - 1) % s or (w - 1) % s:
        raise InvalidArgumentError(f"spatial stride {s} does not divide grid {h}x{w} as (dim - 1) multiples")
    n_frames = mc.n_frames if mc.n_frames is not None else (n_t - 1) // st
    if n_frames < 1 or (n_frames - 1) * st > n_t - 1:
        raise InvalidArgumentError(f"cannot take {n_frames} frames with stride {st} from {n_t} snapshots")
    return np.arange(n_frames) * st, np.arange(0, h, s), np.arange(0, w, s)


def synthesize_measurements(truth, mc: MeasurementConfig) -> np.ndarray:
    """Add Gaussian noise at full resolution, then subsample in space and time."""
    truth = as_field(truth, name="truth")
    ti, yi, xi = measurement_indices(truth.shape[0], truth.shape[2], truth.shape[3], mc)
    noisy = truth
    if mc.noise_level > 0:
        rng = np.random.default_rng(mc.seed)
        std = truth.std(axis=(0, 2, 3))
        noise = rng.standard_normal(truth.shape)
        noisy = truth + mc.noise_level * std[None, :, None, None] * noise
    return np.ascontiguousarray(noisy[ti][:, :, yi][:, :, :, xi])
