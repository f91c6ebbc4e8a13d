"""Acceptance criteria, one test per criterion.

Criteria 7, 8 and 10 run the desk-scale Burgers pipeline (33x33 HR grid,
17x17 LR measurements, 50 frames) and are marked slow; together they train
for about 9000 iterations.
"""

import csv
import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acceptance_log import verdict
from gradcheck import numeric_grad, rel_error
from planted import PLANTED, exhaustive_best, planted_problem
from pdediscover import pipeline as P
from pdediscover import stencils
from pdediscover.autodiff import Tape
from pdediscover.metrics import coefficient_vector, precision_recall, read_metrics_csv, relative_l2
from pdediscover.ops import ArrayOps, TapeOps
from pdediscover.percnn import IsgConfig, PiBlockConfig, PiBlockModel, interpret, pi_block_forward
from pdediscover.percnn.interpret import to_system
from pdediscover.percnn.model import block_forward
from pdediscover.simulate import (PdeSystem, SimConfig, generate_ground_truth, gray_scott, integrate,
                                  preset_configs, smooth_random_field)
from pdediscover.stridge import (ParetoPoint, SparseConfig, dense_residual, pareto_front, pareto_sweep, stridge,
                                 tolerance_grid, tolerance_search)

DESK = Path(__file__).resolve().parent.parent / "configs" / "burgers_desk.json"
BURGERS = {0: {"lap(u)": 0.005, "u*u_x": -1.0, "v*u_y": -1.0}, 1: {"lap(v)": 0.005, "u*v_x": -1.0, "v*v_y": -1.0}}


def _grid(n):
    x = np.arange(n) / n
    return np.meshgrid(x, x)


# -- 1 -------------------------------------------------------------------------------

def test_criterion_01_stencils():
    t0 = time.perf_counter()
    w = 2 * np.pi
    ratios = {}
    for order in [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]:
        errs = []
        for n in (32, 64):
            X, Y = _grid(n)
            f = np.sin(w * X + 0.3) * np.cos(w * Y - 0.1)
            exact = {(1, 0): w * np.cos(w * X + 0.3) * np.cos(w * Y - 0.1),
                     (0, 1): -w * np.sin(w * X + 0.3) * np.sin(w * Y - 0.1),
                     (2, 0): -w**2 * f, (0, 2): -w**2 * f,
                     (1, 1): -w**2 * np.cos(w * X + 0.3) * np.sin(w * Y - 0.1)}[order]
            out = stencils.taylor_filter(order, 3, 1.0 / n).apply(f[None])[0]
            errs.append(np.max(np.abs(out - exact)))
        ratios[order] = errs[0] / errs[1]
    n = 20
    X, Y = _grid(n)
    lap = stencils.laplacian9(1.0 / n).apply((X**2 + Y**2)[None])[0]
    lap_err = np.max(np.abs(lap[1:-1, 1:-1] - 4.0))
    elapsed = time.perf_counter() - t0
    ok = min(ratios.values()) >= 3.5 and lap_err < 1e-9 and elapsed < 1.0
    verdict(1, ok, f"min ratio {min(ratios.values()):.3f}, lap(x^2+y^2) err {lap_err:.1e}, {elapsed:.2f}s")


# -- 2 -------------------------------------------------------------------------------

def test_criterion_02_solver():
    t0 = time.perf_counter()
    n = 64
    X, Y = _grid(n)
    u0 = np.sin(2 * np.pi * X) * np.sin(2 * np.pi * Y)
    heat = PdeSystem([[("lap(u)", 0.01)], [("lap(v)", 0.01)]])
    traj = integrate(heat, np.stack([u0, u0]), 1.0 / n, 1e-4, 100)
    expect = np.exp(-8 * np.pi**2 * 0.01 * 0.01) * u0
    heat_err = max(np.linalg.norm(traj[-1, c] - expect) / np.linalg.norm(expect) for c in range(2))

    sim, _ = preset_configs("gray_scott")
    sim.grid = 49
    sim.seed = 1
    gs = generate_ground_truth(sim)
    bounded = bool(np.all(np.isfinite(gs))) and gs.min() > -0.5 and gs.max() < 1.5
    patterned = gs[-1, 1].std() > 0.01
    elapsed = time.perf_counter() - t0
    ok = heat_err < 1e-4 and gs.shape[0] == 801 and bounded and patterned and elapsed < 30
    verdict(2, ok, f"heat rel err {heat_err:.1e}, GS 800 steps bounded={bounded} "
                   f"v.std={gs[-1, 1].std():.3f}, {elapsed:.1f}s")


# -- 3 -------------------------------------------------------------------------------

def _fd_check(build, vals):
    def value():
        t = Tape()
        return float(build(t, *[t.leaf(v) for v in vals]).value)

    t = Tape()
    leaves = [t.leaf(v, trainable=True) for v in vals]
    grads = t.backward(build(t, *leaves))
    return max(rel_error(grads[l], numeric_grad(value, v)) for l, v in zip(leaves, vals))


def _primitive_errors(seed, n):
    rng = np.random.default_rng(seed)
    c = 2
    x = rng.normal(size=(c, n, n))
    y = rng.normal(size=(c, n, n))
    target = rng.normal(size=(c, n, n))
    head = lambda t, node: t.mse(node, target[: node.value.shape[0], : node.value.shape[1], : node.value.shape[2]])
    idx = (slice(None), slice(None, None, 2), slice(1, None, 2))
    return {
        "conv2d": _fd_check(lambda t, a, k, b: head(t, t.conv2d(a, k, b)), [x, rng.normal(size=(c, c, 3, 3)),
                                                                            rng.normal(size=c)]),
        "mul": _fd_check(lambda t, a, b: head(t, t.mul(a, b)), [x, y]),
        "add": _fd_check(lambda t, a, b: head(t, t.add(a, b)), [x, y]),
        "scale": _fd_check(lambda t, a, s: head(t, t.scale(a, s)), [x, rng.normal(size=c)]),
        "combine": _fd_check(lambda t, a, m, b: head(t, t.combine(a, m, b)), [x, rng.normal(size=(c, c)),
                                                                              rng.normal(size=c)]),
        "sample": _fd_check(lambda t, a: t.mse(t.sample(a, idx), target[idx]), [x]),
        "mse": _fd_check(lambda t, a, b: t.mse(a, b), [x, y]),
    }


def _block_error(seed, n):
    cfg = PiBlockConfig(n_layers=3, n_channels=3, kernel_size=3, highway=True, grid=(n, n), dx=1 / n)
    m = PiBlockModel(cfg, IsgConfig(depth=2, channels=2, pretrain_iters=0), seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(size=(2, n, n))
    target = rng.normal(size=(2, n, n))
    names = ("K", "b", "f", "fb", "hw_raw")

    def value():
        return ArrayOps().mse(block_forward(ArrayOps(), m.bind(), x, m), target)

    tape = Tape()
    ops = TapeOps(tape)
    bound = m.bind(ops, trainable=set(names))
    grads = tape.backward(ops.mse(block_forward(ops, bound, x, m), target))
    worst = 0.0
    for name in names:
        key = "hw" if name == "hw_raw" else name
        g = grads[bound[key]] * (bound[key].value if name == "hw_raw" else 1.0)
        worst = max(worst, rel_error(g, numeric_grad(value, m.params[name])))
    return worst


def test_criterion_03_autodiff():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_prim = {}
    worst_block = 0.0
    for trial in range(3):
        n = int(rng.integers(8, 17))
        for k, v in _primitive_errors(trial, n).items():
            worst_prim[k] = max(worst_prim.get(k, 0.0), v)
        worst_block = max(worst_block, _block_error(trial, n))
    elapsed = time.perf_counter() - t0
    worst = max(max(worst_prim.values()), worst_block)
    ok = len(worst_prim) == 7 and worst < 1e-5 and elapsed < 30
    verdict(3, ok, f"max rel err primitives {max(worst_prim.values()):.1e}, 3-layer block {worst_block:.1e}, "
                   f"{elapsed:.1f}s")


# -- 4 -------------------------------------------------------------------------------

def test_criterion_04_expressiveness():
    dx = 1 / 16
    x = smooth_random_field(16, np.random.default_rng(4), 2.0)
    u, v = x
    ops = stencils.operator_stencils(dx)
    direct = {"u*u_x": u * ops["x"].apply(u[None])[0], "u^2*v": u * u * v,
              "u*lap(u)": u * ops["lap"].apply(u[None])[0]}
    fwd_err, coef_err, sets_ok = 0.0, 0.0, True
    for name, want in direct.items():
        system = PdeSystem([[(name, 1.0)], [(name, -0.5)]])
        m = PiBlockModel.from_system(system, dx, n_layers=3, grid=(16, 16),
                                     isg=IsgConfig(depth=2, channels=2, pretrain_iters=0))
        out = pi_block_forward(m, x)
        fwd_err = max(fwd_err, np.max(np.abs(out[0] - want)), np.max(np.abs(out[1] + 0.5 * want)))
        got = to_system(interpret(m, drop=0.0))
        sets_ok &= got.support() == system.support()
        for row, c in zip(got.terms, (1.0, -0.5)):
            coef_err = max(coef_err, *(abs(val - c) for _, val in row))
    # a full system too
    gs = gray_scott()
    got = to_system(interpret(PiBlockModel.from_system(gs, 0.05, grid=(12, 12),
                                                        isg=IsgConfig(depth=2, channels=2)), drop=0.0))
    sets_ok &= got.support() == gs.support()
    want = {(i, t): c for i, row in enumerate(gs.terms) for t, c in row}
    coef_err = max(coef_err, *(abs(c - want[(i, t)]) for i, row in enumerate(got.terms) for t, c in row))
    ok = fwd_err < 1e-10 and coef_err < 1e-10 and sets_ok
    verdict(4, ok, f"forward err {fwd_err:.1e}, interpret coef err {coef_err:.1e}, term sets exact={sets_ok}")


# -- 5 -------------------------------------------------------------------------------

def test_criterion_05_stridge_oracle():
    t0 = time.perf_counter()
    theta, y, xi = planted_problem(0, noise=1e-6)
    assert theta.shape[1] == 70 and np.count_nonzero(xi) == 3
    cfg = SparseConfig()
    sol = tolerance_search(theta, y, cfg)
    gamma = cfg.kappa * dense_residual(theta, y)
    obj, oracle = exhaustive_best(theta, y, 3, gamma)
    found = sol.support == PLANTED and oracle == PLANTED and sol.objective == pytest.approx(obj, rel=1e-6)

    # protected terms survive every tolerance and kappa
    protected_ok = True
    for prot in [(5,), (0, 69), (17, 33)]:
        pc = SparseConfig(protected=prot)
        for tol in tolerance_grid(theta, y, pc):
            protected_ok &= set(prot) <= set(stridge(theta, y, pc, tol).support)
        for kappa in (1e-2, 1.0, 20.0):
            protected_ok &= set(prot) <= set(tolerance_search(theta, y, SparseConfig(kappa=kappa,
                                                                                    protected=prot)).support)
        for p in pareto_sweep(theta, y, cfg=pc):
            protected_ok &= set(prot) <= set(p.support)
    elapsed = time.perf_counter() - t0
    ok = found and protected_ok and elapsed < 10
    verdict(5, ok, f"support {sol.support} (oracle {oracle}), protected survive={protected_ok}, {elapsed:.1f}s")


# -- 6 -------------------------------------------------------------------------------

def test_criterion_06_exact_data_discovery():
    t0 = time.perf_counter()
    cfg = P.resolve_config(P.load_config(DESK))
    sim = SimConfig.from_dict(cfg["sim"])
    truth = generate_ground_truth(sim)
    system, _ = P.discover_system(truth, cfg, sim.dx, sim.dt)
    got = [{t.name: c for t, c in row} for row in system.terms]
    support_ok = all(set(got[i]) == set(BURGERS[i]) for i in range(2))
    worst = max((abs(got[i].get(n, 0.0) - c) / abs(c) for i in range(2) for n, c in BURGERS[i].items()))
    elapsed = time.perf_counter() - t0
    ok = support_ok and worst < 0.02 and elapsed < 60
    verdict(6, ok, f"support exact={support_ok}, worst coef rel err {100 * worst:.2f}%, {elapsed:.1f}s")


# -- desk-scale runs shared by 7, 8 and 10 -------------------------------------------------

def _desk_config(seed=0, noise=0.0, iterations=1000, highway=True):
    cfg = P.load_config(DESK)
    cfg["seed"] = seed
    cfg["measure"]["noise_level"] = noise
    cfg["reconstruct"]["train"]["iterations"] = iterations
    cfg["reconstruct"]["block"]["highway"] = highway
    cfg["name"] = f"desk-s{seed}-n{noise}-i{iterations}-hw{int(highway)}"
    return P.resolve_config(cfg)


class DeskRuns:
    def __init__(self, root):
        self.root = Path(root)
        self.cache = {}

    def get(self, stages=None, **kw):
        key = (tuple(sorted(kw.items())), stages)
        if key not in self.cache:
            cfg = _desk_config(**kw)
            out = self.root / (cfg["name"] + ("" if stages is None else "-partial"))
            t0 = time.perf_counter()
            P.run_pipeline(cfg, out, stages)
            self.cache[key] = (out, time.perf_counter() - t0)
        return self.cache[key]


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return DeskRuns(tmp_path_factory.mktemp("desk"))


def _metrics(out):
    return {r["case"].split("/")[-1]: r for r in read_metrics_csv(out / "metrics.csv")}


def _final_loss(out):
    rows = list(csv.DictReader((out / "loss_history.csv").open()))
    return float(rows[-1]["loss"])


@pytest.mark.slow
def test_criterion_07_end_to_end_desk(desk):
    lines, ok = [], True
    for noise, iters in ((0.0, 2000), (0.05, 1000)):
        out, secs = desk.get(seed=0, noise=noise, iterations=iters)
        m = _metrics(out)["burgers"]
        good = m["precision"] == 1.0 and m["recall"] == 1.0 and m["rel_l2"] < 0.1 and secs < 15 * 60
        ok &= good
        lines.append(f"{int(100 * noise)}% noise ({iters} it): P={m['precision']:.2f} R={m['recall']:.2f} "
                     f"rel_l2={100 * m['rel_l2']:.2f}% {secs:.0f}s")
    verdict(7, ok, "; ".join(lines))


@pytest.mark.slow
def test_criterion_08a_highway_ablation(desk):
    with_hw, _ = desk.get(seed=0, noise=0.0, iterations=2000, highway=True)
    without, _ = desk.get(seed=0, noise=0.0, iterations=2000, highway=False, stages=("simulate", "reconstruct"))
    a, b = _final_loss(with_hw), _final_loss(without)
    verdict(8, a <= b, f"(highway) loss after 2000 it: with {a:.3e} <= without {b:.3e}")


@pytest.mark.slow
def test_criterion_08b_finetune_ablation(desk):
    pairs = []
    for seed in (0, 1, 2):
        out, _ = desk.get(seed=seed, noise=0.05, iterations=1000)
        m = _metrics(out)
        pairs.append((m["before-finetune"]["rel_l2"], m["burgers"]["rel_l2"]))
    never_worse = all(after <= 1.05 * before for before, after in pairs)
    lower = sum(after < before for before, after in pairs)
    detail = ", ".join(f"{100 * b:.2f}%->{100 * a:.2f}%" for b, a in pairs)
    verdict(8, never_worse and lower >= 2, f"(fine-tune) rel_l2 before->after per seed: {detail}; "
                                            f"strictly lower in {lower}/3")


# -- 9 -------------------------------------------------------------------------------

_points = st.lists(st.tuples(st.integers(0, 10), st.floats(0, 10)), min_size=1, max_size=30)


@settings(max_examples=200)
@given(_points)
def _pareto_invariant(raw):
    pts = [ParetoPoint(float(i), l0, err, err + l0) for i, (l0, err) in enumerate(raw)]
    front = pareto_front(pts)
    assert front
    for p in front:
        assert not any(q.error <= p.error and q.l0 <= p.l0 and (q.error < p.error or q.l0 < p.l0) for q in pts)
    for a, b in zip(front, front[1:]):
        assert a.l0 > b.l0 and a.error < b.error
    for q in pts:
        assert any(p.l0 <= q.l0 and p.error <= q.error for p in front)


def test_criterion_09_metrics():
    x = np.array([0.005, -1.0, 0.0, -1.0])
    checks = [
        relative_l2(x, x) == 0.0,
        precision_recall(x, x) == (1.0, 1.0),
        relative_l2(np.zeros(4), np.array([1.0, 0, -2.0, 0])) == 1.0,
        precision_recall(np.array([1.1, -0.9, 0.004, 0.3, 0.0]), np.array([1.0, -1.0, 0.005, 0.0, 0.0])) == (0.75, 1.0),
    ]
    ident = PdeSystem([[("lap(u)", 2e-5), ("u*v^2", -1.0), ("1", 0.04), ("u^2", 0.01)],
                       [("lap(v)", 5e-6), ("u*v^2", 1.0), ("v", -0.1)]])
    p, r = precision_recall(coefficient_vector(ident), coefficient_vector(gray_scott()))
    checks.append(round(100 * p, 1) == 85.7 and round(100 * r, 1) == 85.7)
    _pareto_invariant()
    verdict(9, all(checks), f"{sum(checks)}/{len(checks)} examples exact; Pareto dominance invariant holds")


# -- 10 ------------------------------------------------------------------------------

def _artifacts(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir()) if p.suffix in (".pft", ".csv")}


@pytest.mark.slow
def test_criterion_10_stage_rerun_from_manifest(desk, tmp_path):
    from pdediscover.cli import main

    first, _ = desk.get(seed=0, noise=0.05, iterations=1000)
    ref = _artifacts(first)
    manifest = json.loads((first / "manifest.json").read_text())
    mismatched = []
    for stage in P.STAGES:
        again = tmp_path / stage
        shutil.copytree(first, again)
        produced = manifest["stages"][stage]["files"]
        for f in produced:
            (again / f).unlink()
        assert main([stage, "--config", str(first / "manifest.json"), "--out", str(again)]) == 0
        for f in produced:
            if f in ref and (again / f).read_bytes() != ref[f]:
                mismatched.append(f"{stage}:{f}")
    checked = sum(1 for s in P.STAGES for f in manifest["stages"][s]["files"] if f in ref)
    verdict(10, not mismatched, f"{checked} PFT1/CSV artifacts across {len(P.STAGES)} stages byte-identical"
                                + (f"; mismatched {mismatched}" if mismatched else ""))
