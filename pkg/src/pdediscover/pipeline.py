"""Stage orchestration: simulate, reconstruct, discover, finetune, evaluate.

Every stage reads its inputs from the run directory, writes its artifacts
there, and records file hashes in ``manifest.json`` together with the fully
resolved configuration and per-stage seeds. Rerunning a stage with the
manifest's configuration reproduces its artifacts byte for byte.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InvalidArgumentError, StageError
from .field import read_pft, write_pft
from .finetune import FinetuneConfig, build_physics_model, finetune
from .library import COMPONENTS, build_library, default_terms, term, term_index, subsample_rows
from .metrics import evaluate_system, write_metrics_csv
from .percnn import (IsgConfig, PiBlockConfig, PiBlockModel, TrainConfig, isg_forward, load_checkpoint,
                     reconstruct, save_checkpoint, train)
from .percnn.training import HISTORY_COLUMNS
from .simulate import MeasurementConfig, PdeSystem, SimConfig, generate_ground_truth, synthesize_measurements
from .stridge import SparseConfig, pareto_sweep, tolerance_search, write_pareto_csv

log = logging.getLogger(__name__)

STAGES = ("simulate", "reconstruct", "discover", "finetune", "evaluate")
OUTPUT_ENV = "PDEDISCOVER_OUTPUT"

DEFAULT_CONFIG = {
    "name": "run",
    "seed": 0,
    "output": None,
    "cycles": 1,
    "sim": {},
    "measure": {},
    "reconstruct": {"block": {}, "isg": {}, "train": {}},
    "discover": {"fraction": 0.1, "sparse": {}, "protected": {"u": [], "v": []}, "terms": None,
                 "pareto": True, "kappas": None},
    "finetune": {"iterations": 5000, "lr": 0.001},
    "evaluate": {"case": None, "truth": None},
    "reference": {},
}


# ---------------------------------------------------------------------------
# configuration


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def stage_seed(seed: int, stage: str) -> int:
    """Deterministic per-stage seed from the global seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def load_config(path) -> dict:
    """Read a pipeline config; a run manifest is accepted and its config reused."""
    doc = json.loads(Path(path).read_text())
    if "resolved_config" in doc:
        return doc["resolved_config"]
    return doc


def resolve_config(cfg: dict) -> dict:
    """Fill defaults and derived values; the result is what the manifest stores."""
    cfg = _merge(DEFAULT_CONFIG, cfg)
    unknown = set(cfg) - set(DEFAULT_CONFIG)
    if unknown:
        raise InvalidArgumentError(f"unknown config sections {sorted(unknown)}")
    seed = int(cfg["seed"])
    sim = dict(cfg["sim"])
    sim.setdefault("seed", stage_seed(seed, "simulate"))
    sim = SimConfig.from_dict(sim).to_dict()
    meas = dict(cfg["measure"])
    meas.setdefault("seed", stage_seed(seed, "measure"))
    meas = MeasurementConfig.from_dict(meas).to_dict()
    rec = cfg["reconstruct"]
    unknown = set(rec) - {"block", "isg", "train", "seed"}
    if unknown:
        raise InvalidArgumentError(f"unknown reconstruct keys {sorted(unknown)}")
    rec_seed = int(rec.get("seed", stage_seed(seed, "reconstruct")))
    train = dict(rec.get("train", {}))
    train.setdefault("spatial_stride", meas["spatial_stride"])
    train.setdefault("temporal_stride", meas["temporal_stride"])
    train.setdefault("seed", rec_seed)
    train = TrainConfig.from_dict(train).to_dict()
    isg = dict(rec.get("isg", {}))
    isg.setdefault("spatial_stride", train["spatial_stride"])
    isg = IsgConfig.from_dict(isg).to_dict()
    block = dict(rec.get("block", {}))
    n_grid = sim["grid"]
    block.setdefault("grid", [n_grid, n_grid])
    block.setdefault("dx", sim["length"] / n_grid)
    block.setdefault("dt", sim["dt"])
    n_frames = meas["n_frames"] if meas["n_frames"] is not None else sim["n_steps"] // meas["temporal_stride"]
    block.setdefault("n_steps", train["temporal_stride"] * n_frames)
    block = PiBlockConfig.from_dict(block).to_dict()
    cfg["sim"], cfg["measure"] = sim, meas
    cfg["reconstruct"] = {"block": block, "isg": isg, "train": train, "seed": rec_seed}
    disc = cfg["discover"]
    disc.setdefault("seed", stage_seed(seed, "discover"))
    SparseConfig(**{k: v for k, v in disc["sparse"].items() if k != "protected"})
    for comp in disc["protected"]:
        if comp not in COMPONENTS:
            raise InvalidArgumentError(f"unknown component {comp!r} in protected terms")
        for name in disc["protected"][comp]:
            term(name)
    cfg["finetune"] = FinetuneConfig.from_dict(cfg["finetune"]).to_dict()
    if cfg["evaluate"].get("case") is None:
        cfg["evaluate"]["case"] = sim["preset"]
    if int(cfg["cycles"]) < 1:
        raise InvalidArgumentError("cycles must be >= 1")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def output_dir(cfg: dict, override=None) -> Path:
    if override is not None:
        return Path(override)
    if cfg.get("output"):
        return Path(cfg["output"])
    root = os.environ.get(OUTPUT_ENV, "runs")
    return Path(root) / cfg.get("name", "run")


# ---------------------------------------------------------------------------
# manifest


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """A run directory with its manifest."""

    def __init__(self, cfg: dict, out):
        self.cfg = cfg
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.dir / "manifest.json"
        manifest = {}
        if self.manifest_path.exists():
            manifest = json.loads(self.manifest_path.read_text())
            if manifest.get("config_hash") != config_hash(cfg):
                manifest = {}
        self.manifest = manifest or {"stages": {}}
        self.manifest.update({
            "package_version": __version__,
            "resolved_config": cfg,
            "config_hash": config_hash(cfg),
            "seeds": {"global": cfg["seed"], "simulate": cfg["sim"]["seed"], "measure": cfg["measure"]["seed"],
                      "reconstruct": cfg["reconstruct"]["seed"], "discover": cfg["discover"]["seed"]},
            "reference": cfg.get("reference", {}),
        })
        self.save()

    def path(self, name) -> Path:
        return self.dir / name

    def record(self, stage: str, files, info=None) -> None:
        self.manifest["stages"][stage] = {
            "files": {f: _sha(self.path(f)) for f in files},
            "info": info or {},
        }
        self.save()

    def save(self) -> None:
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def require(self, *names) -> None:
        missing = [n for n in names if not self.path(n).exists()]
        if missing:
            raise InvalidArgumentError(f"missing inputs {missing} in {self.dir}")


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in r])


# ---------------------------------------------------------------------------
# stages


def stage_simulate(run: Run) -> dict:
    sim = SimConfig.from_dict(run.cfg["sim"])
    mc = MeasurementConfig.from_dict(run.cfg["measure"])
    truth = generate_ground_truth(sim)
    meas = synthesize_measurements(truth, mc)
    write_pft(run.path("truth.pft"), truth)
    write_pft(run.path("measurements.pft"), meas)
    info = {"truth_shape": list(truth.shape), "measurement_shape": list(meas.shape)}
    run.record("simulate", ["truth.pft", "measurements.pft"], info)
    return info


def _model_from_config(cfg) -> tuple[PiBlockModel, TrainConfig]:
    rec = cfg["reconstruct"]
    block = PiBlockConfig.from_dict(rec["block"])
    isg = IsgConfig.from_dict(rec["isg"])
    return PiBlockModel(block, isg, seed=rec["seed"]), TrainConfig.from_dict(rec["train"])


def stage_reconstruct(run: Run) -> dict:
    run.require("measurements.pft")
    meas = read_pft(run.path("measurements.pft"))
    model, tc = _model_from_config(run.cfg)
    model, history = train(model, meas, tc)
    save_checkpoint(run.path("model.pck"), model, iteration=len(history))
    _write_rows(run.path("loss_history.csv"), HISTORY_COLUMNS, history)
    hr = reconstruct(model, meas, model.config.n_steps)
    write_pft(run.path("reconstruction.pft"), hr)
    info = {"iterations": len(history), "final_loss": history[-1][1] if history else None,
            "reconstruction_shape": list(hr.shape)}
    run.record("reconstruct", ["model.pck", "loss_history.csv", "reconstruction.pft"], info)
    return info


def _dictionary(cfg):
    names = cfg["discover"].get("terms")
    return default_terms() if not names else [term(n) for n in names]


def discover_system(hr, cfg, dx, dt) -> tuple[PdeSystem, dict]:
    """Sparse regression on library rows of ``hr``; returns the system and Pareto fronts."""
    disc = cfg["discover"]
    terms = _dictionary(cfg)
    lib = build_library(hr, dx, dt, terms)
    lib = subsample_rows(lib, float(disc["fraction"]), disc["seed"])
    rows, fronts = [], {}
    for i, comp in enumerate(COMPONENTS):
        prot = tuple(term_index(n, terms) for n in disc["protected"].get(comp, []))
        sc = SparseConfig(**dict(disc["sparse"], protected=prot))
        sol = tolerance_search(lib.theta, lib.ut[:, i], sc)
        rows.append([(terms[j], float(sol.xi[j])) for j in sol.support])
        if disc.get("pareto", True):
            fronts[comp] = pareto_sweep(lib.theta, lib.ut[:, i], disc.get("kappas"), sc)
    return PdeSystem(rows, "discovered"), fronts


def _hr_spacing(cfg):
    block = cfg["reconstruct"]["block"]
    return block["dx"], block["dt"]


def stage_discover(run: Run, source: str = "reconstruction.pft", tag: str = "") -> PdeSystem:
    run.require(source)
    hr = read_pft(run.path(source))
    dx, dt = _hr_spacing(run.cfg)
    system, fronts = discover_system(hr, run.cfg, dx, dt)
    files = [f"sparse{tag}.json"]
    run.path(f"sparse{tag}.json").write_text(json.dumps(system.to_json(), indent=2) + "\n")
    if fronts:
        write_pareto_csv(run.path(f"pareto{tag}.csv"), fronts)
        files.append(f"pareto{tag}.csv")
    run.record("discover" + tag, files, {"support": [[t.name for t, _ in row] for row in system.terms]})
    return system


def _write_system(run: Run, system: PdeSystem, stem: str) -> list[str]:
    run.path(f"{stem}.json").write_text(json.dumps(system.to_json(), indent=2) + "\n")
    run.path(f"{stem}.txt").write_text(system.to_text() + "\n")
    return [f"{stem}.json", f"{stem}.txt"]


def stage_finetune(run: Run, tag: str = "") -> PdeSystem:
    run.require(f"sparse{tag}.json", "model.pck", "measurements.pft")
    system = PdeSystem.from_json(json.loads(run.path(f"sparse{tag}.json").read_text()), "discovered")
    model, _ = load_checkpoint(run.path("model.pck"))
    meas = read_pft(run.path("measurements.pft"))
    tc = TrainConfig.from_dict(run.cfg["reconstruct"]["train"])
    dx, dt = _hr_spacing(run.cfg)
    u0 = isg_forward(model, meas[0])[0]
    pm = build_physics_model(system, u0=u0, dx=dx, dt=dt, spatial_stride=tc.spatial_stride,
                             temporal_stride=tc.temporal_stride)
    refined, history = finetune(pm, meas, FinetuneConfig.from_dict(run.cfg["finetune"]))
    _write_rows(run.path(f"finetune_history{tag}.csv"), ("iteration", "loss", "lr"), history)
    files = [f"finetune_history{tag}.csv"] + _write_system(run, refined, f"discovered-pde{tag}")
    run.record("finetune" + tag, files, {"iterations": len(history)})
    return refined


def true_system(cfg) -> PdeSystem:
    path = cfg["evaluate"].get("truth")
    if path:
        return PdeSystem.from_json(json.loads(Path(path).read_text()), "truth")
    return SimConfig.from_dict(cfg["sim"]).system()


def stage_evaluate(run: Run, stem: str = "discovered-pde") -> dict:
    run.require(f"{stem}.json")
    found = PdeSystem.from_json(json.loads(run.path(f"{stem}.json").read_text()))
    truth = true_system(run.cfg)
    m = evaluate_system(found, truth, _dictionary(run.cfg))
    row = dict(case=run.cfg["evaluate"]["case"], noise=float(run.cfg["measure"]["noise_level"]), **m)
    rows = [row]
    sparse = run.path("sparse.json")
    if stem == "discovered-pde" and sparse.exists():
        before = PdeSystem.from_json(json.loads(sparse.read_text()))
        mb = evaluate_system(before, truth, _dictionary(run.cfg))
        rows.append(dict(case=f"{row['case']}/before-finetune", noise=row["noise"], **mb))
    write_metrics_csv(run.path("metrics.csv"), rows)
    run.record("evaluate", ["metrics.csv"], m)
    return m


def _cycle_trajectory(run: Run, tag: str) -> str:
    """HR trajectory of the refined model, used as the next cycle's regression data."""
    system = PdeSystem.from_json(json.loads(run.path(f"discovered-pde{tag}.json").read_text()))
    model, _ = load_checkpoint(run.path("model.pck"))
    meas = read_pft(run.path("measurements.pft"))
    dx, dt = _hr_spacing(run.cfg)
    pm = build_physics_model(system, u0=isg_forward(model, meas[0])[0], dx=dx, dt=dt)
    name = f"physics-trajectory{tag}.pft"
    write_pft(run.path(name), pm.rollout(model.config.n_steps))
    return name


def run_pipeline(cfg: dict, out=None, stages=None) -> Run:
    """Run the selected stages (all by default) in order.

    With ``cycles > 1`` the discover/finetune pair repeats on the refined
    model's trajectory until the support stops changing or the cycle budget
    is spent; the final cycle's result is copied to ``discovered-pde.json``.
    """
    cfg = resolve_config(cfg)
    run = Run(cfg, output_dir(cfg, out))
    stages = list(STAGES) if stages is None else list(stages)
    for s in stages:
        if s not in STAGES:
            raise InvalidArgumentError(f"unknown stage {s!r}; choose from {STAGES}")
    order = [s for s in STAGES if s in stages]
    for stage in order:
        try:
            if stage == "simulate":
                stage_simulate(run)
            elif stage == "reconstruct":
                stage_reconstruct(run)
            elif stage == "discover":
                stage_discover(run)
            elif stage == "finetune":
                refined = stage_finetune(run)
                _cycles(run, refined)
            elif stage == "evaluate":
                stage_evaluate(run)
        except StageError:
            raise
        except Exception as exc:
            run.manifest.setdefault("failures", {})[stage] = f"{type(exc).__name__}: {exc}"
            run.save()
            raise StageError(stage, exc) from exc
    return run


def _cycles(run: Run, refined: PdeSystem) -> None:
    n = int(run.cfg["cycles"])
    prev = refined.support()
    tag = ""
    for r in range(2, n + 1):
        source = _cycle_trajectory(run, tag)
        new_tag = f"-cycle{r}"
        stage_discover(run, source=source, tag=new_tag)
        refined = stage_finetune(run, tag=new_tag)
        tag = new_tag
        if refined.support() == prev:
            run.manifest["converged_cycle"] = r
            break
        prev = refined.support()
    if tag:
        files = _write_system(run, refined, "discovered-pde")
        run.record("finetune", files, {"final_cycle": tag})
