import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from pdediscover import pipeline as P
from pdediscover.cli import main
from pdediscover.field import read_pft
from pdediscover.metrics import read_metrics_csv

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

TINY = {
    "name": "tiny",
    "seed": 3,
    "sim": {"preset": "burgers", "params": {"nu": 0.005}, "grid": 17, "dt": 1e-3, "n_steps": 20},
    "measure": {"spatial_stride": 2, "temporal_stride": 2, "noise_level": 0.02, "n_frames": 10},
    "reconstruct": {"block": {"n_layers": 2, "n_channels": 2, "kernel_size": 3},
                    "isg": {"depth": 2, "channels": 2, "pretrain_iters": 5},
                    "train": {"iterations": 5}},
    "discover": {"fraction": 0.5, "protected": {"u": ["lap(u)"], "v": ["lap(v)"]}, "kappas": [0.1, 1.0, 10.0]},
    "finetune": {"iterations": 4},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir()) if p.is_file()}


def test_simulate_preset_shapes_and_determinism(tmp_path, capsys):
    for out in ("a", "b"):
        assert main(["simulate", "--preset", "burgers", "--noise", "0.05", "--seed", "7",
                     "--out", str(tmp_path / out)]) == 0
    assert read_pft(tmp_path / "a" / "truth.pft").shape == (201, 2, 101, 101)
    assert read_pft(tmp_path / "a" / "measurements.pft").shape == (40, 2, 51, 51)
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    assert "truth.pft" in capsys.readouterr().out


def test_simulate_without_noise_gives_strided_truth(tmp_path, tiny_config):
    assert main(["simulate", "--config", str(tiny_config), "--noise", "0", "--out", str(tmp_path)]) == 0
    truth = read_pft(tmp_path / "truth.pft")
    meas = read_pft(tmp_path / "measurements.pft")
    np.testing.assert_array_equal(meas, truth[0:20:2, :, ::2, ::2])


def test_full_pipeline_outputs_and_manifest(tmp_path, tiny_config):
    out = tmp_path / "run"
    assert main(["pipeline", "--config", str(tiny_config), "--out", str(out)]) == 0
    names = set(_files(out))
    for f in ("truth.pft", "measurements.pft", "model.pck", "loss_history.csv", "reconstruction.pft",
              "sparse.json", "pareto.csv", "finetune_history.csv", "discovered-pde.json", "discovered-pde.txt",
              "metrics.csv", "manifest.json"):
        assert f in names
    man = json.loads((out / "manifest.json").read_text())
    assert man["resolved_config"] == P.resolve_config(TINY)
    assert man["config_hash"] == P.config_hash(man["resolved_config"])
    assert set(man["stages"]) >= set(P.STAGES)
    assert man["seeds"]
    rows = read_metrics_csv(out / "metrics.csv")
    assert {r["case"] for r in rows} == {"burgers", "burgers/before-finetune"}
    assert (out / "loss_history.csv").read_text().splitlines()[0] == "iteration,loss,data_term,ic_term,lr"
    assert (out / "pareto.csv").read_text().splitlines()[0] == "component,kappa,l0,error,objective"
    pde = json.loads((out / "discovered-pde.json").read_text())
    assert {"component", "term", "coefficient"} <= set(pde[0] if isinstance(pde, list) else pde["terms"][0])


def test_each_stage_rerun_from_manifest_is_byte_identical(tmp_path, tiny_config):
    first = tmp_path / "first"
    assert main(["pipeline", "--config", str(tiny_config), "--out", str(first)]) == 0
    ref = _files(first)
    manifest = first / "manifest.json"
    for stage in P.STAGES:
        again = tmp_path / f"again-{stage}"
        shutil.copytree(first, again)
        produced = json.loads(manifest.read_text())["stages"][stage]["files"]
        for f in produced:
            (again / f).unlink()
        assert main([stage, "--config", str(manifest), "--out", str(again)]) == 0
        for f in produced:
            assert (again / f).read_bytes() == ref[f], (stage, f)


def test_stage_filter_stops_after_reconstruction(tmp_path, tiny_config):
    out = tmp_path / "r"
    assert main(["pipeline", "--config", str(tiny_config), "--out", str(out),
                 "--stages", "simulate,reconstruct"]) == 0
    names = set(_files(out))
    assert "reconstruction.pft" in names and "sparse.json" not in names and "metrics.csv" not in names


def test_inputs_flag_copies_previous_artifacts(tmp_path, tiny_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", str(tiny_config), "--out", str(a)]) == 0
    assert main(["reconstruct", "--config", str(tiny_config), "--out", str(b), "--inputs", str(a)]) == 0
    assert (b / "reconstruction.pft").exists()


def test_dotted_overrides_reach_the_manifest(tmp_path, tiny_config):
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(tiny_config), "--out", str(out), "--measure.noise_level", "0.1",
                 "--sim.params={\"nu\": 0.01}"]) == 0
    cfg = json.loads((out / "manifest.json").read_text())["resolved_config"]
    assert cfg["measure"]["noise_level"] == 0.1 and cfg["sim"]["params"] == {"nu": 0.01}


def test_output_root_from_environment(tmp_path, tiny_config, monkeypatch):
    monkeypatch.setenv(P.OUTPUT_ENV, str(tmp_path / "root"))
    assert main(["simulate", "--config", str(tiny_config)]) == 0
    assert (tmp_path / "root" / "tiny" / "truth.pft").exists()


def test_stage_failure_is_tagged_and_keeps_partial_artifacts(tmp_path, tiny_config, capsys):
    out = tmp_path / "f"
    assert main(["simulate", "--config", str(tiny_config), "--out", str(out)]) == 0
    rc = main(["finetune", "--config", str(tiny_config), "--out", str(out)])
    assert rc == 2
    assert "stage 'finetune' failed" in capsys.readouterr().err
    assert (out / "truth.pft").exists()
    man = json.loads((out / "manifest.json").read_text())
    assert "finetune" in man.get("failures", {})


def test_cycles_rerun_discovery(tmp_path):
    out = tmp_path / "c"
    run = P.run_pipeline(P.resolve_config(dict(TINY, cycles=2)), out)
    assert run.path("discovered-pde.json").exists()
    assert "final_cycle" in run.manifest["stages"]["finetune"]["info"]


def test_invalid_cycle_count_is_rejected(tiny_config):
    with pytest.raises(Exception, match="cycles"):
        main(["pipeline", "--config", str(tiny_config), "--cycles", "0"])


def test_interpret_subcommand(tmp_path, tiny_config, capsys):
    out = tmp_path / "i"
    assert main(["pipeline", "--config", str(tiny_config), "--out", str(out), "--stages", "simulate,reconstruct"]) == 0
    assert main(["interpret", "--config", str(tiny_config), "--out", str(out)]) == 3
    assert "not a combination of known stencils" in capsys.readouterr().err

    from pdediscover.percnn import PiBlockModel, save_checkpoint
    from pdediscover.simulate import burgers
    save_checkpoint(out / "hand.pck", PiBlockModel.from_system(burgers(0.005), 1 / 17, grid=(17, 17)))
    assert main(["interpret", "--config", str(tiny_config), "--out", str(out), "--model", str(out / "hand.pck")]) == 0
    text = capsys.readouterr().out
    assert "u_t = 0.005*lap(u) + -1*u*u_x + -1*v*u_y" in text


@pytest.mark.parametrize("name", ["burgers_desk", "burgers", "lambda_omega", "gray_scott"])
def test_shipped_configs_resolve(name):
    cfg = P.resolve_config(P.load_config(CONFIGS / f"{name}.json"))
    assert P.config_hash(P.resolve_config(cfg)) == P.config_hash(cfg)


def test_gray_scott_config_carries_reference_target(tmp_path):
    cfg = P.load_config(CONFIGS / "gray_scott.json")
    ref = cfg["reference"]["discovered_5pct"]
    assert ref["u"]["u*v^2"] == -1.003 and ref["v"]["v"] == -0.1007
    cfg["sim"]["grid"] = 17
    cfg["sim"]["n_steps"] = 10
    cfg["measure"]["n_frames"] = 2
    out = tmp_path / "gs"
    assert main(["simulate", "--config", str(_dump(tmp_path, cfg)), "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["reference"] == cfg["reference"]


def _dump(tmp_path, cfg):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


def test_console_script_entry_point(tmp_path, tiny_config):
    proc = subprocess.run([sys.executable, "-m", "pdediscover.cli", "simulate", "--config", str(tiny_config),
                           "--out", str(tmp_path / "s")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "s" / "measurements.pft").exists()
