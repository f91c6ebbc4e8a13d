"""Command-line entry point.

Every subcommand takes ``--config FILE`` (a pipeline config or a run
manifest), ``--out DIR`` and any number of ``--section.key value``
overrides (top-level keys such as ``--cycles 2`` too), e.g. ``--measure.noise_level 0.05 --reconstruct.train.iterations 500``.
Values are parsed as JSON when possible and as strings otherwise.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from . import pipeline as P
from .errors import StageError
from .simulate import PRESET_DEFAULTS

_INPUTS = {
    "reconstruct": ["measurements.pft"],
    "discover": ["reconstruction.pft"],
    "finetune": ["sparse.json", "model.pck", "measurements.pft"],
    "evaluate": ["discovered-pde.json", "sparse.json"],
    "interpret": ["model.pck"],
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, pairs) -> dict:
    for key, value in pairs:
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise SystemExit(f"override {key!r} descends into a non-section")
        node[parts[-1]] = value
    return cfg


def _split_overrides(extra):
    pairs = []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise SystemExit(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            try:
                val = next(it)
            except StopIteration:
                raise SystemExit(f"override {tok} needs a value") from None
        if "." not in key and key not in P.DEFAULT_CONFIG:
            raise SystemExit(f"unknown option {tok!r}")
        pairs.append((key, _parse_value(val)))
    return pairs


def build_config(args, extra) -> dict:
    cfg = P.load_config(args.config) if args.config else {}
    preset = getattr(args, "preset", None)
    if preset:
        if preset not in PRESET_DEFAULTS:
            raise SystemExit(f"unknown preset {preset!r}")
        d = PRESET_DEFAULTS[preset]
        cfg = P._merge({"name": preset, "sim": d["sim"], "measure": d["measure"]}, cfg)
    if getattr(args, "noise", None) is not None:
        cfg.setdefault("measure", {})["noise_level"] = args.noise
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
        # explicit --seed re-derives stage seeds
        for section in ("sim", "measure", "reconstruct", "discover"):
            cfg.get(section, {}).pop("seed", None)
        cfg.get("reconstruct", {}).get("train", {}).pop("seed", None)
    return apply_overrides(cfg, _split_overrides(extra))


def _copy_inputs(src, dst, names):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    for n in names:
        if (src / n).exists() and src.resolve() != dst.resolve():
            shutil.copy2(src / n, dst / n)


def _parser():
    ap = argparse.ArgumentParser(prog="pdediscover", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="pipeline config or manifest.json")
        p.add_argument("--out", help="run directory (default: $%s/<name>)" % P.OUTPUT_ENV)
        p.add_argument("--inputs", help="copy this stage's inputs from another run directory")
        p.add_argument("--seed", type=int, help="global seed")
        return p

    p = common(sub.add_parser("simulate", help="generate truth.pft and measurements.pft"))
    p.add_argument("--preset", choices=sorted(PRESET_DEFAULTS))
    p.add_argument("--noise", type=float)
    for name in ("reconstruct", "discover", "finetune", "evaluate"):
        common(sub.add_parser(name, help=f"run the {name} stage"))
    p = common(sub.add_parser("pipeline", help="run all stages"))
    p.add_argument("--preset", choices=sorted(PRESET_DEFAULTS))
    p.add_argument("--noise", type=float)
    p.add_argument("--stages", help="comma-separated subset of " + ",".join(P.STAGES))
    p = common(sub.add_parser("interpret", help="print the symbolic form of a trained block"))
    p.add_argument("--digits", type=int, default=5)
    p.add_argument("--model", help="checkpoint path (default: <out>/model.pck)")
    return ap


def main(argv=None) -> int:
    ap = _parser()
    args, extra = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = build_config(args, extra)
    resolved = P.resolve_config(cfg)
    out = P.output_dir(resolved, args.out)
    if args.inputs:
        _copy_inputs(args.inputs, out, _INPUTS.get(args.command, []))
    try:
        if args.command == "interpret":
            return _interpret(args, out)
        if args.command == "pipeline":
            stages = args.stages.split(",") if args.stages else None
        else:
            stages = [args.command]
        run = P.run_pipeline(resolved, out, stages)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _report(run, stages)
    return 0


def _report(run, stages):
    print(f"run directory: {run.dir}")
    for stage, rec in run.manifest["stages"].items():
        if stages is None or stage.split("-")[0] in stages:
            print(f"  {stage}: {', '.join(rec['files'])}")
    txt = run.path("discovered-pde.txt")
    if txt.exists() and (stages is None or "finetune" in stages):
        print(txt.read_text().rstrip())
    if run.path("metrics.csv").exists() and (stages is None or "evaluate" in stages):
        print(run.path("metrics.csv").read_text().rstrip())


def _interpret(args, out) -> int:
    from .errors import UnsupportedConfigurationError
    from .percnn import interpret, load_checkpoint

    model, _ = load_checkpoint(args.model or Path(out) / "model.pck")
    try:
        expr = interpret(model, digits=args.digits)
    except UnsupportedConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    for comp, items in zip(("u", "v"), expr):
        body = " + ".join(f"{c:g}*{n}" for n, c in items) or "0"
        print(f"{comp}_t = {body}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
