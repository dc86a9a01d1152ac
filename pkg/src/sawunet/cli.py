"""Command-line entry point: generate | train | eval | ablate | render."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data
from .errors import SawuError, TrainingError, UsageError
from .experiments import WINDOW_SWEEP, ablation, ablation_lines, ablation_table
from .metrics import evaluate
from .model import (
    ModelConfig, extract_endmembers, infer_abundances, load_checkpoint, save_checkpoint, train,
)

log = logging.getLogger("sawunet")

# flag name -> ModelConfig field
MODEL_FLAGS = {
    "endmembers": "P", "window": "K", "lambda1": "lambda1", "lambda2": "lambda2", "batch": "batch_size",
    "epochs": "epochs", "lr_encoder": "lr_encoder", "lr_decoder": "lr_decoder", "dropout": "dropout",
    "seed": "seed", "padding": "padding",
}
RUN_KEYS = ("cube", "gt_endmembers", "gt_abundances", "checkpoint", "out", "seeds", "baseline", "windows",
            "height", "width", "bands", "snr", "block")


@dataclass
class RunConfig:
    command: str
    model: ModelConfig
    run: dict = field(default_factory=dict)
    explicit_bands: bool = False

    def echo(self) -> str:
        return json.dumps({"command": self.command, **self.model.to_dict(), **self.run}, sort_keys=True)


def resolve(args: argparse.Namespace) -> RunConfig:
    """Defaults < --config file < explicit flags; unknown file keys are rejected."""
    model = {f.name: getattr(ModelConfig(), f.name) for f in fields(ModelConfig)}
    explicit_bands = False
    run = {k: getattr(args, k) for k in RUN_KEYS if hasattr(args, k)}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        loaded.pop("command", None)
        unknown = set(loaded) - set(model) - set(RUN_KEYS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        explicit_bands = "L" in loaded
        for key, value in loaded.items():
            if key in model:
                model[key] = value
            elif run.get(key) in (None, False):
                run[key] = value
    for flag, name in MODEL_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            model[name] = value
    if getattr(args, "no_pixel_attention", False):
        model["use_pixel_attention"] = False
    if args.command != "generate" and getattr(args, "bands", None) is not None:
        model["L"] = args.bands
        explicit_bands = True
    return RunConfig(args.command, ModelConfig(**model), run, explicit_bands)


def _out_dir(path) -> Path:
    if path is None:
        raise UsageError("--out is required")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _load_cube_for(rc: RunConfig) -> data.HsiCube:
    if not rc.run.get("cube"):
        raise UsageError("--cube is required")
    cube = data.load_cube(rc.run["cube"])
    return cube


def _fit_bands(rc: RunConfig, cube: data.HsiCube) -> None:
    if rc.explicit_bands and rc.model.L != cube.bands:
        raise UsageError(f"config says L={rc.model.L} but the cube has {cube.bands} bands")
    rc.model.L = cube.bands


def cmd_generate(rc: RunConfig) -> None:
    r = rc.run
    out = _out_dir(r["out"])
    snr = r["snr"]
    cube, gt = data.generate_synthetic(rc.model.P, r["bands"], r["height"], r["width"], snr, rc.model.seed,
                                       block=r["block"])
    data.save_cube(out / "cube.bin", cube)
    data.save_ground_truth(out / "gt_endmembers.txt", out / "gt_abundances.bin", gt)
    clean = gt.abundances @ gt.endmembers.T
    achieved = data.measured_snr(clean, cube.values) if math.isfinite(snr) else math.inf
    print(f"wrote {out / 'cube.bin'} ({cube.height}x{cube.width}x{cube.bands}, P={rc.model.P})")
    print(f"achieved_snr_db={achieved!r}")


def cmd_train(rc: RunConfig) -> None:
    cube = _load_cube_for(rc)
    _fit_bands(rc, cube)
    out = _out_dir(rc.run["out"])
    attention = not rc.run.get("baseline")
    rc.model.validate()
    print(rc.echo())
    result = train(cube, rc.model, attention=attention)
    save_checkpoint(out / "model.ckpt", result.params, rc.model, attention)
    with open(out / "loss.txt", "w", encoding="ascii") as fh:
        for epoch, value in enumerate(result.history):
            fh.write(f"{epoch} {value!r}\n")
    (out / "config.json").write_text(rc.echo() + "\n")
    if result.degenerate:
        print(f"degenerate_abundances={result.degenerate}")
    final = result.history[-1] if result.history else float("nan")
    print(f"trained {len(result.history)} epochs, final loss {final:.6g}")


def _render(out: Path, abundances: np.ndarray, endmembers: np.ndarray) -> None:
    for k in range(abundances.shape[-1]):
        data.write_pgm(out / f"abundance_{k + 1}.pgm", abundances[..., k])
    np.savetxt(out / "endmembers.csv", endmembers, delimiter=",", fmt="%.17g")


def _infer_from_checkpoint(rc: RunConfig):
    if not rc.run.get("checkpoint"):
        raise UsageError("--checkpoint is required")
    params, config, attention = load_checkpoint(rc.run["checkpoint"])
    cube = _load_cube_for(rc)
    if cube.bands != config.L:
        raise UsageError(f"checkpoint expects L={config.L} but the cube has {cube.bands} bands")
    inf = infer_abundances(params, cube, config, attention=attention)
    if inf.degenerate:
        print(f"degenerate_abundances={inf.degenerate}")
    return params, config, inf


def cmd_render(rc: RunConfig) -> None:
    out = _out_dir(rc.run["out"])
    params, _, inf = _infer_from_checkpoint(rc)
    _render(out, inf.abundances, extract_endmembers(params))
    print(f"rendered {inf.abundances.shape[-1]} abundance maps to {out}")


def cmd_eval(rc: RunConfig) -> None:
    out = _out_dir(rc.run["out"])
    params, config, inf = _infer_from_checkpoint(rc)
    endmembers = extract_endmembers(params)
    _render(out, inf.abundances, endmembers)
    if not rc.run.get("gt_endmembers"):
        print("warning: no ground-truth endmembers given; wrote maps and spectra only", file=sys.stderr)
        return
    gt_em = data.load_matrix(rc.run["gt_endmembers"])
    gt_ab = None
    if rc.run.get("gt_abundances"):
        gt_ab = data.load_cube(rc.run["gt_abundances"]).values
    else:
        print("warning: no ground-truth abundances given; reporting endmember SAD only", file=sys.stderr)
    report = evaluate(endmembers, gt_em, inf.abundances if gt_ab is not None else None, gt_ab,
                      {"seed": config.seed, "config": config.digest(), "degenerate": inf.degenerate})
    report.write(out / "metrics.txt")
    print(report.table())


def cmd_ablate(rc: RunConfig) -> None:
    cube = _load_cube_for(rc)
    _fit_bands(rc, cube)
    rc.model.validate()
    print(rc.echo())
    out = _out_dir(rc.run["out"])
    if not (rc.run.get("gt_endmembers") and rc.run.get("gt_abundances")):
        raise UsageError("ablate needs --gt-endmembers and --gt-abundances")
    gt = data.load_ground_truth(rc.run["gt_endmembers"], rc.run["gt_abundances"])
    seeds = rc.run.get("seeds") or [rc.model.seed]
    windows = rc.run.get("windows") or list(WINDOW_SWEEP)
    cells = ablation(cube, gt, rc.model, seeds, windows)
    with open(out / "ablation.txt", "w", encoding="ascii") as fh:
        fh.write("\n".join(ablation_lines(cells)) + "\n")
    print(ablation_table(cells))


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "render": cmd_render,
            "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sawunet", description="Spatial-attention weighted unmixing.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True):
        p.add_argument("--config", help="JSON file with config keys (overridden by flags)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        if model:
            p.add_argument("--cube")
            p.add_argument("--endmembers", type=int, metavar="P")
            p.add_argument("--window", type=int, metavar="K")
            p.add_argument("--lambda1", type=float)
            p.add_argument("--lambda2", type=float)
            p.add_argument("--batch", type=int)
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr-encoder", type=float)
            p.add_argument("--lr-decoder", type=float)
            p.add_argument("--dropout", type=float)
            p.add_argument("--padding", choices=data.PADDING_MODES)
            p.add_argument("--no-pixel-attention", action="store_true")
            p.add_argument("--bands", type=int, help="expected band count (checked against the cube)")

    g = sub.add_parser("generate", help="write a synthetic cube and its ground truth")
    common(g, model=False)
    g.add_argument("--endmembers", type=int, metavar="P", default=4)
    g.add_argument("--bands", type=int, default=100)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--snr", type=float, default=30.0, help="dB; 'inf' disables noise")
    g.add_argument("--block", type=int, default=4, help="tile size of the abundance field")

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    common(t)
    t.add_argument("--baseline", action="store_true", help="train the attention-free autoencoder")

    for name, text in (("eval", "score a checkpoint against ground truth"), ("render", "write abundance maps")):
        e = sub.add_parser(name, help=text)
        common(e, model=False)
        e.add_argument("--checkpoint")
        e.add_argument("--cube")
        if name == "eval":
            e.add_argument("--gt-endmembers")
            e.add_argument("--gt-abundances")

    a = sub.add_parser("ablate", help="variant and window-size sweep")
    common(a)
    a.add_argument("--gt-endmembers")
    a.add_argument("--gt-abundances")
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--windows", type=int, nargs="+")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve(args)
        if args.command in ("generate", "eval", "render"):
            print(rc.echo())
        COMMANDS[args.command](rc)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SawuError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
