"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import bench as B
from .config import _KEY_SECTION, Config, ConfigError, parse_override
from .experiments import ABLATION_ROWS, FEW_SHOT_RATIOS, run_ablation, run_few_shot
from .model import CacheError, FastTCM, load_text_cache, loss_grad_check, save_text_cache
from .serialize import FormatError
from .synthgen import SPLIT_OFFSETS, SynthDataset, build_dataset, read_dataset, write_dataset
from .tensor import GradCheckError
from .train import TrainingDiverged, evaluate, load_checkpoint, train

log = logging.getLogger("fasttcm")

GRAD_TOL = 1e-4
ABLATION_MARGIN = 0.01
# keys that change model shapes or forward semantics; fixed once a checkpoint exists
_MODEL_SECTIONS = ("encoder", "bridge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key-value JSON config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", default="out", help="directory for every file written")


def build_parser() -> _Parser:
    parser = _Parser(prog="fasttcm", description="Train, evaluate and benchmark the bridge model.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic splits as PPM/PGM files")
    _common(p)
    p.add_argument("--splits", nargs="+", default=list(SPLIT_OFFSETS), choices=list(SPLIT_OFFSETS))

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--data", help="dataset root from gen-data (default: generate in memory)")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=list(SPLIT_OFFSETS))

    p = sub.add_parser("ablate", help="component ablation over several seeds")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--rows", nargs="+", choices=list(ABLATION_ROWS), default=list(ABLATION_ROWS))
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])

    p = sub.add_parser("few-shot", help="baseline vs bridge at reduced data ratios")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--ratios", nargs="+", type=float, default=list(FEW_SHOT_RATIOS))
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])

    p = sub.add_parser("bench", help="online vs offline text-path latency")
    _common(p)
    p.add_argument("--checkpoint", help="fast-mode checkpoint (default: fresh initialisation)")
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=list(SPLIT_OFFSETS))
    p.add_argument("--text-depth", type=int, help="text-encoder depth for a fresh model")
    p.add_argument("--tcm", action="store_true", help="also time per-image cue conditioning")

    p = sub.add_parser("grad-check", help="finite-difference check of the full training loss")
    _common(p)
    p.add_argument("--max-coords", type=int, help="probe at most this many coordinates per tensor")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export-maps", help="write grayscale feature maps for chosen samples")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=list(SPLIT_OFFSETS))
    p.add_argument("--indices", nargs="+", type=int, required=True)
    return parser


# ----------------------------------------------------------------------------
# helpers


def _overrides(args) -> list[tuple[str, str]]:
    return [parse_override(s) for s in args.overrides]


def load_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    for key, val in _overrides(args):
        cfg.set(key, val)
    return cfg.validate()


def _checkpoint_config(args, model_cfg: Config) -> Config:
    """Stored config plus command-line settings that leave the model itself untouched.

    Model keys in a ``--config`` file are ignored (the checkpoint decides them);
    an explicit ``--set`` of a model key to a different value is an error.
    """
    cfg = model_cfg.copy()
    if args.config:
        for key, val in Config.load(args.config).to_flat().items():
            if _KEY_SECTION[key] not in _MODEL_SECTIONS:
                cfg.set(key, val)
    for key, val in _overrides(args):
        if _KEY_SECTION.get(key) in _MODEL_SECTIONS:
            probe = cfg.copy()
            probe.set(key, val)
            if probe.model_hash() != cfg.model_hash():
                raise ConfigError(f"{key} is fixed by the checkpoint and cannot be overridden")
        cfg.set(key, val)
    return cfg.validate()


def load_split(cfg: Config, root: str | None, split: str) -> SynthDataset:
    if root is None:
        return build_dataset(cfg, split)
    data = read_dataset(root, split)
    if data.manifest.config_hash != cfg.data_hash():
        raise ConfigError(
            f"{root}/{split} was generated with data config {data.manifest.config_hash}, "
            f"current config is {cfg.data_hash()}"
        )
    return data


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_report(name: str, rep) -> None:
    print(f"{name}: pixel P {rep.pixel_precision:.4f} R {rep.pixel_recall:.4f} "
          f"F {rep.pixel_f:.4f} | region F {rep.region_f:.4f} | loss {rep.loss:.4f}")


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    out = _out(args)
    for split in args.splits:
        m = write_dataset(out, cfg, split)
        print(f"{split}: {m.count} samples -> {out / split}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = _out(args)
    cfg.save(out / "config.json")
    res = train(cfg, load_split(cfg, args.data, "train"), out)
    print(f"final loss {res.losses[-1][0]:.4f}" if res.losses else "no steps run")
    print(f"checkpoint: {res.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(args, model.cfg)
    rep = evaluate(model, load_split(cfg, args.data, args.split))
    _print_report(args.split, rep)
    out = _out(args)
    path = out / "eval_report.csv"
    path.write_text(",".join(["run", "pixel_p", "pixel_r", "pixel_f", "region_f"]) + "\n"
                    + ",".join(map(str, rep.row(Path(args.checkpoint).stem))) + "\n")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    out = _out(args)
    rows = {k: ABLATION_ROWS[k] for k in args.rows}
    table = run_ablation(cfg, load_split(cfg, args.data, "train"), load_split(cfg, args.data, "test"),
                         rows, args.seeds, out / "ablation.csv")
    for name in table.runs:
        _print_report(name, table.mean(name))
    if "baseline" in table.runs and "fasttcm" in table.runs:
        delta = table.mean("fasttcm").pixel_f - table.mean("baseline").pixel_f
        print(f"pixel-F delta fasttcm - baseline: {delta:+.4f}")
        if delta < ABLATION_MARGIN:
            print(f"REGRESSION: delta below the required +{ABLATION_MARGIN}")
            return 2
    return 0


def cmd_few_shot(args) -> int:
    cfg = load_config(args)
    out = _out(args)
    table = run_few_shot(cfg, load_split(cfg, args.data, "train"), load_split(cfg, args.data, "test"),
                         args.ratios, args.seeds, out_csv=out / "few_shot.csv")
    for name in table.runs:
        _print_report(name, table.mean(name))
    return 0


def cmd_bench(args) -> int:
    if args.checkpoint:
        if args.text_depth is not None:
            raise ConfigError("--text-depth applies to a fresh model, not a checkpoint")
        model, _, _ = load_checkpoint(args.checkpoint)
        cfg = _checkpoint_config(args, model.cfg)
        model.cfg = cfg
    else:
        cfg = load_config(args)
        if args.text_depth is not None:
            cfg = cfg.copy(text_depth=args.text_depth)
        model = FastTCM(cfg)
    out = _out(args)
    cache_path = out / "text_cache.ftcm"
    save_text_cache(cache_path, model)
    cached = load_text_cache(cache_path, model)
    data = load_split(cfg, args.data, args.split)
    reports = B.bench_inference(model, data.images, cfg.bench, tcm=args.tcm, cached=cached)
    B.write_bench_report(out / "bench_report.csv", reports)
    for r in reports:
        print(f"{r.mode:8s} {r.images} images  mean {r.mean_latency_ms:.3f} ms  "
              f"p50 {r.p50:.3f}  p95 {r.p95:.3f}  max|diff| {r.equivalence_max_abs_diff:.3g}")
    return 0


def cmd_grad_check(args) -> int:
    cfg = load_config(args)
    err = loss_grad_check(cfg, seed=args.seed, max_coords=args.max_coords)
    print(f"max relative error {err:.3e}")
    return 0 if err < GRAD_TOL else 2


def cmd_export_maps(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(args, model.cfg)
    data = load_split(cfg, args.data, args.split)
    paths = B.export_maps(model, data.images, args.indices, _out(args) / "maps")
    print(f"wrote {len(paths)} maps to {Path(args.out) / 'maps'}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "few-shot": cmd_few_shot,
    "bench": cmd_bench,
    "grad-check": cmd_grad_check,
    "export-maps": cmd_export_maps,
}

RUNTIME_ERRORS = (ConfigError, CacheError, FormatError, GradCheckError, TrainingDiverged,
                  OSError, ValueError, KeyError, IndexError, RuntimeError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(sys.argv[1:] if argv is None else argv)
        if args.command is None:
            raise UsageError("no subcommand given")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
