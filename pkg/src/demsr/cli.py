"""Command-line interface: ``demsr <subcommand> ...``.

Exit codes: 0 success, 1 contract or verification failure, 2 usage error,
3 I/O or format error.  Progress goes to stderr; stdout carries only
machine-readable summaries.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass, fields, replace
from pathlib import Path


from . import __version__
from .checkpoint import load_checkpoint
from .data import (
    dataset_stats,
    downsample_avg,
    load_pairs,
    pair_and_filter,
    read_raster,
    synthesize_terrain,
    tile_grid,
    write_manifest,
    write_raster,
)
from .exceptions import ConfigError, DemsrError, FormatError, ParseError
from .model import build_model, production_config, tiny_config
from .train import (
    TrainConfig,
    evaluate,
    export_report,
    fit,
    load_model,
    model_from_checkpoint,
    model_predictor,
    write_history,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("demsr")


class UsageError(DemsrError):
    pass


# ---------------------------------------------------------------------------
# Run configuration


@dataclass
class RunConfig:
    # model
    model: str = "production"
    tiny_divisor: int = 8
    model_seed: int = 0
    skip_interpolation: str = "bicubic"
    leaky_slope: float = 0.2
    head_init: str = "skip"
    up2_init_scale: float = 0.1
    scale_factor: int = 16
    # training
    learning_rate: float = 0.001
    batch_size: int = 4
    max_epochs: int = 100
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-6
    seed: int = 0
    deterministic: bool = True
    # data and artifacts
    manifest: str = ""
    out_dir: str = ""
    resume: str = ""
    tile_size: int = 400

    def model_config(self):
        kw = dict(
            seed=self.model_seed,
            skip_interpolation=self.skip_interpolation,
            leaky_slope=self.leaky_slope,
            head_init=self.head_init,
            up2_init_scale=self.up2_init_scale,
            scale_factor=self.scale_factor,
        )
        if self.model == "tiny":
            return tiny_config(divisor=self.tiny_divisor, **kw)
        if self.model == "production":
            return production_config(**kw)
        raise ConfigError(f"model must be tiny or production, got {self.model!r}")

    def train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            plateau_patience=self.plateau_patience,
            plateau_factor=self.plateau_factor,
            plateau_threshold=self.plateau_threshold,
            min_lr=self.min_lr,
            seed=self.seed,
            deterministic=self.deterministic,
        ).validate()

    def dump(self):
        return "".join(f"{f.name}={_format_value(getattr(self, f.name))}\n" for f in fields(self))


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_CONVERTERS = {"int": int, "float": float, "str": str, "bool": _parse_bool}


def _convert(key, text):
    conv = _CONVERTERS[_FIELD_TYPES[key]]
    try:
        return conv(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}: expected key=value, got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source} line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, value)
    return values


def load_config_file(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


def resolve_config(file_values=None, flag_values=None):
    """Defaults < config file < flags."""
    cfg = RunConfig()
    if file_values:
        cfg = replace(cfg, **file_values)
    if flag_values:
        cfg = replace(cfg, **{k: v for k, v in flag_values.items() if v is not None})
    return cfg


def _add_config_flags(parser):
    group = parser.add_argument_group("run configuration (overrides --config)")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            group.add_argument(flag, dest=f.name, type=_CONVERTERS[f.type], default=None, metavar=f.name.upper())


def _flag_values(args):
    return {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}


# ---------------------------------------------------------------------------
# Subcommands


def _require_file(path, what):
    if not path:
        raise UsageError(f"{what} is required")
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def _require_out_dir(path):
    if not path:
        raise UsageError("an output directory (--out-dir) is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args):
    out = _require_out_dir(args.out_dir)
    if args.count < 1:
        raise UsageError(f"--count must be positive, got {args.count}")
    if args.size % args.tile_size or args.tile_size % args.scale_factor:
        raise UsageError(
            f"--size {args.size} must be a multiple of --tile-size {args.tile_size}, "
            f"which must be a multiple of --scale-factor {args.scale_factor}"
        )
    (out / "hr").mkdir(exist_ok=True)
    (out / "lr").mkdir(exist_ok=True)
    entries = []
    for i in range(args.count):
        seed = args.seed + i
        hr = synthesize_terrain(seed, args.size, args.roughness)
        lr = downsample_avg(hr, args.scale_factor)
        for lr_t, hr_t in zip(tile_grid(lr, args.tile_size // args.scale_factor), tile_grid(hr, args.tile_size)):
            hr_path = out / "hr" / f"{hr_t.name}.{args.format}"
            lr_path = out / "lr" / f"{hr_t.name}.{args.format}"
            write_raster(hr_t, hr_path)
            write_raster(lr_t, lr_path)
            entries.append((hr_t.name, lr_path, hr_path))
    write_manifest(entries, out / "manifest.tsv")
    log.info("wrote %d pairs to %s", len(entries), out)
    print(out / "manifest.tsv")
    return EXIT_OK


def cmd_tile(args):
    hr_path = _require_file(args.hr, "--hr")
    lr_path = _require_file(args.lr, "--lr")
    out = _require_out_dir(args.out_dir)
    hr, lr = read_raster(hr_path), read_raster(lr_path)
    lr_tile = args.tile_size // args.scale_factor
    if args.tile_size % args.scale_factor:
        raise UsageError(f"--tile-size {args.tile_size} is not a multiple of --scale-factor {args.scale_factor}")
    if hr.nrows != args.scale_factor * lr.nrows or hr.ncols != args.scale_factor * lr.ncols:
        raise DemsrError(f"high-res {hr.shape} is not {args.scale_factor}x low-res {lr.shape}")
    hr.name = hr.name or hr_path.stem
    lr.name = hr.name
    pairs = pair_and_filter(tile_grid(lr, lr_tile), tile_grid(hr, args.tile_size), ratio=args.scale_factor)
    (out / "hr").mkdir(exist_ok=True)
    (out / "lr").mkdir(exist_ok=True)
    entries = []
    for p in pairs:
        hp, lp = out / "hr" / f"{p.id}.demr", out / "lr" / f"{p.id}.demr"
        write_raster(p.hr, hp)
        write_raster(p.lr, lp)
        entries.append((p.id, lp, hp))
    write_manifest(entries, out / "manifest.tsv")
    n_total = (hr.nrows // args.tile_size) * (hr.ncols // args.tile_size)
    log.info("kept %d of %d tile pairs (%d dropped for nodata)", len(pairs), n_total, n_total - len(pairs))
    print(out / "manifest.tsv")
    return EXIT_OK


def cmd_stats(args):
    pairs = load_pairs(_require_file(args.manifest, "--manifest"), ratio=args.scale_factor)
    if not pairs:
        raise DemsrError(f"{args.manifest}: manifest lists no tile pairs")
    tiles = [p.hr if args.side == "hr" else p.lr for p in pairs]
    s = dataset_stats(tiles)
    print("avg\tmin\tmax\tstd\tcount")
    print(f"{s.avg:.1f}\t{s.min:.1f}\t{s.max:.1f}\t{s.std:.1f}\t{s.count}")
    return EXIT_OK


def cmd_train(args):
    file_values = load_config_file(args.config) if args.config else {}
    cfg = resolve_config(file_values, _flag_values(args))
    # validate everything before any work starts
    manifest = _require_file(cfg.manifest, "manifest")
    resume_path = _require_file(cfg.resume, "resume checkpoint") if cfg.resume else None
    train_cfg = cfg.train_config()
    model_cfg = cfg.model_config()
    out = _require_out_dir(cfg.out_dir)
    sys.stderr.write("# effective config\n" + cfg.dump())
    (out / "run.cfg").write_text(cfg.dump(), encoding="utf-8")

    pairs = load_pairs(manifest, ratio=cfg.scale_factor)
    if resume_path is not None:
        ckpt = load_checkpoint(resume_path)
        model = model_from_checkpoint(ckpt)
    else:
        ckpt = None
        model = build_model(model_cfg)
    result = fit(model, pairs, train_cfg, out_dir=out, resume=ckpt)
    write_history(result.history, out / "history.csv")
    if result.history:
        last = result.history[-1]
        print(f"epoch={last.epoch} train_loss={last.train_loss!r} lr={last.lr!r}")
    return EXIT_OK


def cmd_eval(args):
    pairs = load_pairs(_require_file(args.manifest, "--manifest"), ratio=args.scale_factor)
    if args.method == "model":
        model, stats = load_model(_require_file(args.checkpoint, "--checkpoint"))
        report = evaluate(model, pairs, stats=stats, bins=args.bins)
    else:
        report = evaluate(args.method, pairs, bins=args.bins)
    out = _require_out_dir(args.out_dir)
    path = out / f"report_{args.method}.csv"
    export_report(report, path)
    for key, value in report.scalars().items():
        print(f"{key}={value:.9g}")
    return EXIT_OK


def cmd_upscale(args):
    model, stats = load_model(_require_file(args.checkpoint, "--checkpoint"))
    grid = read_raster(_require_file(args.input, "--input"))
    if grid.has_nodata():
        raise DemsrError(f"{args.input}: grid contains nodata cells; the model is undefined on gaps")
    if args.output is None:
        raise UsageError("--output is required")
    factor = model.config.scale_factor
    pred = model_predictor(model, stats)(grid.values[None])[0]
    # same lower-left corner, finer cells
    out = replace(grid, values=pred, cell_size=grid.cell_size / factor)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    write_raster(out, args.output)
    log.info("upscaled %dx%d -> %dx%d", grid.nrows, grid.ncols, out.nrows, out.ncols)
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import THRESHOLD, run_suite

    results = run_suite(seeds=range(args.seeds), ops=args.ops)
    failed = []
    for op, (err, seconds) in results.items():
        status = "ok" if err < THRESHOLD else "FAIL"
        print(f"{op}\t{err:.3e}\t{seconds:.1f}s\t{status}")
        if err >= THRESHOLD:
            failed.append(op)
    if failed:
        sys.stderr.write(f"gradient check failed for: {', '.join(failed)}\n")
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="demsr", description="16x DEM super-resolution toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scale-factor", type=int, default=16)

    p = sub.add_parser("synth", help="write synthetic HR/LR tile pairs and a manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=400)
    p.add_argument("--tile-size", type=int, default=400)
    p.add_argument("--roughness", type=float, default=0.5)
    p.add_argument("--format", choices=("demr", "asc"), default="demr")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tile", help="tile an aligned HR/LR raster pair and drop nodata pairs")
    p.add_argument("--hr", required=True)
    p.add_argument("--lr", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--tile-size", type=int, default=400)
    common(p)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("stats", help="print elevation statistics of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--side", choices=("hr", "lr"), default="hr")
    common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="key=value run configuration file")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or an interpolation baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", choices=("model", "bicubic", "bilinear"), default="model")
    p.add_argument("--checkpoint")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--bins", type=int, default=50)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("upscale", help="16x upscale a single raster")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_upscale)

    p = sub.add_parser("gradcheck", help="finite-difference verification of every op")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--ops", nargs="*", default=None)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_cap():
    value = os.environ.get("DEMSR_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"DEMSR_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"DEMSR_THREADS must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        with _thread_cap():
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(f"demsr {args.command}: {exc}\n")
        return EXIT_USAGE
    except (FormatError, ParseError, OSError) as exc:
        sys.stderr.write(f"demsr {args.command}: {exc}\n")
        return EXIT_IO
    except DemsrError as exc:
        sys.stderr.write(f"demsr {args.command}: {exc}\n")
        return EXIT_FAIL
    except ValueError as exc:
        sys.stderr.write(f"demsr {args.command}: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
