"""Command-line entry point: ``tracespace {synth,forge,train,sample,eval}``.

Exit status: 0 on success, 1 on usage or validation errors, 2 on runtime and
IO errors. Logs are JSON lines on stderr. Every artifact directory receives a
``provenance.json`` describing how its contents were produced.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("tracespace")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

_STD_ATTRS = set(vars(logging.LogRecord("", 0, "", 0, "", (), None))) | {"message", "asctime"}


class JsonFormatter(logging.Formatter):
    def format(self, record):
        out = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        for k, v in record.__dict__.items():
            if k not in _STD_ATTRS:
                out[k] = v
        if record.exc_info:
            out["exc"] = self.formatException(record.exc_info)
        return json.dumps(out, sort_keys=True, default=str)


def setup_logging(level: str = "info") -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root.addHandler(handler)
    root.setLevel(level.upper())


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(suppress: bool = False) -> argparse.ArgumentParser:
    # subcommand copies suppress their defaults so flags given before the subcommand survive
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g.add_argument("--seed", type=int, default=dflt(None), help="global seed (default: 0, or the config's seed)")
    g.add_argument("--log-level", default=dflt("info"), choices=["debug", "info", "warning", "error"],
                   help="log verbosity (default: info)")
    g.add_argument("--threads", type=int, default=dflt(None),
                   help="cap on BLAS threads (default: all cores; use 1 for bit-reproducible runs)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tracespace", description=__doc__.splitlines()[0], parents=[_common()])
    common = _common(suppress=True)
    parser.add_argument("--version", action="version", version=f"tracespace {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{synth,forge,train,sample,eval}", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic benchmark suite",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--episodes", type=int, default=16, help="number of episodes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--families", default="linear-transport,arc-transport,pick-place,sweep",
                   help="comma-separated motion families, cycled over episodes")
    p.add_argument("--camera", default="static", help="camera path(s), comma-separated")
    p.add_argument("--episode-len", type=int, default=32, help="frames per episode")

    p = sub.add_parser("forge", parents=[common], help="turn raw episodes into trace samples",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--input", required=True, help="directory of raw episodes")
    p.add_argument("--output", required=True, help="output directory of samples")
    p.add_argument("--horizon", type=int, default=32, help="increments per trace (L)")
    p.add_argument("--grid", default="20x20", help="keypoint grid as ROWSxCOLS")
    p.add_argument("--motion-threshold", type=float, default=0.5, help="px per frame")
    p.add_argument("--min-chunk", type=int, default=8, help="minimum frames per event chunk")
    p.add_argument("--blur-sigma", type=float, default=7.0, help="depth-ratio blur sigma (px)")

    p = sub.add_parser("train", parents=[common], help="train a trace model",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--data", required=True, help="directory of forged samples")
    p.add_argument("--config", default=None, help="JSON file with training and model keys")
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("sample", parents=[common], help="sample a trace for one observation",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--obs", required=True, help="sample directory holding observation.png and depth.f32")
    p.add_argument("--instruction", default=None, help="instruction (default: the sample's first)")
    p.add_argument("--steps", type=int, default=100, help="Euler steps")
    p.add_argument("--guidance", type=float, default=1.0, help="classifier-free guidance scale")
    p.add_argument("--out", required=True, help="output trace.f32 path")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a benchmark suite",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--bench", required=True, help="benchmark directory with manifest.json")
    p.add_argument("--out", default="report.json", help="report path")
    p.add_argument("--steps", type=int, default=100, help="Euler steps")
    p.add_argument("--guidance", type=float, default=1.0, help="classifier-free guidance scale")
    return parser


# --- provenance ----------------------------------------------------------------------------------


def write_provenance(directory, artifact: str, command: str, config: dict, inputs: dict) -> None:
    """Merge an artifact record into ``directory/provenance.json`` (no timestamps or absolute paths)."""
    from . import io

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / "provenance.json"
    doc = io.load_json(path) if path.exists() else {"tool": "tracespace", "tool_version": __version__,
                                                    "artifacts": {}}
    doc["tool_version"] = __version__
    doc["artifacts"][artifact] = {"command": command, "config": config,
                                  "inputs": {name: digest for name, digest in sorted(inputs.items())}}
    io.dump_json(path, doc)


def parse_grid(text: str) -> tuple:
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"--grid: expected ROWSxCOLS, got {text!r}") from None
    if rows < 1 or cols < 1:
        raise ValueError(f"--grid: dimensions must be positive, got {text!r}")
    return rows, cols


def _seed(args, fallback: int = 0) -> int:
    return fallback if args.seed is None else args.seed


# --- subcommands ---------------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synth import CAMERA_PATHS, FAMILIES, gen_benchmark_suite

    families = tuple(s for s in args.families.split(",") if s)
    cams = tuple(s for s in args.camera.split(",") if s)
    for f in families:
        if f not in FAMILIES:
            raise ValueError(f"--families: unknown family {f!r} (choose from {', '.join(FAMILIES)})")
    for c in cams:
        if c not in CAMERA_PATHS:
            raise ValueError(f"--camera: unknown camera path {c!r} (choose from {', '.join(CAMERA_PATHS)})")
    if args.episodes < 1:
        raise ValueError("--episodes must be >= 1")
    if args.episode_len < 2:
        raise ValueError("--episode-len must be >= 2")
    seed = _seed(args)
    config = {"episodes": args.episodes, "families": list(families), "camera_paths": list(cams),
              "episode_len": args.episode_len, "seed": seed}
    log.info("resolved config", extra={"command": "synth", "config": config})
    gen_benchmark_suite(args.out, args.episodes, seed, families, cams, episode_len=args.episode_len)
    write_provenance(args.out, ".", "synth", config, {})
    return EXIT_OK


def cmd_forge(args) -> int:
    from .core import GridSpec
    from .forge import ForgeConfig, forge_directory
    from .io import tree_sha256

    rows, cols = parse_grid(args.grid)
    cfg = ForgeConfig(horizon=args.horizon, grid=GridSpec(rows, cols),
                      motion_threshold=args.motion_threshold, min_chunk_len=args.min_chunk,
                      blur_sigma=args.blur_sigma)
    config = {"horizon": args.horizon, "grid_rows": rows, "grid_cols": cols,
              "motion_threshold": args.motion_threshold, "min_chunk_len": args.min_chunk,
              "blur_sigma": args.blur_sigma}
    log.info("resolved config", extra={"command": "forge", "config": config})
    if not Path(args.input).is_dir():
        raise FileNotFoundError(f"--input: no such directory: {args.input}")
    names = forge_directory(args.input, args.output, cfg)
    log.info("forged samples", extra={"count": len(names)})
    write_provenance(args.output, ".", "forge", config, {"input": tree_sha256(args.input)})
    return EXIT_OK


def cmd_train(args) -> int:
    from . import io
    from .flow import parse_config, train

    blob = {}
    if args.config:
        try:
            blob = io.load_json(args.config)
        except json.JSONDecodeError as e:
            raise ValueError(f"--config: invalid JSON: {e}") from e
        if not isinstance(blob, dict):
            raise ValueError("--config: expected a JSON object")
    if args.seed is not None:
        blob["seed"] = args.seed
    tc, model_kw = parse_config(blob)
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"--data: no such directory: {args.data}")
    samples = io.load_dataset(data_dir)
    if not samples:
        raise FileNotFoundError(f"--data: no samples found in {args.data}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt = train(samples, tc, checkpoint_path=out, **model_kw)
    config = {"train": tc.to_dict(), "model": ckpt.model.to_dict(), "n_params": ckpt.n_params}
    log.info("resolved config", extra={"command": "train", "config": config})
    write_provenance(out.parent, out.name, "train", config, {"data": io.tree_sha256(data_dir)})
    return EXIT_OK


def cmd_sample(args) -> int:
    import numpy as np

    from . import io
    from .flow import Checkpoint, predict_trace

    if args.steps < 1:
        raise ValueError("--steps must be >= 1")
    if args.guidance < 0:
        raise ValueError("--guidance must be >= 0")
    ckpt = Checkpoint.load(args.ckpt)
    obs = io.read_sample(args.obs)
    instruction = args.instruction if args.instruction is not None else obs.instructions[0]
    seed = _seed(args)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), 41])))
    trace = predict_trace(ckpt, obs.rgb, obs.depth, instruction, obs.trace.grid, args.steps, args.guidance, rng,
                          camera=obs.trace.camera)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_trace_f32(out, trace.points)
    config = {"instruction": instruction, "steps": args.steps, "guidance": args.guidance, "seed": seed}
    log.info("resolved config", extra={"command": "sample", "config": config})
    write_provenance(out.parent, out.name, "sample", config,
                     {"ckpt": io.file_sha256(args.ckpt), "obs": io.tree_sha256(args.obs)})
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import io
    from .evaluate import evaluate_suite
    from .flow import Checkpoint

    if args.steps < 1:
        raise ValueError("--steps must be >= 1")
    ckpt = Checkpoint.load(args.ckpt)
    bench = Path(args.bench)
    if not (bench / "manifest.json").exists():
        raise FileNotFoundError(f"--bench: no manifest.json in {args.bench}")
    seed = _seed(args)
    report = evaluate_suite(ckpt, bench, args.out, args.steps, args.guidance, seed)
    config = {"steps": args.steps, "guidance": args.guidance, "seed": seed}
    log.info("evaluation", extra={"success_rate": report.success_rate, "n_episodes": report.n_episodes,
                                  "failures": len(report.failures)})
    out = Path(args.out)
    write_provenance(out.parent, out.name, "eval", config,
                     {"ckpt": io.file_sha256(args.ckpt), "bench": io.tree_sha256(bench)})
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "forge": cmd_forge, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval}


def _limit_threads(n):
    if n is None:
        return None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("tracespace: a subcommand is required (synth, forge, train, sample, eval)")
        setup_logging(args.log_level)
        limiter = _limit_threads(args.threads)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    from .errors import CheckpointError, FormatError, TraceSpaceError

    try:
        return COMMANDS[args.command](args)
    except (CheckpointError, FormatError, OSError) as e:
        log.error(f"{args.command}: {e}", extra={"kind": type(e).__name__})
        return EXIT_RUNTIME
    except TraceSpaceError as e:
        log.error(f"{args.command}: {e}", extra={"kind": type(e).__name__})
        return EXIT_RUNTIME
    except (ValueError, TypeError) as e:
        log.error(f"{args.command}: invalid input: {e}", extra={"kind": type(e).__name__})
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - last-resort runtime failure
        log.exception(f"{args.command}: unexpected failure: {e}")
        return EXIT_RUNTIME
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
