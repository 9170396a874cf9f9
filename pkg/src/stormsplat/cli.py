"""``stormsplat`` command line: synth, flow, reconstruct, train, predict, eval, render.

Exit status is 0 on success, 1 for invalid input or usage, 2 for runtime failures.
Every run writes a manifest (resolved config, input/output hashes, seed, timing)
next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, _accel
from .constraints import FlowConfig, FlowGrid, pseudo3d_flow
from .gaussians import GaussianSequence, read_gseq, write_gseq
from .metrics import CSI_POOL, CSI_THRESHOLDS, evaluate
from .model import ModelConfig, load_checkpoint, predict, save_checkpoint, train
from .reconstruct import FlowSet, ReconConfig, reconstruct, rendered_sequence
from .renderer import DEFAULT_CUTOFF, volume_slice
from .volume import (
    Channel,
    FormatError,
    SynthSpec,
    read_sequence,
    read_volume,
    synth_sequence,
    write_sequence,
    write_volume,
)

log = logging.getLogger("stormsplat")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


# ------------------------------------------------------------------ helpers


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _expand(paths) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out.extend(sorted(q for q in p.rglob("*") if q.is_file() and not q.name.endswith("manifest.json")))
        elif p.exists():
            out.append(p)
    return out


def write_manifest(where: Path, command: str, config: dict, inputs, outputs, seed, started: float) -> Path:
    where = Path(where)
    target = where / "manifest.json" if where.is_dir() else where.with_name(where.name + ".manifest.json")
    manifest = {
        "subcommand": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256(p) for p in _expand(inputs)},
        "outputs": {str(p): sha256(p) for p in _expand(outputs)},
        "wall_clock_s": round(time.time() - started, 3),
        "backend": _accel.backend_name(),
    }
    target.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return target


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_options(parser, cls, group_title: str, defaults=None):
    """One option per dataclass field; the help text shows the default."""
    grp = parser.add_argument_group(group_title, "every key is also accepted in the --config JSON")
    defaults = defaults or {}
    for f in dataclasses.fields(cls):
        default = defaults.get(f.name, f.default)
        ftype = type(default) if default is not None else str
        if ftype is bool:
            grp.add_argument(_flag(f.name), dest=f"cfg_{f.name}", type=_parse_bool, default=None,
                             metavar="BOOL", help=f"(default: {default})")
        else:
            grp.add_argument(_flag(f.name), dest=f"cfg_{f.name}", type=ftype, default=None,
                             help=f"(default: {default})")


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in {"1", "true", "yes", "on"}:
        return True
    if t in {"0", "false", "no", "off"}:
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _resolve(cls, args, base: dict) -> dict:
    cfg = dict(base)
    if getattr(args, "config", None):
        loaded = json.loads(Path(args.config).read_text())
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        cfg.update(loaded)
    for f in dataclasses.fields(cls):
        val = getattr(args, f"cfg_{f.name}", None)
        if val is not None:
            cfg[f.name] = val
    return cfg


def _common(p):
    p.add_argument("--threads", type=int, default=None,
                   help="cap on data-parallel workers (default: $STORMSPLAT_THREADS or all cores)")
    p.add_argument("-v", "--verbose", action="store_true")


# ------------------------------------------------------------------ commands

_SYNTH_KEYS = {f.name: f.default if f.default is not dataclasses.MISSING else "[]"
               for f in dataclasses.fields(SynthSpec)}


def cmd_synth(args) -> int:
    started = time.time()
    raw = json.loads(Path(args.spec).read_text())
    dims = tuple(args.dims or raw.get("dims") or (16, 32, 32))
    spec = SynthSpec.from_json(json.dumps(raw))
    if args.seed is not None:
        spec.seed = args.seed
    seq, flows = synth_sequence(spec, args.frames, dims)
    out = Path(args.out)
    write_sequence(seq, out)
    if args.true_flow:
        for k, fl in enumerate(flows):
            write_volume(FlowGrid(fl).to_volume(k), out / f"trueflow_{k:04d}.rvol")
    cfg = {"spec": dataclasses.asdict(spec), "frames": args.frames, "dims": list(dims)}
    write_manifest(out, "synth", cfg, [args.spec], [out], spec.seed, started)
    return 0


def _flow_paths(directory: Path, k: int):
    return directory / f"flowfwd_{k:04d}.rvol", directory / f"flowbwd_{k:04d}.rvol"


def compute_or_load_flows(seq, fc: FlowConfig, directory: Path | None) -> FlowSet:
    """Per-pair flows, reusing cached files whose recorded config matches."""
    fwd, bwd = [], []
    stamp = json.dumps(dataclasses.asdict(fc), sort_keys=True)
    cache_meta = directory / "flow_config.json" if directory else None
    reuse = bool(cache_meta and cache_meta.exists() and cache_meta.read_text() == stamp)
    for k in range(len(seq) - 1):
        pf, pb = _flow_paths(directory, k) if directory else (None, None)
        if reuse and pf.exists() and pb.exists():
            fwd.append(FlowGrid.from_volume(read_volume(pf)))
            bwd.append(FlowGrid.from_volume(read_volume(pb)))
            continue
        f = pseudo3d_flow(seq[k], seq[k + 1], fc)
        b = pseudo3d_flow(seq[k + 1], seq[k], fc)
        if directory:
            directory.mkdir(parents=True, exist_ok=True)
            write_volume(f.to_volume(k), pf)
            write_volume(b.to_volume(k), pb)
        fwd.append(f)
        bwd.append(b)
    if directory:
        cache_meta.write_text(stamp)
    return FlowSet(fwd, bwd)


def cmd_flow(args) -> int:
    started = time.time()
    cfg = FlowConfig(**_resolve(FlowConfig, args, {}))
    seq = read_sequence(args.input)
    out = Path(args.out)
    compute_or_load_flows(seq, cfg, out)
    write_manifest(out, "flow", dataclasses.asdict(cfg), [args.input], [out], None, started)
    return 0


def _jsonl(path):
    if not path:
        return None, None
    fh = open(path, "w")

    def logger(rec):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()

    return logger, fh


def cmd_reconstruct(args) -> int:
    started = time.time()
    base = ReconConfig.desk().to_dict() if args.preset == "desk" else ReconConfig().to_dict()
    cfg = ReconConfig.from_dict(_resolve(ReconConfig, args, base))
    seq = read_sequence(args.input)
    flows = None
    if cfg.lambda_local or not cfg.skip_backward:
        flows = compute_or_load_flows(seq, cfg.flow_config(), Path(args.flows) if args.flows else None)
    logger, fh = _jsonl(args.log)
    try:
        result = reconstruct(seq, cfg, flows=flows, logger=logger, checkpoint=args.checkpoint, resume=args.resume)
    finally:
        if fh:
            fh.close()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_gseq(result.sequence, out)
    if result.incidents:
        log.warning("%d optimizer steps skipped for non-finite gradients", len(result.incidents))
    outputs = [out, out.with_name(out.stem + ".meta.json")]
    write_manifest(out, "reconstruct", cfg.to_dict(), [args.input], outputs, cfg.seed, started)
    return 0


def _gseq_files(path) -> list[Path]:
    p = Path(path)
    files = sorted(p.glob("*.gseq")) if p.is_dir() else [p]
    if not files:
        raise FileNotFoundError(f"no .gseq files in {path}")
    return files


def cmd_train(args) -> int:
    started = time.time()
    files = _gseq_files(args.data)
    seqs = [read_gseq(f) for f in files]
    base = ModelConfig(n_features=seqs[0].anchor.n_features).to_dict()
    resolved = _resolve(ModelConfig, args, base)
    cfg = ModelConfig.from_dict(resolved)
    logger, fh = _jsonl(args.log)
    try:
        res = train(seqs, cfg, logger=logger)
    finally:
        if fh:
            fh.close()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.params, cfg, out)
    write_manifest(out, "train", cfg.to_dict(), files, [out], cfg.seed, started)
    return 0


def cmd_predict(args) -> int:
    started = time.time()
    params, cfg = load_checkpoint(args.model)
    obs = read_gseq(args.obs)
    if len(obs) < cfg.t_in:
        raise UsageError(f"observation has {len(obs)} frames, model needs t_in = {cfg.t_in}")
    pred = predict([obs.frame(t) for t in range(cfg.t_in)], params, cfg)
    pred = GaussianSequence(pred.anchor, pred.deltas, obs.dims, obs.channel_names)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_gseq(pred, out)
    write_manifest(out, "predict", cfg.to_dict(), [args.model, args.obs],
                   [out, out.with_name(out.stem + ".meta.json")], cfg.seed, started)
    return 0


def cmd_render(args) -> int:
    started = time.time()
    gseq = read_gseq(args.gseq)
    dims = tuple(args.dims) if args.dims else gseq.dims
    if dims is None:
        raise UsageError("grid dims unknown: pass --dims D H W")
    names = gseq.channel_names or tuple(f"ch{k}" for k in range(gseq.anchor.n_features))
    chans = tuple(Channel(n, "", bool(nn)) for n, nn in zip(names, gseq.anchor.nonneg))
    if args.format != "rvol" and args.range is None:
        raise UsageError("image output needs --range LO HI for the value-to-gray mapping")
    if args.range is not None and not args.range[1] > args.range[0]:
        raise UsageError("--range needs LO < HI")
    vols = rendered_sequence(gseq, dims, args.cutoff, chans)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, v in enumerate(vols[args.skip:]):
        if args.format == "rvol":
            write_volume(v, out / f"frame_{k:04d}.rvol")
            continue
        for axis, index in _slice_selection(args.axis, dims):
            img = to_gray(volume_slice(v.primary, axis, index), args.range[0], args.range[1], args.bits)
            name = out / f"frame_{k:04d}_{axis}{index:03d}.{args.format}"
            write_image(img, name, args.bits)
    cfg = {"cutoff": args.cutoff, "dims": list(dims), "skip": args.skip, "format": args.format,
           "axis": args.axis, "bits": args.bits, "range": args.range}
    write_manifest(out, "render", cfg, [args.gseq], [out], None, started)
    return 0


def _slice_selection(axis: str, dims):
    D, H, W = dims
    n = {"x": W, "y": H, "z": D}
    axes = ("x", "y", "z") if axis == "all" else (axis,)
    return [(a, i) for a in axes for i in range(n[a])]


def to_gray(img: np.ndarray, lo: float, hi: float, bits: int) -> np.ndarray:
    """Linear map of [lo, hi] onto [0, 2**bits - 1], clipped and rounded half to even."""
    top = (1 << bits) - 1
    scaled = np.clip((np.asarray(img, float) - lo) / (hi - lo), 0.0, 1.0) * top
    return np.rint(scaled).astype(np.uint8 if bits == 8 else np.uint16)


def write_image(img: np.ndarray, path: Path, bits: int) -> None:
    if path.suffix == ".pgm":
        rows, cols = img.shape
        header = f"P5\n{cols} {rows}\n{(1 << bits) - 1}\n".encode()
        # PGM stores 16-bit samples big-endian
        body = img.astype(">u2").tobytes() if bits == 16 else img.tobytes()
        path.write_bytes(header + body)
        return
    try:
        from PIL import Image
    except ImportError as e:  # pragma: no cover - depends on the optional extra
        raise RuntimeError("PNG output needs Pillow (pip install stormsplat[png])") from e
    Image.fromarray(img).save(path)


def cmd_eval(args) -> int:
    started = time.time()
    pred = read_sequence(args.pred).frames[args.pred_start:]
    truth = read_sequence(args.truth).frames[args.truth_start:]
    if len(pred) != len(truth):
        raise UsageError(f"frame count mismatch: {len(pred)} predicted frames vs {len(truth)} truth frames")
    report = evaluate(pred, truth, args.data_range, tuple(args.thresholds), args.pool)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(out)
    outputs = [out]
    if args.csv:
        report.to_csv(args.csv)
        outputs.append(Path(args.csv))
    cfg = {"thresholds": list(args.thresholds), "pool": args.pool, "data_range": report.data_range,
           "pred_start": args.pred_start, "truth_start": args.truth_start}
    write_manifest(out, "eval", cfg, [args.pred, args.truth], outputs, None, started)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stormsplat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"stormsplat {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    synth_keys = ", ".join(f"{k} (default: {v})" for k, v in _SYNTH_KEYS.items())
    p = sub.add_parser("synth", help="generate a synthetic blob storm sequence",
                       description=f"Spec JSON keys: {synth_keys}, dims (default: [16, 32, 32]). "
                                   "Blob keys: center, sigma (default: [3, 3, 2]), amplitude (default: 50), "
                                   "velocity (default: [0, 0, 0]), growth (default: 0), "
                                   "dissipation_frame (default: none).")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=25, help="(default: 25)")
    p.add_argument("--dims", type=int, nargs=3, metavar=("D", "H", "W"), default=None)
    p.add_argument("--seed", type=int, default=None, help="override the spec's noise seed")
    p.add_argument("--true-flow", action="store_true", help="also write generator flows as trueflow_*.rvol")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("flow", help="pseudo-3D flow for every consecutive frame pair (cached)")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_dataclass_options(p, FlowConfig, "flow config")
    _common(p)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("reconstruct", help="bidirectional Gaussian reconstruction of a sequence")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--preset", choices=("desk", "full"), default="desk",
                   help="base defaults before --config and flags (default: desk)")
    p.add_argument("--flows", help="flow cache directory (read if valid, written otherwise)")
    p.add_argument("--log", help="progress log, one JSON object per line")
    p.add_argument("--checkpoint", help="checkpoint file written every checkpoint_every iterations")
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint if it exists")
    _add_dataclass_options(p, ReconConfig, "reconstruction config (desk preset defaults)",
                           ReconConfig.desk().to_dict())
    _common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", help="train the forecasting model on .gseq files")
    p.add_argument("--data", required=True, help=".gseq file or directory of them")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--log", help="loss history, one JSON object per line")
    _add_dataclass_options(p, ModelConfig, "model config")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="forecast t_out frames from the first t_in frames of a .gseq")
    p.add_argument("--model", required=True)
    p.add_argument("--obs", required=True)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predicted volumes against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--csv", help="per-frame curves as CSV")
    p.add_argument("--pred-start", type=int, default=0, help="(default: 0)")
    p.add_argument("--truth-start", type=int, default=0, help="(default: 0)")
    p.add_argument("--data-range", type=float, default=None, help="(default: truth range)")
    p.add_argument("--thresholds", type=float, nargs="+", default=list(CSI_THRESHOLDS),
                   help=f"CSI thresholds (default: {' '.join(f'{t:g}' for t in CSI_THRESHOLDS)})")
    p.add_argument("--pool", type=int, default=CSI_POOL, help=f"(default: {CSI_POOL})")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render every frame of a .gseq onto its voxel grid")
    p.add_argument("--gseq", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=int, nargs=3, metavar=("D", "H", "W"), default=None)
    p.add_argument("--cutoff", type=float, default=DEFAULT_CUTOFF, help=f"(default: {DEFAULT_CUTOFF})")
    p.add_argument("--skip", type=int, default=0, help="leading frames to leave out (default: 0)")
    p.add_argument("--format", choices=("rvol", "pgm", "png"), default="rvol",
                   help="rvol volumes, or grayscale slices of the primary channel (default: rvol)")
    p.add_argument("--axis", choices=("x", "y", "z", "all"), default="z", help="slice axis for images (default: z)")
    p.add_argument("--bits", type=int, choices=(8, 16), default=8, help="gray depth for images (default: 8)")
    p.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"), default=None,
                   help="values mapped linearly to black..white, clipped outside (required for images)")
    _common(p)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _accel.set_threads(args.threads)
    try:
        return args.func(args)
    except (UsageError, FormatError, ValueError, FileNotFoundError, json.JSONDecodeError, TypeError) as e:
        print(f"stormsplat {args.command}: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        print(f"stormsplat {args.command}: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
