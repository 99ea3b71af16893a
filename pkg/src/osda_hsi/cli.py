"""Command-line driver: synth | train | eval | gradcheck.

Exit codes: 0 ok, 1 numeric failure (divergence, failed gradient check),
2 usage or configuration error (bad flags, missing or malformed files).

Every subcommand prints a single JSON document on stdout. ``train`` also
writes a JSON-lines log with one loss report per optimizer step.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data, gradcheck
from .encoder import ArchConfig
from .pipeline import prepare, prepare_target
from .trainer import DivergenceError, TrainConfig, TrainState, infer, load_state, save_state, train

log = logging.getLogger("osda_hsi")

# Class i (1-based) is PALETTE[(i - 1) % 12]; Unknown is black.
PALETTE = (
    (230, 25, 75),    # red
    (60, 180, 75),    # green
    (255, 225, 25),   # yellow
    (0, 130, 200),    # blue
    (245, 130, 48),   # orange
    (145, 30, 180),   # purple
    (70, 240, 240),   # cyan
    (240, 50, 230),   # magenta
    (210, 245, 60),   # lime
    (250, 190, 212),  # pink
    (0, 128, 128),    # teal
    (170, 110, 40),   # brown
)
UNKNOWN_RGB = (0, 0, 0)

FILES = {
    "source_cube": "source.hsc",
    "source_labels": "source.hsl",
    "target_cube": "target.hsc",
    "target_labels": "target.hsl",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # training
    alpha: float = 10.0
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    k: int = 2
    patch: int = 7
    source_per_class: int | None = 8
    # paths
    source_cube: str | None = None
    source_labels: str | None = None
    target_cube: str | None = None
    target_labels: str | None = None
    out: str = "run"
    checkpoint: str | None = None
    # synthesis
    bands: int = 32
    size: int = 64
    shift: float = 0.3
    known_classes: int = 4
    unknown_classes: int = 1

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def meta(self) -> data.DatasetMeta:
        return data.DatasetMeta(self.known_classes, self.unknown_classes, self.seed)


# ---------------------------------------------------------------- PPM


def class_map_rgb(predictions: np.ndarray, height: int, width: int) -> np.ndarray:
    """(H, W, 3) uint8 image from row-major per-pixel predictions."""
    pred = np.asarray(predictions, dtype=np.int64).reshape(height, width)
    lut = np.array(PALETTE, dtype=np.uint8)
    rgb = np.zeros((height, width, 3), dtype=np.uint8)
    known = (pred != data.UNKNOWN_SENTINEL) & (pred > 0)
    rgb[known] = lut[(pred[known] - 1) % len(PALETTE)]
    rgb[pred == data.UNKNOWN_SENTINEL] = UNKNOWN_RGB
    return rgb


def write_ppm(rgb: np.ndarray, path: str | Path) -> None:
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4 or parts[2] != b"255":
        raise data.FormatError("not a P6 file with maxval 255", 0)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------- helpers


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} path not given")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _scenes(cfg: RunConfig, need_source: bool = True):
    """Load the file-backed scenes, or synthesize them when no paths are set."""
    if all(getattr(cfg, k) is None for k in FILES):
        (sc, sl), (tc, tl) = data.synth_pair(cfg.meta(), cfg.shift, cfg.bands, cfg.size, cfg.patch)
        return sc, sl, tc, tl
    for key in FILES:
        given = getattr(cfg, key)
        if given is not None and not Path(given).is_file():
            raise ConfigError(f"{key.replace('_', ' ')} not found: {given}")
    sc = sl = tl = None
    if need_source:
        sc = data.load_cube(_require(cfg.source_cube, "source cube"))
        sl = data.load_labels(_require(cfg.source_labels, "source labels"))
    tc = data.load_cube(_require(cfg.target_cube, "target cube"))
    if cfg.target_labels is not None:
        tl = data.load_labels(_require(cfg.target_labels, "target labels"))
    return sc, sl, tc, tl


def _class_counts(labels: data.LabelMap) -> dict[str, int]:
    values, counts = np.unique(labels.labels, return_counts=True)
    names = {data.UNKNOWN_SENTINEL: "unknown", 0: "unlabeled"}
    return {names.get(int(v), str(int(v))): int(c) for v, c in zip(values, counts)}


# ---------------------------------------------------------------- subcommands


def cmd_synth(cfg: RunConfig) -> int:
    (sc, sl), (tc, tl) = data.synth_pair(cfg.meta(), cfg.shift, cfg.bands, cfg.size, cfg.patch)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data.save_cube(sc, out / FILES["source_cube"])
    data.save_labels(sl, out / FILES["source_labels"])
    data.save_cube(tc, out / FILES["target_cube"])
    data.save_labels(tl, out / FILES["target_labels"])
    _emit({
        "files": {k: str(out / v) for k, v in FILES.items()},
        "bands": cfg.bands,
        "size": cfg.size,
        "shift": cfg.shift,
        "seed": cfg.seed,
        "source_counts": _class_counts(sl),
        "target_counts": _class_counts(tl),
    })
    return 0


def cmd_train(cfg: RunConfig) -> int:
    tcfg = cfg.train_config()
    sc, sl, tc, tl = _scenes(cfg)
    prep = prepare(sc, sl, tc, tl, tcfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    state = TrainState.create(tcfg.seed, ArchConfig(bands=prep.bands, n_classes=prep.n_classes))
    start = time.perf_counter()
    train(state, prep.source, prep.target, tcfg, log_path=out / "train_log.jsonl")
    ckpt = Path(cfg.checkpoint or out / "checkpoint")
    save_state(state, tcfg, ckpt)
    mean, std = prep.stats
    (ckpt / "band_stats.json").write_text(json.dumps({"mean": mean.tolist(), "std": std.tolist()}))
    last = state.history[-1]
    _emit({
        "checkpoint": str(ckpt),
        "log": str(out / "train_log.jsonl"),
        "epochs": state.epoch,
        "steps": len(state.history),
        "final": last.to_json(),
        "seconds": round(time.perf_counter() - start, 1),
    })
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    ckpt = Path(cfg.checkpoint or Path(cfg.out) / "checkpoint")
    if not (ckpt / "aligned.json").is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    state, tcfg = load_state(ckpt)
    # inference-time choices may be overridden on the command line
    tcfg = dataclasses.replace(tcfg, k=cfg.k)
    stats_path = ckpt / "band_stats.json"
    if not stats_path.is_file():
        raise ConfigError(f"band statistics missing from checkpoint: {stats_path}")
    stats = json.loads(stats_path.read_text())
    _, _, tc, tl = _scenes(cfg, need_source=False)
    if tc.bands != state.aligned.config.bands:
        raise ConfigError(f"target has {tc.bands} bands, checkpoint expects {state.aligned.config.bands}")
    target, truth = prepare_target(tc, tl, (stats["mean"], stats["std"]), tcfg.patch)
    result = infer(state, target, tcfg, truth=truth)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(class_map_rgb(result.predictions, tc.height, tc.width), out / "map.ppm")
    (out / "gmm.json").write_text(result.gmm.dumps())
    summary = {"map": str(out / "map.ppm"), "unknown_fraction": float(result.unknown.mean())}
    if result.metrics is not None:
        (out / "metrics.json").write_text(result.metrics.dumps() + "\n")
        m = result.metrics.to_json()
        summary["metrics"] = str(out / "metrics.json")
        summary["percent"] = {
            "per_class": {c: round(100 * v, 1) for c, v in m["per_class"].items()},
            **{k: None if m[k] is None else round(100 * m[k], 1) for k in ("os_star", "unk", "hos")},
        }
    _emit(summary)
    return 0


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    results = gradcheck.run_all(seeds=args.seeds, tol_override=args.tol)
    failed = [r["op"] for r in results if not r["pass"]]
    _emit({"results": results, "failed": failed, "seconds": round(time.perf_counter() - start, 1)})
    return 1 if failed else 0


# ---------------------------------------------------------------- parsing


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of run settings; flags override it")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        # annotations are strings here ("float", "int | None", ...)
        kind = {"float": float, "int": int, "int | None": _optional_int}.get(f.type, str)
        p.add_argument(flag, dest=f.name, type=kind, default=None)


def _optional_int(text: str):
    return None if text.lower() in ("none", "all") else int(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osda-hsi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("synth", "write a synthetic source/target scene pair"),
        ("train", "train the aligned encoder and save a checkpoint"),
        ("eval", "open-set inference, metrics and a PPM class map"),
    ):
        _add_run_flags(sub.add_parser(name, help=help_))
    g = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--tol", type=float, default=None, help="override every tolerance")
    return parser


def resolve_config(args) -> RunConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            values = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        known = {f.name for f in fields(RunConfig)}
        extra = set(values) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    cfg = RunConfig(**values)
    cfg.train_config()  # validates
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        cfg = resolve_config(args)
        return {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval}[args.command](cfg)
    except (DivergenceError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 1
    except data.FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
