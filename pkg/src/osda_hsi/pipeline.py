"""Glue from raw scenes to a trained state and open-set predictions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data
from .encoder import ArchConfig
from .trainer import InferenceResult, TrainConfig, TrainState, infer, train


@dataclass
class Prepared:
    source: data.PatchBatch
    target: data.PatchBatch
    truth: np.ndarray | None
    n_classes: int
    bands: int
    shape: tuple[int, int]
    stats: tuple[np.ndarray, np.ndarray]  # source band mean / std


def prepare_target(target_cube: data.HsiCube, target_labels: data.LabelMap | None, stats, patch: int):
    """Target patches on the source scale plus per-pixel truth (row-major)."""
    tgt = data.standardize_bands(target_cube, stats=stats)
    target = data.extract_patches(tgt, None, patch)
    truth = None
    if target_labels is not None:
        if target_labels.labels.shape != (tgt.height, tgt.width):
            raise ValueError("target label map does not match the target cube")
        truth = target_labels.labels[target.coords[:, 0], target.coords[:, 1]]
    return target, truth


def prepare(
    source_cube: data.HsiCube,
    source_labels: data.LabelMap,
    target_cube: data.HsiCube,
    target_labels: data.LabelMap | None,
    cfg: TrainConfig,
) -> Prepared:
    """Standardize both scenes with source band statistics and cut patches."""
    if source_cube.bands != target_cube.bands:
        raise ValueError(f"band counts differ: {source_cube.bands} vs {target_cube.bands}")
    stats = data.band_statistics(source_cube)
    src = data.standardize_bands(source_cube, stats=stats)
    source = data.extract_patches(src, source_labels, cfg.patch)
    source = data.sample_per_class(source, cfg.source_per_class, cfg.seed)
    target, truth = prepare_target(target_cube, target_labels, stats, cfg.patch)
    return Prepared(source, target, truth, source_labels.n_classes, src.bands, (target_cube.height, target_cube.width), stats)


def fit_and_predict(prep: Prepared, cfg: TrainConfig, log_path=None) -> tuple[TrainState, InferenceResult]:
    state = TrainState.create(cfg.seed, ArchConfig(bands=prep.bands, n_classes=prep.n_classes))
    train(state, prep.source, prep.target, cfg, log_path=log_path)
    return state, infer(state, prep.target, cfg, truth=prep.truth)


def synthetic_prepared(seed: int = 0, shift: float = 0.3, bands: int = 32, size: int = 64, known: int = 4, unknown: int = 1, cfg: TrainConfig | None = None) -> Prepared:
    cfg = cfg or TrainConfig(seed=seed)
    meta = data.DatasetMeta(known_classes=known, unknown_classes=unknown, seed=seed)
    (sc, sl), (tc, tl) = data.synth_pair(meta, shift, bands=bands, size=size, p=cfg.patch)
    return prepare(sc, sl, tc, tl, cfg)


def synthetic_benchmark(seed: int = 0, shift: float = 0.3, bands: int = 32, size: int = 64, known: int = 4, unknown: int = 1, cfg: TrainConfig | None = None):
    cfg = cfg or TrainConfig(seed=seed)
    return fit_and_predict(synthetic_prepared(seed, shift, bands, size, known, unknown, cfg), cfg)
