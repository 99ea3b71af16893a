"""Single-stage joint training of the aligned encoder and classifier, and
open-set inference with the frozen intrinsic encoder."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import nn
from .alignment import KernelConfig, LossReport, decoupled_loss
from .data import UNKNOWN_SENTINEL, PatchBatch, batch_iter
from .metrics import MetricsReport, compute_metrics
from .openset import GmmModel, consistency_scores, gmm_fit, unknown_mask

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
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

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 2")
        if not (self.lr > 0 and self.momentum >= 0 and self.weight_decay >= 0):
            raise ValueError("learning rate must be positive and momentum/decay non-negative")
        if self.k < 2:
            raise ValueError("K must be at least 2")
        if self.patch % 2 == 0:
            raise ValueError("patch size must be odd")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    aligned: enc.EncoderParams
    intrinsic: enc.EncoderParams
    epoch: int = 0
    history: list[LossReport] = field(default_factory=list)

    @classmethod
    def create(cls, seed: int, config: enc.ArchConfig) -> "TrainState":
        return cls(
            aligned=enc.init_encoder(seed, config, enc.Branch.ALIGNED),
            intrinsic=enc.init_encoder(seed, config, enc.Branch.INTRINSIC),
        )


def loss_and_grads(
    params: enc.EncoderParams,
    source: np.ndarray,
    labels: np.ndarray,
    target: np.ndarray | None,
    alpha: float,
    kernels: tuple[KernelConfig, KernelConfig] | None = None,
) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Total loss L_cls + alpha * (L_spe + L_spa) and its parameter gradients.

    Source and target go through the encoder as one batch. With alpha == 0
    the target is never touched. ``kernels`` pins the (spectral, spatial)
    bandwidths; by default both come from the median heuristic.
    """
    n_s = len(source)
    use_target = alpha > 0 and target is not None
    x = np.concatenate([source, target]) if use_target else source
    feats, cache = enc.encode(x, params, with_cache=True)
    fused_s = feats.fused[:n_s]
    logits, head_cache = enc.classify(fused_s, params)
    l_cls, _, dlogits = nn.softmax_cross_entropy(logits, labels)
    d_fused, g_head = nn.linear_backward(dlogits, head_cache)
    c_f = params.config.feature_dim
    d_spe = np.zeros_like(feats.spe)
    d_spa = np.zeros_like(feats.spa)
    d_spe[:n_s] = d_fused[:, :c_f]
    d_spa[:n_s] = d_fused[:, c_f:]
    l_spe = l_spa = 0.0
    if use_target:
        dl = decoupled_loss(feats.spe[:n_s], feats.spe[n_s:], feats.spa[:n_s], feats.spa[n_s:], *(kernels or (None, None)))
        l_spe, l_spa = dl.l_spe, dl.l_spa
        d_spe[:n_s] += alpha * dl.d_spe_s
        d_spe[n_s:] += alpha * dl.d_spe_t
        d_spa[:n_s] += alpha * dl.d_spa_s
        d_spa[n_s:] += alpha * dl.d_spa_t
    grads = enc.encode_backward(d_spe, d_spa, cache)
    grads["head.w"], grads["head.b"] = g_head["w"], g_head["b"]
    l_mmd = l_spe + l_spa
    report = LossReport(l_cls=l_cls, l_spe=l_spe, l_spa=l_spa, l_mmd=l_mmd, l_total=l_cls + alpha * l_mmd, alpha=alpha)
    return report, grads


def sgd_update(store: nn.ParamStore, grads: dict[str, np.ndarray], cfg: TrainConfig) -> None:
    """v <- m v + g + wd theta; theta <- theta - lr v."""
    for name, theta in store.params.items():
        v = store.velocity[name]
        v *= cfg.momentum
        v += grads[name] + cfg.weight_decay * theta
        theta -= cfg.lr * v


def train_step(state: TrainState, source: PatchBatch, target: PatchBatch, cfg: TrainConfig) -> LossReport:
    # overflow shows up as non-finite values, which are reported below
    with np.errstate(over="ignore", invalid="ignore"):
        report, grads = loss_and_grads(state.aligned, source.patches, source.labels, target.patches, cfg.alpha)
    for term in ("l_cls", "l_spe", "l_spa", "l_total"):
        if not math.isfinite(getattr(report, term)):
            raise DivergenceError(f"non-finite loss term {term}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
    state.aligned.store.zero_grad()
    state.aligned.store.accumulate(grads)
    sgd_update(state.aligned.store, state.aligned.store.grads, cfg)
    state.history.append(report)
    return report


def _epoch_seed(seed: int, epoch: int) -> int:
    return seed * 1_000_003 + epoch


def train(state: TrainState, source: PatchBatch, target: PatchBatch, cfg: TrainConfig, log_path: str | Path | None = None) -> TrainState:
    """Run ``cfg.epochs`` passes over the source set with mixed batches."""
    sink = open(log_path, "w") if log_path else None
    try:
        for _ in range(cfg.epochs):
            for sb, tb in batch_iter(source, target, cfg.batch_size, _epoch_seed(cfg.seed, state.epoch)):
                report = train_step(state, sb, tb, cfg)
                if sink:
                    sink.write(json.dumps({"epoch": state.epoch, **report.to_json()}) + "\n")
            log.debug("epoch %d: %s", state.epoch, state.history[-1])
            state.epoch += 1
    finally:
        if sink:
            sink.close()
    return state


@dataclass
class InferenceResult:
    predictions: np.ndarray  # class ids 1..C or UNKNOWN_SENTINEL
    scores: np.ndarray
    gmm: GmmModel
    unknown: np.ndarray
    metrics: MetricsReport | None


def infer(state: TrainState, target: PatchBatch, cfg: TrainConfig, truth: np.ndarray | None = None) -> InferenceResult:
    """Score targets with both branches, reject via the GMM, classify the rest."""
    fa = enc.encode_in_chunks(target.patches, state.aligned)
    fb = enc.encode_in_chunks(target.patches, state.intrinsic)
    scores = consistency_scores(fa.fused, fb.fused)
    gmm = gmm_fit(scores, k=cfg.k, seed=cfg.seed)
    unknown = unknown_mask(gmm, scores)
    logits, _ = enc.classify(fa.fused, state.aligned)
    labels = logits.argmax(axis=1) + 1
    predictions = np.where(unknown, UNKNOWN_SENTINEL, labels)
    metrics = None
    if truth is not None:
        metrics = compute_metrics(predictions, truth, state.aligned.config.n_classes)
    return InferenceResult(predictions, scores, gmm, unknown, metrics)


def save_state(state: TrainState, cfg: TrainConfig, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    extra = {"epoch": state.epoch, "train_config": cfg.to_json()}
    enc.save_params(state.aligned, directory / "aligned", extra)
    enc.save_params(state.intrinsic, directory / "intrinsic", extra)


def load_state(directory: str | Path) -> tuple[TrainState, TrainConfig]:
    directory = Path(directory)
    aligned, manifest = enc.load_params(directory / "aligned")
    intrinsic, _ = enc.load_params(directory / "intrinsic")
    cfg = TrainConfig(**manifest["train_config"])
    return TrainState(aligned=aligned, intrinsic=intrinsic, epoch=manifest["epoch"]), cfg
