"""RBF-kernel maximum mean discrepancy and the per-modality alignment loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


class DegenerateSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    """RBF kernel; ``bandwidth=None`` selects the median heuristic per batch."""

    bandwidth: float | None = None

    def __post_init__(self):
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")


@dataclass
class LossReport:
    l_cls: float
    l_spe: float
    l_spa: float
    l_mmd: float
    l_total: float
    alpha: float

    def to_json(self) -> dict:
        return asdict(self)


def rbf_kernel(x, y, sigma: float) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return float(np.exp(-np.sum((x - y) ** 2) / (2.0 * sigma**2)))


def _as_batch(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError(f"expected a non-empty (n, d) batch, got shape {a.shape}")
    return a


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # explicit differences keep d(x, x) exactly 0
    return np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)


def median_bandwidth(samples) -> float:
    """Lower median of the nonzero pairwise Euclidean distances."""
    x = _as_batch(samples)
    if x.shape[0] < 2:
        raise DegenerateSamplesError("median heuristic needs at least two samples")
    iu = np.triu_indices(x.shape[0], k=1)
    d = np.sqrt(_sq_dists(x, x)[iu])
    d = np.sort(d[d > 0])
    if d.size == 0:
        raise DegenerateSamplesError("all samples are identical; bandwidth undefined")
    return float(d[(d.size - 1) // 2])


def mmd2(source, target, cfg: KernelConfig | None = None):
    """Biased (V-statistic) squared MMD with gradients.

    Returns ``(value, d_source, d_target, sigma)``. The bandwidth is a
    constant for the gradient even when chosen by the median heuristic.
    """
    s, t = _as_batch(source), _as_batch(target)
    if s.shape[1] != t.shape[1]:
        raise ValueError(f"feature dims differ: {s.shape[1]} vs {t.shape[1]}")
    cfg = cfg or KernelConfig()
    sigma = cfg.bandwidth
    if sigma is None:
        sigma = median_bandwidth(np.concatenate([s, t]))
    gamma = 1.0 / (2.0 * sigma**2)
    k_ss = np.exp(-gamma * _sq_dists(s, s))
    k_tt = np.exp(-gamma * _sq_dists(t, t))
    k_st = np.exp(-gamma * _sq_dists(s, t))
    m, n = len(s), len(t)
    # fsum is exactly rounded, so the value is independent of summation order
    value = (
        math.fsum(k_ss.ravel()) / m**2
        + math.fsum(k_tt.ravel()) / n**2
        - 2.0 * math.fsum(k_st.ravel()) / (m * n)
    )
    value = max(value, 0.0)

    # d k(a, b) / d a = -2 gamma (a - b) k(a, b)
    def pull(k, a, b):
        return k.sum(axis=1)[:, None] * a - k @ b

    d_s = -2.0 * gamma * (2.0 / m**2 * pull(k_ss, s, s) - 2.0 / (m * n) * pull(k_st, s, t))
    d_t = -2.0 * gamma * (2.0 / n**2 * pull(k_tt, t, t) - 2.0 / (m * n) * pull(k_st.T, t, s))
    return value, d_s, d_t, sigma


@dataclass
class DecoupledLoss:
    l_spe: float
    l_spa: float
    d_spe_s: np.ndarray
    d_spe_t: np.ndarray
    d_spa_s: np.ndarray
    d_spa_t: np.ndarray
    sigma_spe: float
    sigma_spa: float

    @property
    def l_mmd(self) -> float:
        return self.l_spe + self.l_spa


def decoupled_loss(
    spe_s,
    spe_t,
    spa_s,
    spa_t,
    cfg: KernelConfig | None = None,
    spa_cfg: KernelConfig | None = None,
) -> DecoupledLoss:
    """Separate MMD terms for the spectral and the spatial features.

    By default each modality gets its own median bandwidth; ``cfg`` and
    ``spa_cfg`` pin them (``spa_cfg`` falls back to ``cfg``). If a
    modality's pooled batch is a single repeated point the two domains
    coincide there and the term is zero.
    """
    spa_cfg = spa_cfg or cfg

    def term(a, b, cfg):
        try:
            v, da, db, sig = mmd2(a, b, cfg)
        except DegenerateSamplesError:
            a, b = _as_batch(a), _as_batch(b)
            return 0.0, np.zeros_like(a), np.zeros_like(b), float("nan")
        return v, da, db, sig

    l_spe, d_spe_s, d_spe_t, sig_spe = term(spe_s, spe_t, cfg)
    l_spa, d_spa_s, d_spa_t, sig_spa = term(spa_s, spa_t, spa_cfg)
    return DecoupledLoss(l_spe, l_spa, d_spe_s, d_spe_t, d_spa_s, d_spa_t, sig_spe, sig_spa)
