"""Consistency scoring between two feature branches and GMM-based rejection."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

VAR_FLOOR = 1e-8
_LOG_2PI = np.log(2.0 * np.pi)


class DegenerateFeatureError(ValueError):
    pass


class Decision(str, enum.Enum):
    KNOWN = "known"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class ConsistencyScore:
    sim: float
    s: float


def consistency_score(f_a, f_b) -> ConsistencyScore:
    f_a = np.asarray(f_a, dtype=np.float64)
    f_b = np.asarray(f_b, dtype=np.float64)
    if f_a.shape != f_b.shape:
        raise ValueError(f"feature shapes differ: {f_a.shape} vs {f_b.shape}")
    na, nb = np.linalg.norm(f_a), np.linalg.norm(f_b)
    if na <= 1e-12 or nb <= 1e-12:
        raise DegenerateFeatureError("feature vector has (near) zero norm")
    sim = float(np.clip(f_a @ f_b / (na * nb), -1.0, 1.0))
    return ConsistencyScore(sim=sim, s=sim * sim)


def consistency_scores(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """Row-wise squared cosine similarity for (n, d) feature matrices."""
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    if fa.shape != fb.shape:
        raise ValueError(f"feature shapes differ: {fa.shape} vs {fb.shape}")
    na = np.linalg.norm(fa, axis=1)
    nb = np.linalg.norm(fb, axis=1)
    if np.any(na <= 1e-12) or np.any(nb <= 1e-12):
        raise DegenerateFeatureError("feature vector has (near) zero norm")
    sim = np.clip(np.einsum("ij,ij->i", fa, fb) / (na * nb), -1.0, 1.0)
    return sim * sim


@dataclass
class GmmModel:
    pi: np.ndarray
    mu: np.ndarray
    var: np.ndarray
    loglik_trace: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.pi)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1] if self.loglik_trace else float("nan")

    def to_json(self) -> dict:
        return {
            "K": self.k,
            "pi": self.pi.tolist(),
            "mu": self.mu.tolist(),
            "var": self.var.tolist(),
            "loglik": self.loglik,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GmmModel":
        return cls(
            pi=np.asarray(d["pi"], dtype=np.float64),
            mu=np.asarray(d["mu"], dtype=np.float64),
            var=np.asarray(d["var"], dtype=np.float64),
            loglik_trace=[float(d["loglik"])],
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def _log_joint(model_pi, mu, var, s):
    # (n, K) log pi_k + log N(s | mu_k, var_k)
    s = np.asarray(s, dtype=np.float64)[:, None]
    return np.log(model_pi) - 0.5 * (_LOG_2PI + np.log(var) + (s - mu) ** 2 / var)


def gmm_fit(scores, k: int = 2, seed: int = 0, tol: float = 1e-8, max_iter: int = 500) -> GmmModel:
    """EM for a 1-D Gaussian mixture.

    Means start at the (2k-1)/(2K) quantiles, weights uniform, every
    variance at the sample variance. Stops when the log-likelihood changes
    by less than ``tol`` or after ``max_iter`` iterations. ``seed`` is
    recorded for interface symmetry; the initialization is deterministic.
    """
    del seed
    s = np.asarray(scores, dtype=np.float64).ravel()
    if k < 2:
        raise ValueError("K must be at least 2")
    if np.unique(s).size < k or np.ptp(s) <= 1e-9:
        raise ValueError(f"need at least {k} distinct scores to fit {k} components")
    pi = np.full(k, 1.0 / k)
    mu = np.quantile(s, (2 * np.arange(1, k + 1) - 1) / (2 * k))
    var = np.full(k, max(s.var(), VAR_FLOOR))
    trace = []
    prev = -np.inf
    for _ in range(max_iter):
        log_joint = _log_joint(pi, mu, var, s)
        log_norm = logsumexp(log_joint, axis=1)
        ll = float(log_norm.sum())
        trace.append(ll)
        if abs(ll - prev) < tol:
            break
        prev = ll
        gamma = np.exp(log_joint - log_norm[:, None])
        nk = gamma.sum(axis=0)
        # an emptied component keeps its old parameters
        alive = nk > 1e-300
        pi = nk / nk.sum()
        pi = np.maximum(pi, 1e-300)
        mu = np.where(alive, (gamma * s[:, None]).sum(axis=0) / np.where(alive, nk, 1.0), mu)
        new_var = (gamma * (s[:, None] - mu) ** 2).sum(axis=0) / np.where(alive, nk, 1.0)
        var = np.maximum(np.where(alive, new_var, var), VAR_FLOOR)
    return GmmModel(pi=pi, mu=mu, var=var, loglik_trace=trace)


def responsibilities(model: GmmModel, s) -> np.ndarray:
    """Posterior component probabilities; (K,) for a scalar, (n, K) for arrays."""
    scalar = np.ndim(s) == 0
    log_joint = _log_joint(model.pi, model.mu, model.var, np.atleast_1d(s))
    gamma = np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))
    return gamma[0] if scalar else gamma


@dataclass(frozen=True)
class OpenSetDecision:
    flag: Decision
    gamma_max_mean: float


def classify_known_unknown(model: GmmModel, scores) -> list[OpenSetDecision]:
    """Unknown iff the most responsible component is the highest-mean one.

    A tie for the highest mean makes every sample Known; ties in
    responsibility go to the lower-mean component.
    """
    s = np.atleast_1d(np.asarray(scores, dtype=np.float64))
    gamma = responsibilities(model, s)
    order = np.argsort(model.mu, kind="stable")
    top = order[-1]
    mu_tie = np.sum(model.mu == model.mu[top]) > 1
    # argmax over components sorted by ascending mean picks the lower mean on ties
    winner = order[np.argmax(gamma[:, order], axis=1)]
    out = []
    for i in range(len(s)):
        unknown = (not mu_tie) and winner[i] == top
        out.append(OpenSetDecision(Decision.UNKNOWN if unknown else Decision.KNOWN, float(gamma[i, top])))
    return out


def unknown_mask(model: GmmModel, scores) -> np.ndarray:
    return np.array([d.flag == Decision.UNKNOWN for d in classify_known_unknown(model, scores)], dtype=bool)
