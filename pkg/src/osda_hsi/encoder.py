"""Dual-modality attention encoder: spectral conv1d branch, spatial conv3d
branch, per-modality attention, global pooling and channel concatenation.

Two branches share this architecture: the aligned branch (trained under the
alignment loss) and the intrinsic branch (kept at its random init).
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .nn import ConvSpec, ParamStore


class Branch(str, enum.Enum):
    ALIGNED = "aligned"
    INTRINSIC = "intrinsic"


@dataclass(frozen=True)
class ArchConfig:
    bands: int
    n_classes: int
    spe_channels: tuple[int, int, int] = (16, 16, 16)
    spa_channels: tuple[int, int, int] = (8, 8, 8)
    feature_dim: int = 32
    spe_kernel: int = 3
    spa_kernel: tuple[int, int, int] = (3, 3, 3)
    reduction: int = 4
    gate_kernel: int = 3

    def __post_init__(self):
        if self.feature_dim % self.reduction:
            raise nn.ShapeError(
                f"reduction {self.reduction} must divide feature_dim {self.feature_dim}"
            )

    @property
    def fused_dim(self) -> int:
        return 2 * self.feature_dim

    def conv_specs(self) -> dict[str, ConvSpec]:
        c1, c2, c3 = self.spe_channels
        s1, s2, s3 = self.spa_channels
        k, ks = (self.spe_kernel,), tuple(self.spa_kernel)
        return {
            "spe.conv1": ConvSpec(1, c1, k),
            "spe.conv2": ConvSpec(c1, c2, k),
            "spe.conv3": ConvSpec(c2, c3, k),
            "spe.conv4": ConvSpec(c3, self.feature_dim, k),
            "spa.conv1": ConvSpec(1, s1, ks),
            "spa.res": ConvSpec(s1, s3, ks),
            "spa.conv2": ConvSpec(s1, s2, ks),
            "spa.conv3": ConvSpec(s2, s3, ks),
            "spa.conv4": ConvSpec(s3, self.feature_dim, ks),
            "att_s": ConvSpec(2, 1, (self.gate_kernel, self.gate_kernel)),
        }

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        for key in ("spe_channels", "spa_channels", "spa_kernel"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class EncoderParams:
    branch: Branch
    config: ArchConfig
    seed: int
    store: ParamStore = field(default_factory=ParamStore)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.store.params[name]


@dataclass
class FeatureSet:
    """Pooled attention-enhanced features for a batch (one row per sample)."""

    spe: np.ndarray
    spa: np.ndarray

    @property
    def fused(self) -> np.ndarray:
        return np.concatenate([self.spe, self.spa], axis=1)

    def __len__(self) -> int:
        return self.spe.shape[0]


def _sub_seed(seed: int, branch: Branch) -> int:
    digest = hashlib.sha256(f"{seed}:{branch.value}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def init_encoder(seed: int, config: ArchConfig, branch: Branch = Branch.ALIGNED) -> EncoderParams:
    """Kaiming-uniform weights, zero biases; each branch draws from its own sub-seed."""
    branch = Branch(branch)
    rng = np.random.default_rng(_sub_seed(seed, branch))
    store = ParamStore()
    for name, spec in config.conv_specs().items():
        store.add(f"{name}.w", nn.kaiming_uniform(rng, spec.weight_shape, spec.fan_in))
        store.add(f"{name}.b", np.zeros(spec.out_channels))
    hidden = config.feature_dim // config.reduction
    store.add("att_c.w1", nn.kaiming_uniform(rng, (hidden, config.feature_dim), config.feature_dim))
    store.add("att_c.w2", nn.kaiming_uniform(rng, (config.feature_dim, hidden), hidden))
    store.add(
        "head.w",
        nn.kaiming_uniform(rng, (config.n_classes, config.fused_dim), config.fused_dim),
    )
    store.add("head.b", np.zeros(config.n_classes))
    return EncoderParams(branch=branch, config=config, seed=seed, store=store)


# ---------------------------------------------------------------- branches


def _conv(name, x, p, caches):
    y, c = nn.conv_forward(x, p[f"{name}.w"], p[f"{name}.b"])
    caches[name] = c
    return y


def _conv_relu(name, x, p, caches):
    y, mask = nn.relu(_conv(name, x, p, caches))
    caches[name + ".relu"] = mask
    return y


def extract_spectral(x: np.ndarray, params: EncoderParams):
    """x: (n, 1, B) center spectra -> F_spe (n, C_f, B).

    c1 = conv1(x); c3 = conv3(conv2(c1)); F = conv4(relu(c1 + c3)).
    """
    p, caches = params.store.params, {}
    c1 = _conv_relu("spe.conv1", x, p, caches)
    c2 = _conv_relu("spe.conv2", c1, p, caches)
    c3 = _conv_relu("spe.conv3", c2, p, caches)
    fused, caches["spe.fuse"] = nn.relu(nn.residual_fuse(c1, c3))
    out = _conv("spe.conv4", fused, p, caches)
    return out, caches


def extract_spectral_backward(dy: np.ndarray, caches) -> tuple[np.ndarray, dict]:
    grads = {}

    def back(name, d, relu=False):
        if relu:
            d = nn.relu_backward(d, caches[name + ".relu"])
        dx, g = nn.conv_backward(d, caches[name])
        grads[f"{name}.w"], grads[f"{name}.b"] = g["w"], g["b"]
        return dx

    d_fused = nn.relu_backward(back("spe.conv4", dy), caches["spe.fuse"])
    d_c2 = back("spe.conv3", d_fused, relu=True)
    d_c1 = back("spe.conv2", d_c2, relu=True) + d_fused
    dx = back("spe.conv1", d_c1, relu=True)
    return dx, grads


def extract_spatial(x: np.ndarray, params: EncoderParams):
    """x: (n, 1, B, p, p) patches -> F_spa (n, C_f, B, p, p).

    c1 = conv1(x); r = res(c1); c3 = conv3(conv2(c1)); F = conv4(relu(r + c3)).
    """
    p, caches = params.store.params, {}
    c1 = _conv_relu("spa.conv1", x, p, caches)
    r = _conv("spa.res", c1, p, caches)
    c2 = _conv_relu("spa.conv2", c1, p, caches)
    c3 = _conv_relu("spa.conv3", c2, p, caches)
    fused, caches["spa.fuse"] = nn.relu(nn.residual_fuse(r, c3))
    out = _conv("spa.conv4", fused, p, caches)
    return out, caches


def extract_spatial_backward(dy: np.ndarray, caches) -> tuple[np.ndarray, dict]:
    grads = {}

    def back(name, d, relu=False):
        if relu:
            d = nn.relu_backward(d, caches[name + ".relu"])
        dx, g = nn.conv_backward(d, caches[name])
        grads[f"{name}.w"], grads[f"{name}.b"] = g["w"], g["b"]
        return dx

    d_fused = nn.relu_backward(back("spa.conv4", dy), caches["spa.fuse"])
    d_c2 = back("spa.conv3", d_fused, relu=True)
    d_c1 = back("spa.conv2", d_c2, relu=True) + back("spa.res", d_fused)
    dx = back("spa.conv1", d_c1, relu=True)
    return dx, grads


def apply_attention(spe: np.ndarray, spa: np.ndarray, params: EncoderParams):
    """Channel attention on the spectral map, spatial attention on the spatial map."""
    p = params.store.params
    t_spe, c_cache = nn.channel_attention(spe, p["att_c.w1"], p["att_c.w2"])
    t_spa, s_cache = nn.spatial_attention(spa, p["att_s.w"], p["att_s.b"])
    return t_spe, t_spa, (c_cache, s_cache)


def apply_attention_backward(d_spe, d_spa, cache):
    c_cache, s_cache = cache
    dx_spe, gc = nn.channel_attention_backward(d_spe, c_cache)
    dx_spa, gs = nn.spatial_attention_backward(d_spa, s_cache)
    grads = {"att_c.w1": gc["w1"], "att_c.w2": gc["w2"], "att_s.w": gs["w"], "att_s.b": gs["b"]}
    return dx_spe, dx_spa, grads


# ---------------------------------------------------------------- full encoder


def split_inputs(patches: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(n, B, p, p) patches -> center spectra (n, 1, B) and volumes (n, 1, B, p, p)."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 4 or patches.shape[2] != patches.shape[3] or patches.shape[2] % 2 == 0:
        raise nn.ShapeError(f"patches must be (n, B, p, p) with odd p, got {patches.shape}")
    c = patches.shape[2] // 2
    return patches[:, None, :, c, c].copy(), patches[:, None]


def encode(patches: np.ndarray, params: EncoderParams, with_cache: bool = False):
    """Encode a batch of patches into pooled spectral/spatial features."""
    x_spe, x_spa = split_inputs(patches)
    if x_spe.shape[2] != params.config.bands:
        raise nn.ShapeError(f"patches have {x_spe.shape[2]} bands, encoder expects {params.config.bands}")
    f_spe, spe_cache = extract_spectral(x_spe, params)
    f_spa, spa_cache = extract_spatial(x_spa, params)
    t_spe, t_spa, att_cache = apply_attention(f_spe, f_spa, params)
    feats = FeatureSet(spe=t_spe.mean(axis=2), spa=t_spa.mean(axis=(2, 3, 4)))
    if not with_cache:
        return feats
    return feats, (spe_cache, spa_cache, att_cache, t_spe.shape, t_spa.shape)


def encode_backward(d_spe: np.ndarray, d_spa: np.ndarray, cache) -> dict[str, np.ndarray]:
    """Parameter gradients given gradients w.r.t. the pooled features."""
    spe_cache, spa_cache, att_cache, spe_shape, spa_shape = cache
    n_spe = spe_shape[2]
    n_spa = int(np.prod(spa_shape[2:]))
    dt_spe = np.broadcast_to((d_spe / n_spe)[:, :, None], spe_shape)
    dt_spa = np.broadcast_to((d_spa / n_spa)[:, :, None, None, None], spa_shape)
    df_spe, df_spa, grads = apply_attention_backward(dt_spe, dt_spa, att_cache)
    _, g_spe = extract_spectral_backward(df_spe, spe_cache)
    _, g_spa = extract_spatial_backward(df_spa, spa_cache)
    grads.update(g_spe)
    grads.update(g_spa)
    return grads


def classify(fused: np.ndarray, params: EncoderParams):
    return nn.linear(fused, params["head.w"], params["head.b"])


def encode_in_chunks(patches: np.ndarray, params: EncoderParams, chunk: int = 256) -> FeatureSet:
    spe, spa = [], []
    for start in range(0, len(patches), chunk):
        f = encode(patches[start : start + chunk], params)
        spe.append(f.spe)
        spa.append(f.spa)
    return FeatureSet(spe=np.concatenate(spe), spa=np.concatenate(spa))


# ---------------------------------------------------------------- checkpoint


def save_params(params: EncoderParams, path: str | Path, extra: dict | None = None) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (float64 LE payload).

    Momentum buffers follow the weights in the payload, in the same order.
    """
    path = Path(path)
    store = params.store
    layers = [{"name": k, "shape": list(v.shape)} for k, v in store.params.items()]
    manifest = {
        "branch": params.branch.value,
        "seed": params.seed,
        "arch": params.config.to_json(),
        "layers": layers,
        "velocity": True,
    }
    if extra:
        manifest.update(extra)
    payload = b"".join(store.params[k].astype("<f8").tobytes() for k in store.params)
    payload += b"".join(store.velocity[k].astype("<f8").tobytes() for k in store.params)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    path.with_suffix(".bin").write_bytes(payload)


def load_params(path: str | Path) -> tuple[EncoderParams, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    sizes = [int(np.prod(layer["shape"])) for layer in manifest["layers"]]
    expected = 8 * sum(sizes) * (2 if manifest.get("velocity") else 1)
    if len(raw) != expected:
        raise ValueError(f"checkpoint payload has {len(raw)} bytes, manifest implies {expected}")
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    store = ParamStore()
    offset = 0
    for layer, size in zip(manifest["layers"], sizes):
        store.add(layer["name"], flat[offset : offset + size].reshape(layer["shape"]))
        offset += size
    if manifest.get("velocity"):
        for layer, size in zip(manifest["layers"], sizes):
            store.velocity[layer["name"]] = flat[offset : offset + size].reshape(layer["shape"]).copy()
            offset += size
    params = EncoderParams(
        branch=Branch(manifest["branch"]),
        config=ArchConfig.from_json(manifest["arch"]),
        seed=manifest["seed"],
        store=store,
    )
    return params, manifest
