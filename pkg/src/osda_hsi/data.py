"""Hyperspectral cubes, label maps, patch extraction and mixed-domain batching.

File formats
------------
HSC1 cube: ``b"HSC1"``, uint32 LE header length L, L bytes of UTF-8 JSON
``{"bands","height","width","dtype":"f32"}``, then B*H*W little-endian
float32 values, band-major then row-major.

HSL1 labels: same framing with ``{"height","width","classes":[...]}`` and a
payload of H*W uint16 LE. 0 = unlabeled, 65535 = unknown.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.ndimage import gaussian_filter

UNKNOWN_SENTINEL = 65535
CUBE_MAGIC = b"HSC1"
LABEL_MAGIC = b"HSL1"


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DegenerateBandError(ValueError):
    def __init__(self, band: int):
        super().__init__(f"band {band} has zero variance")
        self.band = band


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass
class HsiCube:
    values: np.ndarray  # (bands, height, width)
    name: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[0] < 1:
            raise ValueError(f"cube must be (bands, height, width), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cube contains non-finite values")

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass
class LabelMap:
    labels: np.ndarray  # (height, width) integer
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise ValueError("label map must be 2-d")
        known = self.labels[(self.labels != 0) & (self.labels != UNKNOWN_SENTINEL)]
        if known.size and (known.min() < 1 or known.max() > self.n_classes):
            raise ValueError(f"labels exceed the {self.n_classes} declared classes")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass
class PatchBatch:
    patches: np.ndarray  # (n, bands, p, p)
    domain: Domain
    labels: np.ndarray | None = None
    coords: np.ndarray | None = None  # (n, 2) row, col of the center pixel

    def __post_init__(self):
        if self.patches.ndim != 4 or self.patches.shape[0] < 1:
            raise ValueError("a patch batch needs at least one (bands, p, p) patch")
        if self.patch_size % 2 == 0:
            raise ValueError("patch size must be odd")
        if (self.labels is not None) != (self.domain == Domain.SOURCE):
            raise ValueError("labels must be present exactly for source batches")

    @property
    def patch_size(self) -> int:
        return self.patches.shape[-1]

    def __len__(self) -> int:
        return self.patches.shape[0]

    def subset(self, idx: np.ndarray) -> "PatchBatch":
        return PatchBatch(
            patches=self.patches[idx],
            domain=self.domain,
            labels=None if self.labels is None else self.labels[idx],
            coords=None if self.coords is None else self.coords[idx],
        )


@dataclass(frozen=True)
class DatasetMeta:
    known_classes: int
    unknown_classes: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.known_classes < 2:
            raise ValueError("need at least two known classes")
        if self.unknown_classes < 0:
            raise ValueError("unknown class count must be non-negative")

    @property
    def unknown_present(self) -> bool:
        return self.unknown_classes > 0


# ---------------------------------------------------------------- file I/O


def _write_framed(path: Path, magic: bytes, header: dict, payload: bytes) -> None:
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic + struct.pack("<I", len(head)) + head + payload)


def _read_framed(path: Path, magic: bytes) -> tuple[dict, bytes, int]:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {magic!r}", 0)
    if len(raw) < 8:
        raise FormatError("truncated header length", len(raw))
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise FormatError("truncated JSON header", len(raw))
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable JSON header: {exc}", 8) from None
    return header, raw[8 + hlen :], 8 + hlen


def save_cube(cube: HsiCube, path: str | Path) -> None:
    if not np.all(np.isfinite(cube.values)):
        raise ValueError("refusing to write non-finite values")
    header = {"bands": cube.bands, "height": cube.height, "width": cube.width, "dtype": "f32"}
    _write_framed(Path(path), CUBE_MAGIC, header, cube.values.astype("<f4").tobytes())


def load_cube(path: str | Path) -> HsiCube:
    header, payload, start = _read_framed(Path(path), CUBE_MAGIC)
    try:
        b, h, w = int(header["bands"]), int(header["height"]), int(header["width"])
    except (KeyError, TypeError, ValueError):
        raise FormatError("header lacks bands/height/width", 8) from None
    if header.get("dtype", "f32") != "f32":
        raise FormatError(f"unsupported dtype {header.get('dtype')!r}", 8)
    need = 4 * b * h * w
    if len(payload) < need:
        raise FormatError(f"payload truncated: need {need} bytes, have {len(payload)}", start + len(payload))
    if len(payload) > need:
        raise FormatError(f"{len(payload) - need} trailing bytes after payload", start + need)
    values = np.frombuffer(payload, dtype="<f4").reshape(b, h, w)
    bad = np.flatnonzero(~np.isfinite(values.ravel()))
    if bad.size:
        raise FormatError("non-finite value in payload", start + 4 * int(bad[0]))
    return HsiCube(values.astype(np.float64), name=Path(path).stem)


def save_labels(labels: LabelMap, path: str | Path) -> None:
    header = {"height": labels.height, "width": labels.width, "classes": list(labels.class_names)}
    _write_framed(Path(path), LABEL_MAGIC, header, labels.labels.astype("<u2").tobytes())


def load_labels(path: str | Path) -> LabelMap:
    header, payload, start = _read_framed(Path(path), LABEL_MAGIC)
    h, w = int(header["height"]), int(header["width"])
    need = 2 * h * w
    if len(payload) != need:
        raise FormatError(f"label payload has {len(payload)} bytes, expected {need}", start + min(len(payload), need))
    values = np.frombuffer(payload, dtype="<u2").reshape(h, w).astype(np.int64)
    return LabelMap(values, class_names=list(header.get("classes", [])))


# ---------------------------------------------------------------- preprocessing


def band_statistics(cube: HsiCube) -> tuple[np.ndarray, np.ndarray]:
    """Per-band mean and population std."""
    flat = cube.values.reshape(cube.bands, -1)
    return flat.mean(axis=1), flat.std(axis=1)


def standardize_bands(
    cube: HsiCube,
    reference: HsiCube | None = None,
    stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> HsiCube:
    """Per-band zero mean / unit (population) std.

    With ``reference`` (or precomputed ``stats``) the band statistics come
    from elsewhere, so a target scene can be put on the source scene's scale.
    """
    if stats is None:
        stats = band_statistics(reference or cube)
    mean, std = (np.asarray(a, dtype=np.float64) for a in stats)
    if mean.shape != (cube.bands,) or std.shape != (cube.bands,):
        raise ValueError("band statistics do not match the cube's band count")
    for i, s in enumerate(std):
        if not s > 0:
            raise DegenerateBandError(i)
    values = (cube.values - mean[:, None, None]) / std[:, None, None]
    return HsiCube(values, name=cube.name)


def extract_patches(cube: HsiCube, labels: LabelMap | None, p: int) -> PatchBatch:
    """Mirror-padded p x p patches centered on pixels.

    With labels: one patch per labeled pixel (source batch, labels carried
    through, unknown pixels excluded). Without: one patch per pixel in
    row-major order (target batch).
    """
    if p % 2 == 0 or p < 1:
        raise ValueError(f"patch size must be odd, got {p}")
    if p > min(cube.height, cube.width):
        raise ValueError(f"patch size {p} exceeds the {cube.height}x{cube.width} scene")
    r = p // 2
    padded = np.pad(cube.values, ((0, 0), (r, r), (r, r)), mode="reflect")
    if labels is not None:
        if labels.labels.shape != (cube.height, cube.width):
            raise ValueError("label map does not match the cube")
        mask = (labels.labels != 0) & (labels.labels != UNKNOWN_SENTINEL)
        rows, cols = np.nonzero(mask)
        if rows.size == 0:
            raise ValueError("no labeled pixels; empty batch")
        y = labels.labels[rows, cols]
        domain = Domain.SOURCE
    else:
        rows, cols = np.divmod(np.arange(cube.height * cube.width), cube.width)
        y = None
        domain = Domain.TARGET
    windows = np.lib.stride_tricks.sliding_window_view(padded, (p, p), axis=(1, 2))
    patches = np.ascontiguousarray(windows[:, rows, cols].transpose(1, 0, 2, 3))
    return PatchBatch(patches=patches, domain=domain, labels=y, coords=np.stack([rows, cols], axis=1))


# ---------------------------------------------------------------- synthesis


def _signatures(rng: np.random.Generator, count: int, bands: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, bands)
    sig = np.empty((count, bands))
    for c in range(count):
        base = rng.uniform(0.1, 0.3)
        bumps = np.zeros(bands)
        for _ in range(3):
            amp, center, width = rng.uniform(0.3, 1.0), rng.uniform(0, 1), rng.uniform(0.05, 0.2)
            bumps += amp * np.exp(-((t - center) ** 2) / (2 * width**2))
        sig[c] = base + bumps
    return sig


def _block_layout(rng: np.random.Generator, size: int, classes: np.ndarray, grid: int = 4) -> np.ndarray:
    cells = grid * grid
    if len(classes) > cells:
        raise ValueError(f"{len(classes)} classes do not fit in a {grid}x{grid} block grid")
    assign = np.concatenate([classes, rng.choice(classes, cells - len(classes))])
    rng.shuffle(assign)
    edges = np.linspace(0, size, grid + 1).astype(int)
    layout = np.empty((size, size), dtype=np.int64)
    for k, cls in enumerate(assign):
        i, j = divmod(k, grid)
        layout[edges[i] : edges[i + 1], edges[j] : edges[j + 1]] = cls
    return layout


def _render(rng, layout, signatures, noise=0.02, smooth=1.0):
    values = signatures[layout].transpose(2, 0, 1)  # (B, H, W)
    values = gaussian_filter(values, sigma=(0, smooth, smooth), mode="reflect")
    brightness = 1.0 + 0.05 * rng.standard_normal(layout.shape)
    return values * brightness + noise * rng.standard_normal(values.shape)


def synth_pair(meta: DatasetMeta, shift: float, bands: int = 32, size: int = 64, p: int = 7):
    """Synthetic source/target scene pair with a spectral domain shift.

    Each class has a smooth spectral signature (sum of Gaussian bumps) and
    occupies square blocks of the scene; block edges are blurred. The target
    uses a fresh layout, adds ``meta.unknown_classes`` extra classes labeled
    ``UNKNOWN_SENTINEL`` and applies a per-band affine map ``a*x + b`` with
    ``|a - 1| <= shift / 2`` and ``|b| <= shift / 2``.

    Returns ``((source_cube, source_labels), (target_cube, target_labels))``.
    """
    if shift < 0:
        raise ValueError("shift must be non-negative")
    if p > size:
        raise ValueError("patch size exceeds scene size")
    c_s, c_u = meta.known_classes, meta.unknown_classes
    sig_rng, src_rng, tgt_rng, shift_rng = np.random.default_rng(meta.seed).spawn(4)
    signatures = _signatures(sig_rng, c_s + c_u, bands)
    names = [f"class_{i + 1}" for i in range(c_s)]

    src_layout = _block_layout(src_rng, size, np.arange(c_s))
    src = HsiCube(_render(src_rng, src_layout, signatures), name="source")
    src_labels = LabelMap(src_layout + 1, class_names=names)

    tgt_layout = _block_layout(tgt_rng, size, np.arange(c_s + c_u))
    tgt_values = _render(tgt_rng, tgt_layout, signatures)
    gain = 1.0 + 0.5 * shift * shift_rng.uniform(-1, 1, bands)
    offset = 0.5 * shift * shift_rng.uniform(-1, 1, bands)
    tgt_values = gain[:, None, None] * tgt_values + offset[:, None, None]
    tgt = HsiCube(tgt_values, name="target")
    tgt_ids = np.where(tgt_layout < c_s, tgt_layout + 1, UNKNOWN_SENTINEL)
    tgt_labels = LabelMap(tgt_ids, class_names=names)
    return (src, src_labels), (tgt, tgt_labels)


# ---------------------------------------------------------------- batching


def batch_iter(
    source: PatchBatch, target: PatchBatch, batch_size: int, seed: int
) -> Iterator[tuple[PatchBatch, PatchBatch]]:
    """One epoch of (source, target) sub-batches of batch_size/2 each.

    Source indices are a seeded permutation covering every source sample
    once; the final source sub-batch may be short. Target indices are a
    permutation prefix, or drawn with replacement when the target set is too
    small for the epoch.
    """
    if batch_size < 2 or batch_size % 2:
        raise ValueError("batch_size must be even and >= 2")
    if len(source) == 0 or len(target) == 0:
        raise ValueError("empty input batch")
    half = batch_size // 2
    rng = np.random.default_rng(seed)
    src_order = rng.permutation(len(source))
    n_batches = -(-len(source) // half)
    demand = n_batches * half
    if len(target) >= demand:
        tgt_order = rng.permutation(len(target))[:demand]
    else:
        tgt_order = rng.integers(0, len(target), size=demand)
    for k in range(n_batches):
        s_idx = src_order[k * half : (k + 1) * half]
        t_idx = tgt_order[k * half : (k + 1) * half]
        yield source.subset(s_idx), target.subset(t_idx)


def sample_per_class(batch: PatchBatch, per_class: int | None, seed: int) -> PatchBatch:
    """Seeded subset with at most ``per_class`` samples of each source class."""
    if per_class is None or batch.labels is None:
        return batch
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(batch.labels):
        idx = np.flatnonzero(batch.labels == c)
        keep.append(np.sort(rng.permutation(idx)[:per_class]))
    return batch.subset(np.sort(np.concatenate(keep)))
