"""Training-free point encoder built from trigonometric encodings.

The pipeline is: initial sin/cos embedding of positions and colors, a stack
of manipulation layers (FPS halving, k-NN grouping, fixed cosine filter
bank, neighborhood max-pool) and inverse-distance upsampling back to the
input resolution with channel concatenation.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .exceptions import ConfigError, ParseError
from .pointcloud import LabeledCloud, farthest_point_sample, k_nearest_neighbors

UPSAMPLE_EPS = 1e-8
FEATURE_MAGIC = b"SNF1"
# how negative Gaussian filter frequencies are made positive: fold them, or redraw them
FREQ_MODES = ("abs", "truncate")


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 20
    theta: float = 30.0
    layers: int = 3
    k_neigh: int = 16
    k_up: int = 3
    variance: float = 1.0
    seed: int = 0
    dtype: str = "float64"
    freq_mode: str = "abs"

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.theta <= 0:
            raise ConfigError(f"theta must be > 0, got {self.theta}")
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.k_neigh < 1 or self.k_up < 1:
            raise ConfigError("k_neigh and k_up must be >= 1")
        if self.variance <= 0:
            raise ConfigError(f"variance must be > 0, got {self.variance}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.freq_mode not in FREQ_MODES:
            raise ConfigError(f"freq_mode must be one of {FREQ_MODES}, got {self.freq_mode!r}")

    @property
    def output_dim(self) -> int:
        return feature_dim(self.d, self.layers)

    def as_dict(self):
        return asdict(self)


def feature_dim(d: int, layers: int) -> int:
    """Closed form of the final channel count: sum over l of 2**l * 6d."""
    return (2 ** (layers + 1) - 1) * 6 * d


def layer_dim(d: int, layer: int) -> int:
    return 2**layer * 6 * d


@dataclass(frozen=True)
class FreqBank:
    values: np.ndarray

    @property
    def d(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class FilterBank:
    weight: np.ndarray
    layer: int
    seed: int
    freqs: np.ndarray = field(repr=False)


@dataclass
class PointFeatures:
    """``M x D`` feature matrix plus the ``(offset, length)`` of each layer's block."""

    data: np.ndarray
    slices: dict = field(default_factory=dict)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def layer(self, l: int) -> np.ndarray:
        off, n = self.slices[l]
        return self.data[:, off : off + n]


def log_linear_freqs(d: int, theta: float) -> FreqBank:
    if d < 1 or theta <= 0:
        raise ConfigError("need d >= 1 and theta > 0")
    vals = np.power(float(theta), np.arange(1, d + 1) / d)
    vals.setflags(write=False)
    return FreqBank(vals)


def trig_encode(x, bank) -> np.ndarray:
    """Encode 3-vectors (any leading shape) into ``6d`` sin/cos features.

    Layout: the sin block (x-axis d values, then y, then z) followed by the
    cos block in the same order.
    """
    u = bank.values if isinstance(bank, FreqBank) else np.asarray(bank, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    ang = 2.0 * np.pi * x[..., :, None] * u
    ang = ang.reshape(x.shape[:-1] + (x.shape[-1] * u.shape[0],))
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def initial_embed(cloud: LabeledCloud, bank: FreqBank) -> np.ndarray:
    """Layer-0 features: encoding of positions plus encoding of colors (if any)."""
    f = trig_encode(cloud.coords, bank)
    if cloud.colors is not None:
        f = f + trig_encode(cloud.colors, bank)
    return f


def sample_frequencies(n: int, variance: float, rng: np.random.Generator) -> np.ndarray:
    """Raw Gaussian draws N(0, variance) used for the filter-bank frequencies."""
    return rng.normal(0.0, np.sqrt(variance), size=n)


def positive_frequencies(n: int, variance: float, rng: np.random.Generator, mode: str = "abs") -> np.ndarray:
    """Half-normal frequencies: ``|v|`` (``abs``) or rejection of negative draws (``truncate``)."""
    if mode == "abs":
        return np.abs(sample_frequencies(n, variance, rng))
    kept = np.empty(0)
    while kept.size < n:
        draw = sample_frequencies(n, variance, rng)
        kept = np.concatenate([kept, draw[draw >= 0]])
    return kept[:n]


def filter_weight(v: np.ndarray) -> np.ndarray:
    """``W[a, b] = cos(2 pi v_a k_b)`` with ``k = 1..len(v)``."""
    k = np.arange(1, v.shape[0] + 1, dtype=np.float64)
    return np.cos(2.0 * np.pi * v[:, None] * k[None, :])


def sample_filter_bank(layer: int, cfg: EncoderConfig) -> FilterBank:
    s = layer_dim(cfg.d, layer)
    rng = np.random.default_rng([cfg.seed, layer])
    v = positive_frequencies(s, cfg.variance, rng, cfg.freq_mode)
    w = filter_weight(v)
    w.setflags(write=False)
    v.setflags(write=False)
    return FilterBank(w, layer, cfg.seed, v)


def manipulation_layer(
    coords: np.ndarray,
    colors: Optional[np.ndarray],
    feats: np.ndarray,
    bank: FilterBank,
    freqs: FreqBank,
    k_neigh: int,
):
    """One embedding-manipulation layer.

    Returns ``(center_indices, center_feats)``; center indices refer to the
    rows of ``coords``.
    """
    m = coords.shape[0]
    s = bank.weight.shape[0]
    if feats.shape != (m, s // 2):
        raise ConfigError(f"layer {bank.layer} expects {m} x {s // 2} features, got {feats.shape}")
    centers = farthest_point_sample(coords, -(-m // 2), start=0)
    k = min(k_neigh, m)
    nbr = k_nearest_neighbors(coords[centers], coords, k)

    # W (fc ++ fn + tile(e)) == W_left fc + W_right fn + (sum of W's column blocks) e,
    # so centers and points are projected once instead of once per pair.
    w = bank.weight.astype(feats.dtype, copy=False)
    half = feats.shape[1]
    reps = s // (6 * freqs.d)
    w_blocks = w.reshape(s, reps, 6 * freqs.d).sum(axis=1)
    from_center = feats[centers] @ w[:, :half].T
    from_point = feats @ w[:, half:].T
    rel = trig_encode(coords[nbr] - coords[centers][:, None, :], freqs)
    if colors is not None:
        rel = rel + trig_encode(colors[nbr], freqs)
    projected = from_point[nbr] + (rel.astype(feats.dtype, copy=False) @ w_blocks.T)
    projected += from_center[:, None, :]
    return centers, projected.max(axis=1)


def interpolate_features(
    coarse_xyz: np.ndarray, coarse_feats: np.ndarray, fine_xyz: np.ndarray, k_up: int
) -> np.ndarray:
    """Inverse-distance weighted interpolation from the ``k_up`` nearest coarse points."""
    coarse_xyz, fine_xyz = np.asarray(coarse_xyz, dtype=np.float64), np.asarray(fine_xyz, dtype=np.float64)
    coarse_feats = np.asarray(coarse_feats)
    if coarse_xyz.shape[0] == 0:
        raise ConfigError("cannot upsample from an empty coarse set")
    k = min(k_up, coarse_xyz.shape[0])
    nn = k_nearest_neighbors(fine_xyz, coarse_xyz, k)
    dist = np.sqrt(np.sum((fine_xyz[:, None, :] - coarse_xyz[nn]) ** 2, axis=-1))
    w = 1.0 / (dist + UPSAMPLE_EPS)
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("qk,qkc->qc", w.astype(coarse_feats.dtype, copy=False), coarse_feats[nn])


def upsample_layer(coarse_xyz, coarse_feats, fine_xyz, fine_feats, k_up: int) -> np.ndarray:
    """Interpolate coarse features onto the fine points and append the fine features."""
    interp = interpolate_features(coarse_xyz, coarse_feats, fine_xyz, k_up)
    return np.concatenate([interp, fine_feats], axis=1)


class Encoder:
    """Frozen encoder instance: frequency bank and per-layer filter banks."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        self.cfg = cfg
        self.freqs = log_linear_freqs(cfg.d, cfg.theta)
        self.banks: List[FilterBank] = [sample_filter_bank(l, cfg) for l in range(1, cfg.layers + 1)]
        self._dtype = np.dtype(cfg.dtype)

    def _check(self, cloud: LabeledCloud):
        if cloud.n_points < 2**self.cfg.layers:
            raise ConfigError(
                f"cloud {cloud.id!r} has {cloud.n_points} points; {self.cfg.layers} layers need >= {2 ** self.cfg.layers}"
            )

    def hierarchy(self, cloud: LabeledCloud):
        """Run the manipulation stack.

        Returns a list of ``(coords, feats)`` per level, level 0 first.
        """
        self._check(cloud)
        coords = cloud.coords
        colors = cloud.colors
        feats = initial_embed(cloud, self.freqs).astype(self._dtype)
        levels = [(coords, feats)]
        for bank in self.banks:
            idx, feats = manipulation_layer(coords, colors, feats, bank, self.freqs, self.cfg.k_neigh)
            coords = coords[idx]
            colors = None if colors is None else colors[idx]
            levels.append((coords, feats))
        return levels

    def encode(self, cloud: LabeledCloud) -> PointFeatures:
        levels = self.hierarchy(cloud)
        coords, up = levels[-1]
        order = [len(levels) - 1]
        for l in range(len(levels) - 2, -1, -1):
            fine_xyz, fine_feats = levels[l]
            up = upsample_layer(coords, up, fine_xyz, fine_feats, self.cfg.k_up)
            coords = fine_xyz
            order.append(l)
        slices, off = {}, 0
        for l in order:
            n = layer_dim(self.cfg.d, l)
            slices[l] = (off, n)
            off += n
        return PointFeatures(up, slices)

    def encode_global(self, cloud: LabeledCloud) -> np.ndarray:
        _, feats = self.hierarchy(cloud)[-1]
        return global_max_pool(feats)


def global_max_pool(feats: np.ndarray) -> np.ndarray:
    return feats.max(axis=0)


def encode_scene(cloud: LabeledCloud, cfg: EncoderConfig = EncoderConfig()) -> PointFeatures:
    return Encoder(cfg).encode(cloud)


def encode_global(cloud: LabeledCloud, cfg: EncoderConfig = EncoderConfig()) -> np.ndarray:
    return Encoder(cfg).encode_global(cloud)


_FEAT_HEADER = struct.Struct("<4sII")


def write_features(path, feats) -> None:
    """Debug dump: ``SNF1`` magic, u32 rows, u32 dim, row-major f32."""
    data = feats.data if isinstance(feats, PointFeatures) else np.asarray(feats)
    if data.ndim == 1:
        data = data[None, :]
    Path(path).write_bytes(_FEAT_HEADER.pack(FEATURE_MAGIC, *data.shape) + data.astype("<f4").tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _FEAT_HEADER.size:
        raise ParseError(path, "offset 0", "truncated header")
    magic, rows, dim = _FEAT_HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise ParseError(path, "offset 0", f"bad magic {magic!r}")
    if len(raw) != _FEAT_HEADER.size + rows * dim * 4:
        raise ParseError(path, f"offset {_FEAT_HEADER.size}", "payload size does not match header")
    return np.frombuffer(raw, "<f4", rows * dim, _FEAT_HEADER.size).reshape(rows, dim).astype(np.float64)
