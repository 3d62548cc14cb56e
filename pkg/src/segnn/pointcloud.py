"""Point-cloud container, file formats and the geometric sampling primitives.

Two on-disk formats are supported:

* text (``.sncloud``): a header line
  ``SNCLOUD 1 POINTS <M> COLOR <0|1> LABEL <0|1>`` followed by ``M`` rows
  ``x y z [r g b] [label]``.
* binary (``.sncb``): magic ``SNC1``, little-endian ``u32 M``, ``u8`` color
  flag, ``u8`` label flag, ``M x 3`` f32 coords, optional ``M x 3`` f32
  colors and optional ``M`` i32 labels.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import ConfigError, DataError, ParseError

TEXT_MAGIC = "SNCLOUD"
BINARY_MAGIC = b"SNC1"
FORMATS = ("text", "binary")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledCloud:
    """``M`` points with optional colors and per-point labels (-1 = unlabeled).

    Arrays are copied and made read-only on construction.
    """

    coords: np.ndarray
    colors: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        coords = _frozen(self.coords, np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise DataError(f"coords must be M x 3, got shape {coords.shape}")
        if coords.shape[0] < 1:
            raise DataError("a cloud needs at least one point")
        if not np.all(np.isfinite(coords)):
            raise DataError("coords contain non-finite values")
        object.__setattr__(self, "coords", coords)
        if self.colors is not None:
            colors = _frozen(self.colors, np.float64)
            if colors.shape != coords.shape:
                raise DataError(f"colors shape {colors.shape} != coords shape {coords.shape}")
            if not np.all(np.isfinite(colors)) or colors.min() < 0.0 or colors.max() > 1.0:
                raise DataError("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", colors)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.ndim != 1 or labels.shape[0] != coords.shape[0]:
                raise DataError(f"labels length {labels.shape} != point count {coords.shape[0]}")
            if labels.size and not np.issubdtype(labels.dtype, np.integer):
                if not np.all(labels == np.round(labels)):
                    raise DataError("labels must be integers")
            object.__setattr__(self, "labels", _frozen(labels, np.int64))

    def __len__(self):
        return self.coords.shape[0]

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]

    def take(self, idx, id: Optional[str] = None) -> "LabeledCloud":
        """Sub-cloud made of the rows ``idx`` (in that order)."""
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledCloud(
            self.coords[idx],
            None if self.colors is None else self.colors[idx],
            None if self.labels is None else self.labels[idx],
            self.id if id is None else id,
        )

    def with_labels(self, labels) -> "LabeledCloud":
        return LabeledCloud(self.coords, self.colors, labels, self.id)

    def equals(self, other: "LabeledCloud") -> bool:
        """Exact array equality (ids are ignored)."""

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            same(self.coords, other.coords)
            and same(self.colors, other.colors)
            and same(self.labels, other.labels)
        )


def _infer_format(path: Path, format: Optional[str]) -> str:
    if format is not None:
        if format not in FORMATS:
            raise ConfigError(f"unknown cloud format {format!r}; expected one of {FORMATS}")
        return format
    if path.suffix == ".sncb":
        return "binary"
    if path.suffix == ".sncloud":
        return "text"
    raise ConfigError(f"cannot infer format from extension of {path}")


def load_cloud(path, format: Optional[str] = None) -> LabeledCloud:
    """Read a cloud; no normalization is applied."""
    path = Path(path)
    fmt = _infer_format(path, format)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if fmt == "text":
        return _load_text(path)
    return _load_binary(path)


def save_cloud(cloud: LabeledCloud, path, format: Optional[str] = None) -> None:
    path = Path(path)
    fmt = _infer_format(path, format)
    if fmt == "text":
        _save_text(cloud, path)
    else:
        _save_binary(cloud, path)


def _parse_flag(path, tok, name):
    if tok not in ("0", "1"):
        raise ParseError(path, "line 1", f"{name} flag must be 0 or 1, got {tok!r}")
    return tok == "1"


def _load_text(path: Path) -> LabeledCloud:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(path, "line 1", "empty file")
    head = lines[0].split()
    if (
        len(head) != 8
        or head[0] != TEXT_MAGIC
        or head[1] != "1"
        or head[2] != "POINTS"
        or head[4] != "COLOR"
        or head[6] != "LABEL"
    ):
        raise ParseError(path, "line 1", f"malformed header {lines[0]!r}")
    try:
        m = int(head[3])
    except ValueError:
        raise ParseError(path, "line 1", f"bad point count {head[3]!r}") from None
    has_color = _parse_flag(path, head[5], "COLOR")
    has_label = _parse_flag(path, head[7], "LABEL")
    arity = 3 + 3 * has_color + has_label

    body = lines[1:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != m:
        raise ParseError(path, f"line {len(body) + 1}", f"header declares {m} points, found {len(body)} rows")

    values = np.empty((m, 3 + 3 * has_color))
    labels = np.empty(m, dtype=np.int64) if has_label else None
    for i, line in enumerate(body):
        toks = line.split()
        where = f"line {i + 2}"
        if len(toks) != arity:
            raise ParseError(path, where, f"expected {arity} fields, got {len(toks)}")
        try:
            row = [float(t) for t in toks[: values.shape[1]]]
        except ValueError:
            raise ParseError(path, where, "non-numeric field") from None
        if not all(np.isfinite(row)):
            raise ParseError(path, where, "non-finite value")
        values[i] = row
        if has_label:
            try:
                labels[i] = int(toks[-1])
            except ValueError:
                raise ParseError(path, where, f"bad label {toks[-1]!r}") from None
    try:
        return LabeledCloud(
            values[:, :3],
            values[:, 3:6] if has_color else None,
            labels,
            path.stem,
        )
    except DataError as exc:
        raise ParseError(path, "body", str(exc)) from None


def _save_text(cloud: LabeledCloud, path: Path) -> None:
    has_color = cloud.colors is not None
    has_label = cloud.labels is not None
    out = [f"{TEXT_MAGIC} 1 POINTS {cloud.n_points} COLOR {int(has_color)} LABEL {int(has_label)}"]
    for i in range(cloud.n_points):
        fields = [f"{v:.9g}" for v in cloud.coords[i]]
        if has_color:
            fields += [f"{v:.9g}" for v in cloud.colors[i]]
        if has_label:
            fields.append(str(int(cloud.labels[i])))
        out.append(" ".join(fields))
    path.write_text("\n".join(out) + "\n", encoding="ascii")


_BIN_HEADER = struct.Struct("<4sIBB")


def _load_binary(path: Path) -> LabeledCloud:
    raw = path.read_bytes()
    if len(raw) < _BIN_HEADER.size:
        raise ParseError(path, "offset 0", "truncated header")
    magic, m, has_color, has_label = _BIN_HEADER.unpack_from(raw, 0)
    if magic != BINARY_MAGIC:
        raise ParseError(path, "offset 0", f"bad magic {magic!r}")
    if has_color > 1 or has_label > 1:
        raise ParseError(path, "offset 8", "flags must be 0 or 1")
    expected = _BIN_HEADER.size + m * 12 * (1 + has_color) + m * 4 * has_label
    if len(raw) != expected:
        raise ParseError(
            path,
            f"offset {_BIN_HEADER.size}",
            f"header declares {m} points ({expected} bytes) but file has {len(raw)} bytes",
        )
    off = _BIN_HEADER.size
    coords = np.frombuffer(raw, "<f4", m * 3, off).reshape(m, 3)
    off += m * 12
    colors = None
    if has_color:
        colors = np.frombuffer(raw, "<f4", m * 3, off).reshape(m, 3)
        off += m * 12
    labels = np.frombuffer(raw, "<i4", m, off) if has_label else None
    if not (np.all(np.isfinite(coords)) and (colors is None or np.all(np.isfinite(colors)))):
        bad = int(np.argmax(~np.isfinite(coords).all(axis=1)))
        raise ParseError(path, f"point {bad}", "non-finite value")
    try:
        return LabeledCloud(coords, colors, labels, path.stem)
    except DataError as exc:
        raise ParseError(path, "body", str(exc)) from None


def _save_binary(cloud: LabeledCloud, path: Path) -> None:
    has_color = cloud.colors is not None
    has_label = cloud.labels is not None
    parts = [
        _BIN_HEADER.pack(BINARY_MAGIC, cloud.n_points, int(has_color), int(has_label)),
        cloud.coords.astype("<f4").tobytes(),
    ]
    if has_color:
        parts.append(cloud.colors.astype("<f4").tobytes())
    if has_label:
        parts.append(cloud.labels.astype("<i4").tobytes())
    path.write_bytes(b"".join(parts))


def normalize_cloud(cloud: LabeledCloud) -> LabeledCloud:
    """Map coords per axis onto [0, 1]; a degenerate axis maps to 0.5."""
    lo = cloud.coords.min(axis=0)
    span = cloud.coords.max(axis=0) - lo
    flat = span == 0
    coords = (cloud.coords - lo) / np.where(flat, 1.0, span)
    coords[:, flat] = 0.5
    colors = None if cloud.colors is None else np.clip(cloud.colors, 0.0, 1.0)
    return LabeledCloud(coords, colors, cloud.labels, cloud.id)


def _as_points(x):
    if isinstance(x, LabeledCloud):
        return x.coords
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError(f"expected an (n, dim) array, got shape {x.shape}")
    return x


def farthest_point_sample(cloud, count: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Each step picks the point with the largest squared distance to the
    selected set; ties go to the lowest index. Returns ``count`` distinct
    indices in selection order.
    """
    pts = _as_points(cloud)
    m = pts.shape[0]
    if not 1 <= count <= m:
        raise ConfigError(f"FPS count must be in [1, {m}], got {count}")
    if not 0 <= start < m:
        raise ConfigError(f"FPS start must be in [0, {m}), got {start}")
    chosen = np.empty(count, dtype=np.int64)
    mindist = np.full(m, np.inf)
    taken = np.zeros(m, dtype=bool)
    cur = start
    for i in range(count):
        chosen[i] = cur
        taken[cur] = True
        d = _sq_dists(pts[cur][None, :], pts)[0]
        np.minimum(mindist, d, out=mindist)
        if i + 1 < count:
            cur = int(np.argmax(np.where(taken, -1.0, mindist)))
    return chosen


def _sq_dists(queries, points):
    # per-axis accumulation, same order as summing over the last axis
    out = (queries[:, None, 0] - points[None, :, 0]) ** 2
    for a in range(1, queries.shape[1]):
        out += (queries[:, None, a] - points[None, :, a]) ** 2
    return out


def k_nearest_neighbors(queries, points, k: int, chunk: int = 256) -> np.ndarray:
    """Brute-force Euclidean k-NN.

    Returns a ``Q x k`` index matrix ordered by ascending distance, ties
    broken by lower index.
    """
    q = _as_points(queries)
    p = _as_points(points)
    m = p.shape[0]
    if not 1 <= k <= m:
        raise ConfigError(f"k must be in [1, {m}], got {k}")
    out = np.empty((q.shape[0], k), dtype=np.int64)
    for lo in range(0, q.shape[0], chunk):
        d2 = _sq_dists(q[lo : lo + chunk], p)
        out[lo : lo + chunk] = _smallest_k(d2, k)
    return out


def _smallest_k(d2, k):
    m = d2.shape[1]
    if k == m:
        return np.argsort(d2, axis=1, kind="stable")
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    pd = np.take_along_axis(d2, part, axis=1)
    kth = pd.max(axis=1)
    # rows with a tie straddling the k-th distance need the full stable order
    ambiguous = np.count_nonzero(d2 <= kth[:, None], axis=1) > k
    order = np.lexsort((part, pd), axis=1)
    res = np.take_along_axis(part, order, axis=1)
    if np.any(ambiguous):
        rows = np.flatnonzero(ambiguous)
        res[rows] = np.argsort(d2[rows], axis=1, kind="stable")[:, :k]
    return res


def random_subsample(cloud: LabeledCloud, m: int, seed: int) -> LabeledCloud:
    """Draw ``m`` points without replacement using ``numpy.random.default_rng(seed)``."""
    if not 1 <= m <= cloud.n_points:
        raise ConfigError(f"subsample size must be in [1, {cloud.n_points}], got {m}")
    idx = np.random.default_rng(seed).choice(cloud.n_points, size=m, replace=False)
    return cloud.take(idx)


def resample_to(cloud: LabeledCloud, m: int, seed: int):
    """Bring a cloud to exactly ``m`` points.

    Larger clouds are subsampled without replacement; smaller ones are
    padded by drawing extra points with replacement. Returns the new cloud
    and the source index of every row so results can be mapped back.
    """
    rng = np.random.default_rng(seed)
    n = cloud.n_points
    if n >= m:
        idx = rng.choice(n, size=m, replace=False)
    else:
        idx = np.concatenate([np.arange(n), rng.choice(n, size=m - n, replace=True)])
    return cloud.take(idx), idx
