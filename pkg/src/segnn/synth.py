"""Synthetic labeled scenes made of geometric primitives on a floor.

Class 0 is the floor/background; object classes are numbered from 1 in the
order of :data:`PRIMITIVES`. A :class:`Corpus` assigns every scene to the
``train`` or ``test`` split and only places objects of that split's classes
in it, so class splits never overlap.
"""
from __future__ import annotations

import colorsys
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError, DataError, ParseError
from .fewshot import Episode
from .pointcloud import LabeledCloud, load_cloud, save_cloud

PRIMITIVES = ("plane", "box", "sphere", "cylinder", "wedge", "torus_patch", "step", "pole")
DEFAULT_SPLIT = (("plane", "box", "sphere", "cylinder"), ("wedge", "torus_patch", "step", "pole"))
FLOOR_COLOR = (0.5, 0.5, 0.5)
MANIFEST_MAGIC = "SNCORPUS 1"


def class_id(name: str) -> int:
    return PRIMITIVES.index(name) + 1


def default_palette() -> Dict[str, Tuple[float, float, float]]:
    """Evenly spaced saturated hues, one per primitive."""
    return {
        name: colorsys.hsv_to_rgb(i / len(PRIMITIVES), 0.75, 0.85)
        for i, name in enumerate(PRIMITIVES)
    }


@dataclass(frozen=True)
class SceneSpec:
    classes: Tuple[str, ...] = PRIMITIVES
    objects_per_scene: Tuple[int, int] = (2, 3)
    points_per_object: int = 550
    scene_points: int = 2048
    min_floor_points: int = 400
    floor_size: float = 4.0
    sigma_p: float = 0.01
    sigma_c: float = 0.05
    color_shuffle: bool = False
    palette: Optional[Dict[str, Tuple[float, float, float]]] = None

    def __post_init__(self):
        unknown = set(self.classes) - set(PRIMITIVES)
        if unknown:
            raise ConfigError(f"unknown primitive classes: {sorted(unknown)}")
        if len(set(self.classes)) < 2:
            raise ConfigError("a scene spec needs at least two distinct classes")
        if self.sigma_p < 0 or self.sigma_c < 0:
            raise ConfigError("jitter sigmas must be >= 0")
        lo, hi = self.objects_per_scene
        if not 0 <= lo <= hi <= 4:
            raise ConfigError("objects_per_scene must satisfy 0 <= lo <= hi <= 4")
        if self.points_per_object < 1:
            raise ConfigError("points_per_object must be >= 1")

    def color_of(self, name: str):
        pal = self.palette or default_palette()
        return np.asarray(pal[name], dtype=np.float64)


# -- primitive surfaces, local frame with the base resting on z = 0 ----------


def _pick_faces(rng, areas, n):
    areas = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(areas), size=n, p=areas / areas.sum())


def _panel(rng, n):
    w, h = rng.uniform(0.8, 1.2), rng.uniform(0.8, 1.3)
    return np.column_stack([rng.uniform(-w / 2, w / 2, n), np.zeros(n), rng.uniform(0, h, n)])


def _box(rng, n):
    a, b, c = rng.uniform(0.4, 0.8, 3)
    # top, +x, -x, +y, -y
    face = _pick_faces(rng, [a * b, b * c, b * c, a * c, a * c], n)
    s, t = rng.uniform(-0.5, 0.5, n), rng.uniform(0.0, 1.0, n)
    pts = np.empty((n, 3))
    pts[:] = np.column_stack([s * a, (t - 0.5) * b, np.full(n, c)])
    for f, sign in ((1, 1), (2, -1)):
        m = face == f
        pts[m] = np.column_stack([np.full(m.sum(), sign * a / 2), s[m] * b, t[m] * c])
    for f, sign in ((3, 1), (4, -1)):
        m = face == f
        pts[m] = np.column_stack([s[m] * a, np.full(m.sum(), sign * b / 2), t[m] * c])
    return pts


def sphere_surface(rng, n, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius + np.array([0.0, 0.0, radius])


def _sphere(rng, n):
    return sphere_surface(rng, n, rng.uniform(0.3, 0.45))


def _tube(rng, n, r, h, cap=True):
    lat, top = 2 * np.pi * r * h, (np.pi * r * r if cap else 0.0)
    face = _pick_faces(rng, [lat, top], n) if cap else np.zeros(n, dtype=int)
    phi = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(face == 0, r, r * np.sqrt(rng.uniform(0, 1, n)))
    z = np.where(face == 0, rng.uniform(0, h, n), h)
    return np.column_stack([rad * np.cos(phi), rad * np.sin(phi), z])


def _cylinder(rng, n):
    return _tube(rng, n, rng.uniform(0.25, 0.4), rng.uniform(0.5, 0.9))


def _pole(rng, n):
    return _tube(rng, n, rng.uniform(0.03, 0.05), rng.uniform(1.2, 1.8), cap=False)


def _wedge(rng, n):
    length, w, h = rng.uniform(0.6, 1.0), rng.uniform(0.4, 0.7), rng.uniform(0.4, 0.7)
    slope = np.hypot(length, h)
    face = _pick_faces(rng, [slope * w, h * w, length * h / 2, length * h / 2], n)
    s, t = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
    x0 = -length / 2
    pts = np.column_stack([x0 + s * length, (t - 0.5) * w, h * (1 - s)])
    m = face == 1
    pts[m] = np.column_stack([np.full(m.sum(), x0), (t[m] - 0.5) * w, s[m] * h])
    for f, sign in ((2, 1), (3, -1)):
        m = face == f
        # uniform in the right triangle under the ramp
        a, b = s[m], t[m]
        flip = a + b > 1
        a, b = np.where(flip, 1 - a, a), np.where(flip, 1 - b, b)
        pts[m] = np.column_stack([x0 + a * length, np.full(m.sum(), sign * w / 2), b * h])
    return pts


def _torus_patch(rng, n):
    big, small = rng.uniform(0.35, 0.5), rng.uniform(0.08, 0.14)
    out = np.empty((0, 3))
    while out.shape[0] < n:
        u = rng.uniform(0, 2 * np.pi, 2 * n)
        v = rng.uniform(0, np.pi, 2 * n)
        keep = rng.uniform(0, big + small, 2 * n) < big + small * np.cos(v)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        out = np.vstack([out, np.column_stack([ring * np.cos(u), ring * np.sin(u), small + small * np.sin(v)])])
    return out[:n]


def _step(rng, n, steps=3):
    w, depth, rise = rng.uniform(0.6, 0.9), rng.uniform(0.2, 0.3), rng.uniform(0.15, 0.25)
    face = rng.integers(0, 2 * steps, n)
    i = face // 2
    s, t = rng.uniform(0, 1, n), rng.uniform(-0.5, 0.5, n)
    tread = face % 2 == 0
    x = np.where(tread, (i + s) * depth, i * depth)
    z = np.where(tread, (i + 1) * rise, (i + s) * rise)
    return np.column_stack([x - steps * depth / 2, t * w, z])


_SAMPLERS = {
    "plane": _panel,
    "box": _box,
    "sphere": _sphere,
    "cylinder": _cylinder,
    "wedge": _wedge,
    "torus_patch": _torus_patch,
    "step": _step,
    "pole": _pole,
}


def sample_primitive(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` surface points of a randomly sized primitive in its local frame."""
    return _SAMPLERS[name](rng, n)


def generate_scene(
    spec: SceneSpec, seed: int, classes: Optional[Sequence[str]] = None, id: Optional[str] = None
) -> LabeledCloud:
    """Floor (label 0) plus objects drawn without replacement from ``classes``."""
    rng = np.random.default_rng(seed)
    pool = list(spec.classes if classes is None else classes)
    lo, hi = spec.objects_per_scene
    n_obj = int(rng.integers(lo, hi + 1))
    if n_obj and not pool:
        raise ConfigError("cannot place objects: no classes available")
    n_obj = min(n_obj, len(pool))
    names = [pool[i] for i in rng.permutation(len(pool))[:n_obj]]

    n_floor = max(spec.min_floor_points, spec.scene_points - n_obj * spec.points_per_object)
    half = spec.floor_size / 2
    parts = [np.column_stack([rng.uniform(-half, half, (n_floor, 2)), np.zeros(n_floor)])]
    labels = [np.zeros(n_floor, dtype=np.int64)]
    cols = [np.tile(FLOOR_COLOR, (n_floor, 1))]

    cells = rng.permutation(4)[:n_obj]
    for name, cell in zip(names, cells):
        pts = sample_primitive(name, spec.points_per_object, rng)
        yaw = rng.uniform(0, 2 * np.pi)
        c, s = np.cos(yaw), np.sin(yaw)
        pts = pts @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T
        center = (np.array([cell % 2, cell // 2]) - 0.5) * half + rng.uniform(-0.15, 0.15, 2) * half
        pts[:, :2] += center
        parts.append(pts)
        labels.append(np.full(len(pts), class_id(name), dtype=np.int64))
        hue_name = PRIMITIVES[rng.integers(len(PRIMITIVES))] if spec.color_shuffle else name
        cols.append(np.tile(spec.color_of(hue_name), (len(pts), 1)))

    coords = np.vstack(parts)
    colors = np.vstack(cols)
    if spec.sigma_p > 0:
        coords = coords + rng.normal(0.0, spec.sigma_p, coords.shape)
    if spec.sigma_c > 0:
        colors = colors + rng.normal(0.0, spec.sigma_c, colors.shape)
    order = rng.permutation(coords.shape[0])
    return LabeledCloud(
        coords[order], np.clip(colors[order], 0.0, 1.0), np.concatenate(labels)[order], id or f"scene_{seed}"
    )


@dataclass
class Corpus:
    """Labeled clouds with a per-cloud split tag (``train``, ``test`` or ``any``)."""

    clouds: List[LabeledCloud]
    splits: List[str]
    train_classes: Tuple[int, ...]
    test_classes: Tuple[int, ...]
    class_names: Dict[int, str] = field(default_factory=dict)
    min_points: int = 1

    def __post_init__(self):
        overlap = set(self.train_classes) & set(self.test_classes)
        if overlap:
            raise DataError(f"train and test classes overlap: {sorted(overlap)}")
        if len(self.splits) != len(self.clouds):
            raise DataError("one split tag per cloud is required")
        self._present = [
            frozenset(np.unique(c.labels[c.labels > 0]).tolist()) if c.labels is not None else frozenset()
            for c in self.clouds
        ]
        self._counts = [
            {int(k): int(v) for k, v in zip(*np.unique(c.labels, return_counts=True))} if c.labels is not None else {}
            for c in self.clouds
        ]

    def classes_of(self, split: str) -> Tuple[int, ...]:
        return self.train_classes if split == "train" else self.test_classes

    def pool(self, split: str) -> List[int]:
        return [i for i, s in enumerate(self.splits) if s in (split, "any")]

    def contains(self, i: int, cls: int) -> bool:
        return self._counts[i].get(cls, 0) >= self.min_points

    def inventory(self, i: int) -> Tuple[int, ...]:
        return tuple(sorted(self._present[i]))


def build_corpus(
    spec: SceneSpec,
    n_scenes: int,
    split: Tuple[Sequence[str], Sequence[str]] = DEFAULT_SPLIT,
    seed: int = 0,
) -> Corpus:
    """Generate ``n_scenes`` scenes; the first half use train classes only, the rest test classes."""
    train, test = (tuple(s) for s in split)
    if set(train) & set(test):
        raise ConfigError("train and test class lists overlap")
    if not train or not test:
        raise ConfigError("both splits need at least one class")
    clouds, tags = [], []
    n_train = n_scenes // 2
    for i in range(n_scenes):
        tag = "train" if i < n_train else "test"
        scene_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        clouds.append(generate_scene(spec, scene_seed, train if tag == "train" else test, id=f"scene_{i:04d}"))
        tags.append(tag)
    return Corpus(
        clouds,
        tags,
        tuple(class_id(c) for c in train),
        tuple(class_id(c) for c in test),
        {0: "floor", **{class_id(c): c for c in PRIMITIVES}},
    )


def remap_labels(labels: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    """Target class ``targets[n]`` becomes ``n + 1``; everything else 0 (unlabeled stays -1)."""
    out = np.zeros_like(labels)
    out[labels < 0] = -1
    for n, c in enumerate(targets):
        out[labels == c] = n + 1
    return out


def sample_episode(
    corpus: Corpus,
    n_ways: int,
    k_shots: int,
    n_query: int,
    seed: int,
    split: str = "test",
    classes: Optional[Sequence[int]] = None,
) -> Episode:
    """Draw one N-way K-shot episode from the ``split`` pool.

    Support clouds are labeled binary (their way's class vs. background);
    queries carry every target class.
    """
    rng = np.random.default_rng(seed)
    available = corpus.classes_of(split)
    if classes is None:
        if n_ways > len(available):
            raise DataError(f"{n_ways}-way episodes need {n_ways} classes, split {split!r} has {len(available)}")
        classes = [available[i] for i in sorted(rng.choice(len(available), n_ways, replace=False))]
    classes = [int(c) for c in classes]
    if len(classes) != n_ways:
        raise ConfigError("number of target classes must equal n_ways")
    pool = corpus.pool(split)
    used = set()
    support = []
    for n, c in enumerate(classes):
        cands = [i for i in pool if i not in used and corpus.contains(i, c)]
        if len(cands) < k_shots:
            raise DataError(f"class {corpus.class_names.get(c, c)!r} ({c}) is starved: {len(cands)} clouds < {k_shots} shots")
        pick = [cands[j] for j in rng.choice(len(cands), k_shots, replace=False)]
        used.update(pick)
        shots = []
        for i in pick:
            cl = corpus.clouds[i]
            shots.append(cl.with_labels(np.where(cl.labels == c, n + 1, np.where(cl.labels < 0, -1, 0))))
        support.append(shots)
    cands = [i for i in pool if i not in used and any(corpus.contains(i, c) for c in classes)]
    if len(cands) < n_query:
        raise DataError(f"only {len(cands)} query clouds contain a target class of {classes}, need {n_query}")
    queries = [
        corpus.clouds[cands[j]].with_labels(remap_labels(corpus.clouds[cands[j]].labels, classes))
        for j in rng.choice(len(cands), n_query, replace=False)
    ]
    names = [corpus.class_names.get(c, str(c)) for c in classes]
    return Episode(n_ways, k_shots, support, queries, names, tuple(classes))


def enumerate_test_episodes(
    corpus: Corpus, n_ways: int, k_shots: int, n_query: int, per_combo: int = 100, seed: int = 0
) -> Iterator[Episode]:
    """Every combination of ``n_ways`` test classes, ``per_combo`` episodes each."""
    for ci, combo in enumerate(itertools.combinations(sorted(corpus.test_classes), n_ways)):
        for j in range(per_combo):
            ep_seed = int(np.random.SeedSequence([seed, ci, j]).generate_state(1)[0])
            yield sample_episode(corpus, n_ways, k_shots, n_query, ep_seed, "test", combo)


def count_test_episodes(corpus: Corpus, n_ways: int, per_combo: int) -> int:
    from math import comb

    return comb(len(corpus.test_classes), n_ways) * per_combo


# -- manifest -----------------------------------------------------------------


def write_corpus(corpus: Corpus, directory, format: str = "binary") -> Path:
    """Write every cloud plus ``manifest.txt``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = ".sncb" if format == "binary" else ".sncloud"
    lines = [MANIFEST_MAGIC]
    for cid in sorted(corpus.class_names):
        if cid == 0:
            lines.append(f"class 0 {corpus.class_names[0]} background")
            continue
        tag = "train" if cid in corpus.train_classes else "test" if cid in corpus.test_classes else "unused"
        lines.append(f"class {cid} {corpus.class_names[cid]} {tag}")
    for i, (cloud, tag) in enumerate(zip(corpus.clouds, corpus.splits)):
        name = (cloud.id or f"cloud_{i:04d}") + ext
        save_cloud(cloud, directory / name, format)
        inv = ",".join(str(c) for c in corpus.inventory(i)) or "-"
        lines.append(f"cloud {name} {tag} {inv}")
    path = directory / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_corpus(path, min_points: int = 1) -> Corpus:
    """Load a corpus from a manifest file or a directory containing ``manifest.txt``.

    Manifest lines: ``class <id> <name> <train|test|background|unused>`` and
    ``cloud <relative path> <train|test|any> <comma-separated class ids or ->``.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    if not path.exists():
        raise DataError(f"{path}: no such manifest")
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != MANIFEST_MAGIC:
        raise ParseError(path, "line 1", f"expected header {MANIFEST_MAGIC!r}")
    names, train, test, clouds, tags = {}, [], [], [], []
    for no, line in enumerate(lines[1:], start=2):
        toks = line.split()
        if not toks or toks[0].startswith("#"):
            continue
        if toks[0] == "class" and len(toks) == 4:
            try:
                cid = int(toks[1])
            except ValueError:
                raise ParseError(path, f"line {no}", f"bad class id {toks[1]!r}") from None
            names[cid] = toks[2]
            if toks[3] == "train":
                train.append(cid)
            elif toks[3] == "test":
                test.append(cid)
            elif toks[3] not in ("background", "unused"):
                raise ParseError(path, f"line {no}", f"bad class role {toks[3]!r}")
        elif toks[0] == "cloud" and len(toks) in (3, 4):
            if toks[2] not in ("train", "test", "any"):
                raise ParseError(path, f"line {no}", f"bad split tag {toks[2]!r}")
            clouds.append(load_cloud(path.parent / toks[1]))
            tags.append(toks[2])
        else:
            raise ParseError(path, f"line {no}", f"unrecognized entry {line!r}")
    return Corpus(clouds, tags, tuple(train), tuple(test), names, min_points)


# -- single-object clouds for classification ----------------------------------------


def generate_object(name: str, n_points: int, seed: int, sigma_p: float = 0.01, id: Optional[str] = None) -> LabeledCloud:
    """One primitive, randomly sized and rotated about z, every point labeled with its class."""
    rng = np.random.default_rng(seed)
    pts = sample_primitive(name, n_points, rng)
    yaw = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(yaw), np.sin(yaw)
    pts = pts @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T
    if sigma_p > 0:
        pts = pts + rng.normal(0.0, sigma_p, pts.shape)
    return LabeledCloud(pts, None, np.full(n_points, class_id(name), dtype=np.int64), id or f"{name}_{seed}")


def object_corpus(
    per_class: int, n_points: int = 1024, seed: int = 0, classes: Sequence[str] = PRIMITIVES, sigma_p: float = 0.01
) -> Corpus:
    """``per_class`` object clouds for each class (split tag ``any``, no train/test split)."""
    clouds = []
    for name in classes:
        for j in range(per_class):
            s = int(np.random.SeedSequence([seed, class_id(name), j]).generate_state(1)[0])
            clouds.append(generate_object(name, n_points, s, sigma_p, id=f"{name}_{j:03d}"))
    return Corpus(clouds, ["any"] * len(clouds), (), tuple(class_id(c) for c in classes),
                  {0: "floor", **{class_id(c): c for c in PRIMITIVES}})


def dominant_label(cloud: LabeledCloud) -> int:
    """Most frequent nonnegative label (ties to the lower id), used as a cloud's class."""
    if cloud.labels is None or not np.any(cloud.labels >= 0):
        raise DataError(f"cloud {cloud.id!r} has no label to classify by")
    return int(np.argmax(np.bincount(cloud.labels[cloud.labels >= 0])))
