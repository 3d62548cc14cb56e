"""Parametric head: feature refinement plus query-support prototype transfer.

Support and query features from the frozen encoder are refined by a small
BN/ReLU/Linear stack, summarized by windowed max-pooling and a shared
channel projection, and used to shift the class prototypes towards the
query domain through a softmax-modulated cross-correlation and a
Gram-matrix difference. Training uses :mod:`segnn.autograd` and AdamW.
"""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .exceptions import ConfigError, DataError, NumericalError, ParseError
from .fewshot import CloudFeaturizer, Episode, QueryResult, _scored

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SNQP"
CKPT_VERSION = 1
NORM_EPS = 1e-12


@dataclass(frozen=True)
class QuestConfig:
    hidden: int = 192
    kernel: int = 32
    temperature: float = 10.0
    lr: float = 1e-3
    weight_decay: float = 1e-4
    halve_every: int = 7000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    ckpt_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden < 1:
            raise ConfigError("hidden width must be >= 1")
        if self.kernel < 1:
            raise ConfigError("pool kernel must be >= 1")
        if self.lr <= 0 or self.halve_every < 1:
            raise ConfigError("need lr > 0 and halve_every >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    def as_dict(self):
        return asdict(self)


def _bn(prefix):
    return [f"{prefix}.scale", f"{prefix}.shift", f"{prefix}.running_mean", f"{prefix}.running_var"]


FIELD_ORDER = (
    _bn("bn0")
    + ["lin1.weight", "lin1.bias"]
    + _bn("bn1")
    + ["lin2.weight", "lin2.bias"]
    + _bn("bn2")
    + ["W", "W_g"]
)
RUNNING = tuple(n for n in FIELD_ORDER if ".running_" in n)
LEARNABLE = tuple(n for n in FIELD_ORDER if n not in RUNNING)


def field_shapes(D: int, H: int) -> Dict[str, tuple]:
    shapes = {}
    for prefix, width in (("bn0", D), ("bn1", H), ("bn2", H)):
        for n in _bn(prefix):
            shapes[n] = (width,)
    shapes.update(
        {
            "lin1.weight": (D, H),
            "lin1.bias": (H,),
            "lin2.weight": (H, H),
            "lin2.bias": (H,),
            "W": (H, H),
            "W_g": (H, 1),
        }
    )
    return shapes


class QuestParams:
    """Named parameter arrays in checkpoint field order."""

    def __init__(self, D: int, H: int, arrays: Dict[str, np.ndarray]):
        self.D, self.H = D, H
        shapes = field_shapes(D, H)
        missing = set(FIELD_ORDER) - set(arrays)
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)}")
        self.arrays = {}
        for name in FIELD_ORDER:
            a = np.array(arrays[name], dtype=np.float64)
            if a.shape != shapes[name]:
                raise ConfigError(f"{name} has shape {a.shape}, expected {shapes[name]}")
            self.arrays[name] = a

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        self.arrays[name][...] = value

    def copy(self) -> "QuestParams":
        return QuestParams(self.D, self.H, {k: v.copy() for k, v in self.arrays.items()})

    def n_learnable(self) -> int:
        return sum(self.arrays[n].size for n in LEARNABLE)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())


def init_params(D: int, H: int = 192, seed: int = 0) -> QuestParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; BN scale 1, shift 0."""
    if D < 1 or H < 1:
        raise ConfigError("D and H must be >= 1")
    rng = np.random.default_rng(seed)
    shapes = field_shapes(D, H)
    arrays = {}
    for name in FIELD_ORDER:
        if name.endswith(".scale") or name.endswith("running_var"):
            arrays[name] = np.ones(shapes[name])
        elif name.endswith(".shift") or name.endswith("running_mean"):
            arrays[name] = np.zeros(shapes[name])
    fan_in = {"lin1.weight": D, "lin1.bias": D, "lin2.weight": H, "lin2.bias": H, "W": H, "W_g": H}
    for name in ("lin1.weight", "lin1.bias", "lin2.weight", "lin2.bias", "W", "W_g"):
        bound = 1.0 / np.sqrt(fan_in[name])
        arrays[name] = rng.uniform(-bound, bound, shapes[name])
    return QuestParams(D, H, arrays)


# -- graph pieces --------------------------------------------------------------


def _leaves(params: QuestParams, dtype, requires_grad: bool) -> Dict[str, Tensor]:
    out = {}
    for name in FIELD_ORDER:
        t = Tensor(params[name], requires_grad=requires_grad and name in LEARNABLE)
        out[name] = t.astype(dtype) if np.dtype(dtype) != t.data.dtype else t
    return out


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    x = np.asarray(x)
    return Tensor(x if dtype is None else x.astype(dtype, copy=False))


def _batchnorm(x: Tensor, t: Dict[str, Tensor], prefix: str, train: bool, cfg: QuestConfig, stats: dict):
    if train:
        out, mu, var = ag.batch_norm(x, t[f"{prefix}.scale"], t[f"{prefix}.shift"], cfg.bn_eps)
        stats[prefix] = (mu, var, x.shape[0])
        return out
    else:
        mean = t[f"{prefix}.running_mean"].data
        var = t[f"{prefix}.running_var"].data
        xhat = (x - mean) * (1.0 / np.sqrt(var + cfg.bn_eps)).astype(x.data.dtype)
    return xhat * t[f"{prefix}.scale"] + t[f"{prefix}.shift"]


def _refine(x: Tensor, t: Dict[str, Tensor], train: bool, cfg: QuestConfig, stats: dict) -> Tensor:
    h = _batchnorm(x, t, "bn0", train, cfg, stats).relu()
    h = _batchnorm(h @ t["lin1.weight"] + t["lin1.bias"], t, "bn1", train, cfg, stats).relu()
    return _batchnorm(h @ t["lin2.weight"] + t["lin2.bias"], t, "bn2", train, cfg, stats).relu()


def _update_running(params: QuestParams, stats: dict, momentum: float):
    for prefix, (mu, var, n) in stats.items():
        unbiased = var * n / max(n - 1, 1)
        params[f"{prefix}.running_mean"] = momentum * params[f"{prefix}.running_mean"] + (1 - momentum) * mu
        params[f"{prefix}.running_var"] = momentum * params[f"{prefix}.running_var"] + (1 - momentum) * unbiased


def refine_features(feats, params: QuestParams, mode: str = "eval", cfg: QuestConfig = QuestConfig()) -> np.ndarray:
    """``M x D`` -> ``M x H``. Train mode normalizes with batch statistics and updates the running ones."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    feats = np.asarray(feats)
    if feats.ndim != 2 or feats.shape[1] != params.D:
        raise DataError(f"expected M x {params.D} features, got {feats.shape}")
    stats = {}
    t = _leaves(params, cfg.dtype, False)
    out = _refine(_as_tensor(feats, cfg.dtype), t, mode == "train", cfg, stats)
    if mode == "train":
        _update_running(params, stats, cfg.bn_momentum)
    return out.data


def pooled_statistics(feats, kernel: int):
    """Max over consecutive non-overlapping windows of ``kernel`` rows (``ceil(M/kernel)`` rows)."""
    if kernel < 1:
        raise ConfigError("kernel must be >= 1")
    if isinstance(feats, Tensor):
        return ag.window_max(feats, kernel)
    return ag.window_max(Tensor(np.asarray(feats)), kernel).data


def cross_correlation_adjust(FQ, FS, FP):
    """``FP softmax(FQ^T FS)^T`` with the softmax taken along rows."""
    fq, fs, fp = (_as_tensor(a) for a in (FQ, FS, FP))
    if fq.shape != fs.shape or fp.shape[1] != fs.shape[1]:
        raise DataError(f"shape mismatch: FQ {fq.shape}, FS {fs.shape}, FP {fp.shape}")
    out = fp @ ag.softmax(fq.T @ fs, axis=1).T
    return out if isinstance(FP, Tensor) else out.data


def cross_correlation_weights(FQ, FS) -> np.ndarray:
    return ag.softmax(_as_tensor(FQ).T @ _as_tensor(FS), axis=1).data


def self_correlation_adjust(FQ, FS, FP, W_g):
    """``FP diag((FQ^T FQ - FS^T FS) W_g)``."""
    fq, fs, fp, wg = (_as_tensor(a) for a in (FQ, FS, FP, W_g))
    if fq.shape[1] != fs.shape[1] or fp.shape[1] != fs.shape[1] or wg.shape != (fs.shape[1], 1):
        raise DataError(f"shape mismatch: FQ {fq.shape}, FS {fs.shape}, FP {fp.shape}, W_g {wg.shape}")
    gap = (fq.T @ fq - fs.T @ fs) @ wg
    out = fp * gap.T
    return out if isinstance(FP, Tensor) else out.data


def _set_stats(refined: Sequence[Tensor], W: Tensor, kernel: int):
    """Projected window statistics of a set of clouds.

    Returns ``(stacked, mean)``: every cloud's statistics stacked (for the
    Gram term, which accepts any row count) and their average over clouds
    (for the cross term, which pairs query and support rows and so needs
    equal shapes). Both are scaled so that products are row averages.
    """
    pooled = [ag.window_max(r, kernel) @ W for r in refined]
    rows = {p.shape[0] for p in pooled}
    if len(rows) != 1:
        raise DataError(f"clouds of one set give different statistic counts {sorted(rows)}")
    stacked = ag.concat(pooled)
    total = pooled[0]
    for p in pooled[1:]:
        total = total + p
    mean = total * (1.0 / (len(pooled) * np.sqrt(pooled[0].shape[0])))
    return stacked * (1.0 / np.sqrt(stacked.shape[0])), mean


def _masked_mean_matrix(labels: np.ndarray, cls: int, dtype) -> Optional[np.ndarray]:
    mask = labels == cls
    n = mask.sum()
    if n == 0:
        return None
    return (mask / n).astype(dtype)[None, :]


def quest_forward(
    support_refined: Sequence[Sequence[Tensor]],
    support_labels: Sequence[Sequence[np.ndarray]],
    query_refined: Sequence[Tensor],
    t: Dict[str, Tensor],
    cfg: QuestConfig,
    use_cross: bool = True,
    use_self: bool = True,
):
    """Adjusted prototypes averaged over shots.

    Returns ``(FP_star, class_ids)``: one row per class that has at least one
    prototype, with the class id of each row.
    """
    n_ways = len(support_refined)
    k_shots = len(support_refined[0])
    W, W_g = t["W"], t["W_g"]
    FQ, FQ_mean = _set_stats(query_refined, W, cfg.kernel)
    per_class: List[List[Tensor]] = [[] for _ in range(n_ways + 1)]
    for k in range(k_shots):
        shot = [support_refined[n][k] for n in range(n_ways)]
        labs = [support_labels[n][k] for n in range(n_ways)]
        FS, FS_mean = _set_stats(shot, W, cfg.kernel)
        rows, ids = [], []
        bg_total = sum(int((l == 0).sum()) for l in labs)
        if bg_total:
            bg = None
            for r, l in zip(shot, labs):
                a = ((l == 0) / bg_total).astype(r.data.dtype)[None, :]
                term = a @ r
                bg = term if bg is None else bg + term
            rows.append(bg)
            ids.append(0)
        for n, (r, l) in enumerate(zip(shot, labs)):
            a = _masked_mean_matrix(l, n + 1, r.data.dtype)
            if a is not None:
                rows.append(a @ r)
                ids.append(n + 1)
        FP = ag.concat(rows)
        adjusted = FP
        if use_self:
            adjusted = adjusted + self_correlation_adjust(FQ, FS, FP, W_g)
        if use_cross:
            adjusted = adjusted + cross_correlation_adjust(FQ_mean, FS_mean, FP)
        for j, c in enumerate(ids):
            per_class[c].append(adjusted[j : j + 1])
    out, ids = [], []
    for c, items in enumerate(per_class):
        if not items:
            continue
        acc = items[0]
        for it in items[1:]:
            acc = acc + it
        out.append(acc * (1.0 / len(items)))
        ids.append(c)
    if any(c not in ids for c in range(1, n_ways + 1)):
        raise DataError("a target class has no support prototype")
    return ag.concat(out), np.array(ids)


def _normalize_rows(x: Tensor) -> Tensor:
    return x / ((x * x).sum(axis=1, keepdims=True) + NORM_EPS).sqrt()


def cosine_scores(query: Tensor, protos: Tensor) -> Tensor:
    return _normalize_rows(query) @ _normalize_rows(protos).T


# -- episode plumbing ------------------------------------------------------------


@dataclass
class EpisodeBatch:
    """Encoder features and aligned labels for one episode."""

    support_feats: List[List[np.ndarray]]
    support_labels: List[List[np.ndarray]]
    query_feats: List[np.ndarray]
    query_labels: List[Optional[np.ndarray]]
    query_ids: List[str]
    query_index: List[np.ndarray]
    query_rows: List[np.ndarray]
    n_ways: int


def episode_batch(episode: Episode, featurizer) -> EpisodeBatch:
    sf, sl = [], []
    for shots in episode.support:
        fs, ls = [], []
        for c in shots:
            f, idx = featurizer(c)
            fs.append(f)
            ls.append(c.labels[idx])
        sf.append(fs)
        sl.append(ls)
    qf, ql, qi, qr = [], [], [], []
    for q in episode.queries:
        f, idx = featurizer(q)
        rows, src = _scored(q, idx, featurizer.n_points)
        qf.append(f)
        ql.append(None if q.labels is None else q.labels[idx])
        qi.append(src)
        qr.append(rows)
    return EpisodeBatch(sf, sl, qf, ql, [q.id for q in episode.queries], qi, qr, episode.n_ways)


def _refine_batch(batch: EpisodeBatch, t, cfg: QuestConfig, train: bool, stats: dict):
    """Refine every cloud; in train mode all episode points form one BN batch."""
    clouds = [f for fs in batch.support_feats for f in fs] + list(batch.query_feats)
    sizes = [c.shape[0] for c in clouds]
    x = Tensor(np.concatenate(clouds).astype(cfg.dtype, copy=False))
    refined = _refine(x, t, train, cfg, stats)
    bounds = np.cumsum([0] + sizes)
    parts = [refined[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]
    k = len(batch.support_feats[0])
    support = [parts[n * k : (n + 1) * k] for n in range(batch.n_ways)]
    return support, parts[batch.n_ways * k :]


def episode_loss(
    batch: EpisodeBatch,
    params: QuestParams,
    cfg: QuestConfig = QuestConfig(),
    update_running: bool = False,
    use_cross: bool = True,
    use_self: bool = True,
):
    """Mean cross-entropy of ``softmax(temperature * cosine)`` over labeled query points.

    Returns ``(loss, grads)`` with one gradient array per learnable parameter.
    """
    if any(l is None for l in batch.query_labels):
        raise DataError("episode_loss needs labeled queries")
    t = _leaves(params, cfg.dtype, True)
    stats = {}
    support, queries = _refine_batch(batch, t, cfg, True, stats)
    protos, ids = quest_forward(support, batch.support_labels, queries, t, cfg, use_cross, use_self)
    q = ag.concat(queries)
    scores = cosine_scores(q, protos) * cfg.temperature
    logp = ag.log_softmax(scores, axis=1)
    labels = np.concatenate(batch.query_labels)
    col = np.full(batch.n_ways + 1, -1)
    col[ids] = np.arange(len(ids))
    target = np.where(labels >= 0, col[np.clip(labels, 0, None)], -1)
    rows = np.flatnonzero(target >= 0)
    if rows.size == 0:
        raise DataError("no query point has a class with a prototype")
    loss = -(logp[(rows, target[rows])].sum()) * (1.0 / rows.size)
    loss.backward()
    grads = {}
    for name in LEARNABLE:
        leaf = t[name]._parents[0] if t[name]._op == "astype" else t[name]
        grads[name] = np.zeros_like(params[name]) if leaf.grad is None else leaf.grad.astype(np.float64)
    if update_running:
        _update_running(params, stats, cfg.bn_momentum)
    return float(loss.data), grads


def loss_value(batch: EpisodeBatch, params: QuestParams, cfg: QuestConfig = QuestConfig(), **kw) -> float:
    """Forward-only loss (no running-stat update), for finite differences."""
    t = _leaves(params, cfg.dtype, False)
    support, queries = _refine_batch(batch, t, cfg, True, {})
    protos, ids = quest_forward(support, batch.support_labels, queries, t, cfg, **kw)
    scores = cosine_scores(ag.concat(queries), protos).data * cfg.temperature
    z = scores - scores.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    labels = np.concatenate(batch.query_labels)
    col = np.full(batch.n_ways + 1, -1)
    col[ids] = np.arange(len(ids))
    target = np.where(labels >= 0, col[np.clip(labels, 0, None)], -1)
    rows = np.flatnonzero(target >= 0)
    return float(-logp[rows, target[rows]].mean())


def segpn_predict(
    episode_or_batch, params: QuestParams, cfg: QuestConfig = QuestConfig(), featurizer=None
) -> List[QueryResult]:
    """Eval-mode prediction: argmax cosine similarity to the adjusted prototypes."""
    batch = episode_or_batch
    if isinstance(batch, Episode):
        if featurizer is None:
            raise ConfigError("a featurizer is required to predict from raw episodes")
        batch = episode_batch(batch, featurizer)
    t = _leaves(params, cfg.dtype, False)
    support, queries = _refine_batch(batch, t, cfg, False, {})
    protos, ids = quest_forward(support, batch.support_labels, queries, t, cfg)
    out = []
    for qid, q, rows, src, lab in zip(batch.query_ids, queries, batch.query_rows, batch.query_index, batch.query_labels):
        s = cosine_scores(q, protos).data[rows]
        logits = np.zeros((rows.size, batch.n_ways + 1))
        logits[:, ids] = s
        out.append(QueryResult(qid, src, ids[np.argmax(s, axis=1)], logits, None if lab is None else lab[rows]))
    return out


# -- optimization ---------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay and a step-halving learning rate."""

    def __init__(self, params: QuestParams, cfg: QuestConfig = QuestConfig()):
        self.cfg = cfg
        self.step_count = 0
        self.m = {n: np.zeros_like(params[n]) for n in LEARNABLE}
        self.v = {n: np.zeros_like(params[n]) for n in LEARNABLE}

    @property
    def lr(self) -> float:
        return self.cfg.lr * 0.5 ** (self.step_count // self.cfg.halve_every)

    def step(self, params: QuestParams, grads: Dict[str, np.ndarray]) -> float:
        lr = self.lr
        self.step_count += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for n in LEARNABLE:
            g = grads[n]
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            p = params.arrays[n]
            p *= 1 - lr * self.cfg.weight_decay
            p -= lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.cfg.adam_eps)
        return lr


def train(
    episodes: Iterable,
    params: QuestParams,
    opt: AdamW,
    cfg: QuestConfig = QuestConfig(),
    featurizer: Optional[CloudFeaturizer] = None,
    ckpt_path=None,
    callback=None,
):
    """One AdamW step per episode. Returns ``(params, trace)`` with trace rows ``(step, loss, lr)``.

    ``episodes`` may yield :class:`Episode` (needs ``featurizer``) or
    :class:`EpisodeBatch`. ``params`` is updated in place.
    """
    trace = []
    for ep in episodes:
        batch = ep if isinstance(ep, EpisodeBatch) else episode_batch(ep, featurizer)
        loss, grads = episode_loss(batch, params, cfg, update_running=True)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NumericalError(f"non-finite loss/gradient at step {opt.step_count + 1} (loss={loss})")
        lr = opt.step(params, grads)
        trace.append((opt.step_count, loss, lr))
        if callback is not None:
            callback(opt.step_count, loss, lr)
        if ckpt_path is not None and cfg.ckpt_every and opt.step_count % cfg.ckpt_every == 0:
            save_checkpoint(ckpt_path, params, opt)
    return params, trace


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in trace:
            w.writerow([step, f"{loss:.9g}", f"{lr:.9g}"])


# -- checkpoint -------------------------------------------------------------------


def save_checkpoint(path, params: QuestParams, opt: Optional[AdamW] = None) -> None:
    """``SNQP``, u32 version, u32 D, u32 H, fields as f32, u32 step, then first and second moments."""
    parts = [struct.pack("<4sIII", CKPT_MAGIC, CKPT_VERSION, params.D, params.H)]
    parts += [params[n].astype("<f4").tobytes() for n in FIELD_ORDER]
    parts.append(struct.pack("<I", 0 if opt is None else opt.step_count))
    for moments in ("m", "v"):
        for n in LEARNABLE:
            arr = np.zeros_like(params[n]) if opt is None else getattr(opt, moments)[n]
            parts.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, cfg: QuestConfig = QuestConfig()):
    """Returns ``(params, optimizer)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ParseError(path, "offset 0", "truncated header")
    magic, version, D, H = struct.unpack_from("<4sIII", raw, 0)
    if magic != CKPT_MAGIC:
        raise ParseError(path, "offset 0", f"bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise ParseError(path, "offset 4", f"unsupported version {version}")
    shapes = field_shapes(D, H)
    n_fields = sum(int(np.prod(shapes[n])) for n in FIELD_ORDER)
    n_moments = sum(int(np.prod(shapes[n])) for n in LEARNABLE)
    expected = 16 + 4 * n_fields + 4 + 8 * n_moments
    if len(raw) != expected:
        raise ParseError(path, "offset 16", f"expected {expected} bytes for D={D}, H={H}, got {len(raw)}")
    off = 16

    def read(shape):
        nonlocal off
        n = int(np.prod(shape))
        a = np.frombuffer(raw, "<f4", n, off).reshape(shape).astype(np.float64)
        off += 4 * n
        return a

    params = QuestParams(D, H, {n: read(shapes[n]) for n in FIELD_ORDER})
    (step,) = struct.unpack_from("<I", raw, off)
    off += 4
    opt = AdamW(params, cfg)
    opt.step_count = step
    opt.m = {n: read(shapes[n]) for n in LEARNABLE}
    opt.v = {n: read(shapes[n]) for n in LEARNABLE}
    return params, opt
