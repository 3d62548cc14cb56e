"""Finite-difference verification of the QUEST gradients.

The loss is re-evaluated by :func:`reference_loss`, a plain numpy forward
written separately from the autograd graph in :mod:`segnn.quest`. Besides
the loss it returns the piecewise-linear activation pattern (ReLU masks and
max-pool winners); an entry whose central difference interval changes the
pattern straddles a kink, where the derivative does not exist, and is
reported separately instead of being scored.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .encoder import EncoderConfig
from .fewshot import make_featurizer
from .quest import LEARNABLE, EpisodeBatch, QuestConfig, QuestParams, episode_batch, episode_loss, init_params
from .synth import SceneSpec, build_corpus, sample_episode

FD_STEP = 1e-5
# gradients that vanish identically (biases feeding a batch norm) leave only
# finite-difference round-off, ~1e-11; this floor keeps those from reading as 100% error
DENOM_FLOOR = 1e-5


def _bn_train(x, scale, shift, eps):
    mu = x.mean(axis=0)
    var = ((x - mu) ** 2).mean(axis=0)
    return (x - mu) / np.sqrt(var + eps) * scale + shift


def _pool(x, kernel):
    m, c = x.shape
    n_win = -(-m // kernel)
    padded = np.full((n_win * kernel, c), -np.inf)
    padded[:m] = x
    win = padded.reshape(n_win, kernel, c)
    return win.max(axis=1), win.argmax(axis=1)


def reference_loss(batch: EpisodeBatch, p: Dict[str, np.ndarray], cfg: QuestConfig):
    """Loss and activation pattern of one episode (train-mode BN)."""
    pattern: List[np.ndarray] = []
    clouds = [f for fs in batch.support_feats for f in fs] + list(batch.query_feats)
    x = np.concatenate(clouds).astype(np.float64)
    h = _bn_train(x, p["bn0.scale"], p["bn0.shift"], cfg.bn_eps)
    pattern.append(h > 0)
    h = np.maximum(h, 0)
    for lin, bn in (("lin1", "bn1"), ("lin2", "bn2")):
        h = _bn_train(h @ p[f"{lin}.weight"] + p[f"{lin}.bias"], p[f"{bn}.scale"], p[f"{bn}.shift"], cfg.bn_eps)
        pattern.append(h > 0)
        h = np.maximum(h, 0)

    sizes = [c.shape[0] for c in clouds]
    starts = np.cumsum([0] + sizes)
    refined = [h[a:b] for a, b in zip(starts[:-1], starts[1:])]
    n, k = batch.n_ways, len(batch.support_feats[0])
    sup = [refined[i * k : (i + 1) * k] for i in range(n)]
    qry = refined[n * k :]

    def stats(parts):
        pooled = []
        for r in parts:
            mx, arg = _pool(r, cfg.kernel)
            pattern.append(arg)
            pooled.append(mx)
        proj = [x @ p["W"] for x in pooled]
        s = np.concatenate(proj)
        return s / np.sqrt(s.shape[0]), np.mean(proj, axis=0) / np.sqrt(proj[0].shape[0])

    fq, fq_mean = stats(qry)
    per_class = {}
    for shot in range(k):
        rs = [sup[i][shot] for i in range(n)]
        ls = [batch.support_labels[i][shot] for i in range(n)]
        fs, fs_mean = stats(rs)
        protos, ids = [], []
        bg = np.concatenate([r[l == 0] for r, l in zip(rs, ls)])
        if bg.shape[0]:
            protos.append(bg.mean(axis=0))
            ids.append(0)
        for i, (r, l) in enumerate(zip(rs, ls)):
            if np.any(l == i + 1):
                protos.append(r[l == i + 1].mean(axis=0))
                ids.append(i + 1)
        fp = np.array(protos)
        gap = (fq.T @ fq - fs.T @ fs) @ p["W_g"]
        c = fq_mean.T @ fs_mean
        e = np.exp(c - c.max(axis=1, keepdims=True))
        sm = e / e.sum(axis=1, keepdims=True)
        adjusted = fp + fp * gap[:, 0] + fp @ sm.T
        for cid, row in zip(ids, adjusted):
            per_class.setdefault(cid, []).append(row)
    ids = sorted(per_class)
    star = np.array([np.mean(per_class[c], axis=0) for c in ids])

    q = np.concatenate(qry)
    qn = q / np.sqrt((q * q).sum(axis=1, keepdims=True) + 1e-12)
    pn = star / np.sqrt((star * star).sum(axis=1, keepdims=True) + 1e-12)
    scores = cfg.temperature * (qn @ pn.T)
    z = scores - scores.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    labels = np.concatenate(batch.query_labels)
    col = {c: j for j, c in enumerate(ids)}
    rows = [(i, col[l]) for i, l in enumerate(labels) if l >= 0 and l in col]
    r, cidx = np.array(rows).T
    return float(-logp[r, cidx].mean()), pattern


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class TensorCheck:
    name: str
    rel_error: float
    checked: int
    kinks: int


def check_gradients(batch: EpisodeBatch, params: QuestParams, cfg: QuestConfig, step: float = FD_STEP):
    """Compare analytic gradients with central differences, tensor by tensor.

    The error of a tensor is ``||g - g_fd|| / max(||g||, ||g_fd||, DENOM_FLOOR)``
    over the entries whose difference interval is kink-free.
    """
    _, grads = episode_loss(batch, params, cfg)
    arrays = {k: v.copy() for k, v in params.arrays.items()}
    _, base = reference_loss(batch, arrays, cfg)
    out = []
    for name in LEARNABLE:
        a = arrays[name]
        ana, num, kinks = [], [], 0
        for i in np.ndindex(a.shape):
            old = a[i]
            a[i] = old + step
            lp, pp = reference_loss(batch, arrays, cfg)
            a[i] = old - step
            lm, pm = reference_loss(batch, arrays, cfg)
            a[i] = old
            if not (_same_pattern(pp, base) and _same_pattern(pm, base)):
                kinks += 1
                continue
            num.append((lp - lm) / (2 * step))
            ana.append(grads[name][i])
        ana, num = np.array(ana), np.array(num)
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), DENOM_FLOOR)
        out.append(TensorCheck(name, float(np.linalg.norm(ana - num) / denom), len(num), kinks))
    return out


def toy_setup(seed: int, m: int = 64, hidden: int = 8, d: int = 2, kernel: int = 8):
    """Small labeled 2-way 1-shot episode batch plus fresh parameters."""
    spec = SceneSpec(scene_points=m, points_per_object=m // 4, min_floor_points=m // 4)
    corpus = build_corpus(spec, 12, seed=seed)
    enc = EncoderConfig(d=d, seed=seed)
    featurizer = make_featurizer(enc, n_points=m, seed=seed)
    batch = episode_batch(sample_episode(corpus, 2, 1, 2, seed, "train"), featurizer)
    cfg = QuestConfig(hidden=hidden, kernel=kernel, dtype="float64")
    return batch, init_params(enc.output_dim, hidden, seed), cfg


def run_suite(seeds=range(20), **toy):
    """Max relative error over all tensors and seeds, plus per-seed details."""
    details = []
    for s in seeds:
        batch, params, cfg = toy_setup(int(s), **toy)
        details.append((int(s), check_gradients(batch, params, cfg)))
    worst = max(c.rel_error for _, checks in details for c in checks)
    return worst, details
