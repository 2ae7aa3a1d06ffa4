"""Synthetic extreme-classification data with planted label structure.

Labels live in latent topics. Each label owns one "mode" (a small word set
inside its topic's vocabulary block); a chosen fraction of labels is
bimodal and owns a second mode in a different topic. Points are drawn from
one topic at a time and carry one to three labels of that topic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from elias.data import Dataset


@dataclass
class PlantedInfo:
    label_topics: list
    bimodal: np.ndarray
    num_topics: int


def make_planted_dataset(
    num_labels=2000,
    num_train=12000,
    num_test=3000,
    num_topics=32,
    bimodal_frac=0.2,
    words_per_topic=48,
    words_per_mode=5,
    noise_words=256,
    extra_labels=0.6,
    zipf=0.5,
    seed=0,
):
    """Return ``(train, test, info)``."""
    rng = np.random.default_rng(seed)
    L, T = num_labels, num_topics
    D = T * words_per_topic + noise_words
    perm = rng.permutation(L)
    home = np.empty(L, dtype=np.int64)
    home[perm] = np.arange(L) % T
    bimodal = np.zeros(L, dtype=bool)
    bimodal[rng.choice(L, size=int(round(bimodal_frac * L)), replace=False)] = True

    label_topics = []
    mode_words = {}
    labels_in_topic = [[] for _ in range(T)]
    for lab in range(L):
        topics = [int(home[lab])]
        if bimodal[lab]:
            other = int(rng.integers(T - 1))
            topics.append(other + (other >= topics[0]))
        label_topics.append(topics)
        for t in topics:
            block = t * words_per_topic
            mode_words[lab, t] = block + rng.choice(words_per_topic, size=words_per_mode, replace=False)
            labels_in_topic[t].append(lab)
    labels_in_topic = [np.array(v, dtype=np.int64) for v in labels_in_topic]
    weights = (1.0 + rng.permutation(L)) ** -zipf

    modes = [(lab, t) for lab in range(L) for t in label_topics[lab]]
    mode_p = np.array([weights[lab] / len(label_topics[lab]) for lab, _ in modes])
    mode_p /= mode_p.sum()

    def draw(n, guaranteed):
        rows_x, rows_y = [], []
        firsts = list(guaranteed) + [modes[k] for k in rng.choice(len(modes), size=n - len(guaranteed), p=mode_p)]
        for lab, t in firsts:
            cand = labels_in_topic[t]
            cand = cand[cand != lab]
            n_extra = min(rng.poisson(extra_labels), 2, cand.size)
            extra = rng.choice(cand, size=n_extra, replace=False, p=weights[cand] / weights[cand].sum()) if n_extra else []
            labs = [lab, *extra]
            feats = {}
            for l2 in labs:
                for w in rng.choice(mode_words[l2, t], size=3, replace=False):
                    feats[w] = feats.get(w, 0.0) + rng.uniform(1.0, 2.0)
            for w in t * words_per_topic + rng.choice(words_per_topic, size=2, replace=False):
                feats[w] = feats.get(w, 0.0) + rng.uniform(0.3, 0.8)
            for w in T * words_per_topic + rng.choice(noise_words, size=2, replace=False):
                feats[w] = feats.get(w, 0.0) + rng.uniform(0.2, 0.6)
            rows_x.append(feats)
            rows_y.append(sorted(labs))
        return _to_dataset(rows_x, rows_y, D, L)

    # every mode appears at least once in training
    order = rng.permutation(len(modes))
    guaranteed = [modes[k] for k in order]
    train = draw(max(num_train, len(guaranteed)), guaranteed)
    test = draw(num_test, [])
    return train, test, PlantedInfo(label_topics, bimodal, T)


def _to_dataset(rows_x, rows_y, D, L):
    ind, val, ptr = [], [], [0]
    for feats in rows_x:
        keys = sorted(feats)
        v = np.array([feats[k] for k in keys])
        v /= np.linalg.norm(v)
        ind.extend(keys)
        val.extend(v)
        ptr.append(len(ind))
    X = sp.csr_matrix((np.array(val), np.array(ind, dtype=np.int64), np.array(ptr)), shape=(len(rows_x), D))
    yi, yp = [], [0]
    for labs in rows_y:
        yi.extend(labs)
        yp.append(len(yi))
    Y = sp.csr_matrix((np.ones(len(yi)), np.array(yi, dtype=np.int64), np.array(yp)), shape=(len(rows_y), L))
    return Dataset(X, Y)


def planted_label_groups(num_labels=64, num_groups=4, dim=32, noise=0.05, seed=0):
    """Label centroids around ``num_groups`` orthogonal directions; returns (centroids, group ids)."""
    rng = np.random.default_rng(seed)
    groups = np.arange(num_labels) % num_groups
    rng.shuffle(groups)
    basis = np.linalg.qr(rng.standard_normal((dim, num_groups)))[0].T
    pts = basis[groups] + noise * rng.standard_normal((num_labels, dim))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True), groups


def synthetic_config(**overrides):
    """Hyperparameters used for the planted dataset (2000 labels, 32 clusters).

    ``b = 4 >= alpha`` so that saturated cluster scores do not tie, ``beta``
    sits near ``L / C`` and ``K = b * kappa`` makes the shortlist exhaustive.
    """
    from elias.config import TrainConfig

    cfg = TrainConfig(
        num_clusters=32, alpha=4.0, b=4, beta=100.0, kappa=250, K=1000, lam=0.05,
        num_epochs=40, batch_size=256, lr_w=0.02, lr_phi=1e-3, accum_steps=10, dim=64,
    )
    return cfg.replace(**overrides)


def make_synthetic_splits(seed=0, num_val=2000, num_test=3000, **kw):
    """``(train, val, test, info)``; validation and test come from the same held-out draw."""
    train, pool, info = make_planted_dataset(num_test=num_val + num_test, seed=seed, **kw)
    val = pool.subset(np.arange(num_val))
    test = pool.subset(np.arange(num_val, num_val + num_test))
    return train, val, test, info
