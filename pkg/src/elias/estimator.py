"""End-to-end pipeline glue and a scikit-learn style estimator wrapper."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from elias.config import TrainConfig
from elias.data import Dataset
from elias.encoder import static_reps
from elias.metrics import RankedPrediction
from elias.model import predict as _predict
from elias.ranker import ScoreCalibrator, SparseRanker, calibration_features

# -- input validation ----------------------------------------------------------


def check_features(X, num_features=None):
    """CSR float64 feature matrix with finite values."""
    if not sp.issparse(X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"expected a 2-d feature matrix, got shape {X.shape}")
    X = sp.csr_matrix(X, dtype=np.float64)
    if not np.all(np.isfinite(X.data)):
        raise ValueError("feature matrix contains non-finite values")
    if num_features is not None and X.shape[1] != num_features:
        raise ValueError(f"expected {num_features} features, got {X.shape[1]}")
    return X


def check_labels(Y, num_points, num_labels=None):
    """Binary CSR label matrix; a list of label-id lists is also accepted."""
    if not sp.issparse(Y) and not isinstance(Y, np.ndarray):
        if num_labels is None:
            num_labels = 1 + max((max(r) for r in Y if len(r)), default=-1)
        ind = [np.asarray(r, dtype=np.int64) for r in Y]
        ptr = np.r_[0, np.cumsum([r.size for r in ind])]
        flat = np.concatenate(ind) if ind else np.zeros(0, np.int64)
        Y = sp.csr_matrix((np.ones(flat.size), flat, ptr), shape=(len(ind), num_labels))
    Y = sp.csr_matrix(Y, dtype=np.float64)
    Y.sum_duplicates()
    Y.data[:] = 1.0
    Y.eliminate_zeros()
    if Y.shape[0] != num_points:
        raise ValueError(f"{num_points} feature rows but {Y.shape[0]} label rows")
    if num_labels is not None and Y.shape[1] != num_labels:
        raise ValueError(f"expected {num_labels} labels, got {Y.shape[1]}")
    return Y


# -- prediction and re-ranking -------------------------------------------------


def predict_ranked(params, cfg, X, topk=100, rows=None):
    """Prediction-mode top-``topk`` labels with their ELIAS scores ``p``."""
    rows = np.arange(X.shape[0]) if rows is None else np.asarray(rows)
    K = cfg.resolved_K(params.A.num_labels)
    preds = _predict(params, X, rows, cfg.alpha, cfg.beta, cfg.b, K, topk=topk)
    return RankedPrediction([p.labels for p in preds], [p.scores for p in preds]), preds


def encode_static(params, X, rows=None):
    rows = np.arange(X.shape[0]) if rows is None else np.asarray(rows)
    return static_reps(X, params.encoder.encode_batch(X, rows))


def label_frequency(Y):
    return np.asarray(sp.csr_matrix(Y).sum(axis=0)).ravel()


def _pair_arrays(ranked, ranker, Psi):
    q = ranker.predict_proba(Psi, ranked.labels)
    return np.concatenate(ranked.scores), np.concatenate(q), np.concatenate(ranked.labels)


def fit_reranker(params, cfg, train, val):
    """Sparse ranker on ``train`` top-k candidates, calibration tree on ``val``."""
    ranked_tr, _ = predict_ranked(params, cfg, train.X, cfg.ranker_topk)
    Psi_tr = encode_static(params, train.X)
    ranker = SparseRanker(reg=cfg.ranker_reg, max_iter=cfg.ranker_max_iter, n_jobs=cfg.threads)
    ranker.fit(Psi_tr, train.Y, ranked_tr.labels)

    ranked_va, _ = predict_ranked(params, cfg, val.X, cfg.ranker_topk)
    p, q, lab = _pair_arrays(ranked_va, ranker, encode_static(params, val.X))
    pts = np.repeat(np.arange(len(ranked_va)), [len(l) for l in ranked_va.labels])
    y = np.asarray(val.Y[pts, lab]).ravel() > 0
    freq = label_frequency(train.Y)
    calib = ScoreCalibrator().fit(calibration_features(p, q, freq[lab]), y)
    return ranker, calib


def rerank(ranked, Psi, ranker, calibrator, label_freq):
    """Re-score each point's candidates with ``T(p, q, pq, f) + pq``; the label sets are kept."""
    if not len(ranked):
        return ranked
    p, q, lab = _pair_arrays(ranked, ranker, Psi)
    scores = calibrator.score_pairs(p, q, np.asarray(label_freq, dtype=np.float64)[lab])
    splits = np.cumsum([len(l) for l in ranked.labels])[:-1]
    return RankedPrediction.from_scores(ranked.labels, np.split(scores, splits))


# -- estimator -----------------------------------------------------------------


class ELIASClassifier(BaseEstimator):
    """Two-stage learnable-index extreme classifier.

    ``fit`` runs the balanced clustering, stage 1, adjacency initialisation
    and stage 2. ``predict`` returns a sparse (n, L) matrix holding the top
    ``topk`` scores per row; ``predict_ranked`` returns the ranked lists.
    """

    def __init__(self, num_clusters=64, alpha=10.0, beta=150.0, kappa=None, lam=0.05, K=2000, b=20,
                 num_epochs=60, stage1_epochs=None, batch_size=256, lr_w=0.01, lr_phi=1e-4,
                 weight_decay=0.01, accum_steps=10, dim=64, topk=100, seed=0):
        self.num_clusters = num_clusters
        self.alpha = alpha
        self.beta = beta
        self.kappa = kappa
        self.lam = lam
        self.K = K
        self.b = b
        self.num_epochs = num_epochs
        self.stage1_epochs = stage1_epochs
        self.batch_size = batch_size
        self.lr_w = lr_w
        self.lr_phi = lr_phi
        self.weight_decay = weight_decay
        self.accum_steps = accum_steps
        self.dim = dim
        self.topk = topk
        self.seed = seed

    def _config(self):
        params = self.get_params()
        params.pop("topk")
        return TrainConfig(**params)

    def fit(self, X, Y):
        from elias.training import train

        X = check_features(X)
        Y = check_labels(Y, X.shape[0])
        cfg = self._config().validate(Y.shape[1])
        self.stage1_, self.checkpoint_ = train(Dataset(X, Y), cfg)
        self.config_ = cfg
        self.n_features_in_ = X.shape[1]
        self.n_labels_ = Y.shape[1]
        return self

    def predict_ranked(self, X):
        check_is_fitted(self, "checkpoint_")
        X = check_features(X, self.n_features_in_)
        return predict_ranked(self.checkpoint_.params, self.config_, X, self.topk)[0]

    def predict(self, X):
        return self.predict_ranked(X).to_csr(self.n_labels_)

    def decision_function(self, X):
        return self.predict(X)
