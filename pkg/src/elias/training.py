"""Two-stage training: fixed-partition stage 1, adjacency initialisation, joint stage 2."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from elias.clustering import Partition, build_partition, label_centroids
from elias.config import TrainConfig
from elias.encoder import Encoder, static_reps
from elias.exceptions import DataFormatError, DivergenceError, InvariantError
from elias.index import AdjacencyMatrix, cluster_scores, init_adjacency
from elias.model import Batch, ModelParams, forward_backward
from elias.optim import AdamW

logger = logging.getLogger(__name__)

MAGIC = b"ELIASCKP"
VERSION = 1
STAGES = ("stage1", "init", "stage2")


@dataclass
class Checkpoint:
    params: ModelParams
    partition: Partition
    config: TrainConfig
    stage: str
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    def save(self, path):
        arrays = {
            "W_C": self.params.W_C,
            "W_L": self.params.W_L,
            "partition": self.partition.assignment,
            "A_indices": self.params.A.indices,
            "A_weights": self.params.A.weights,
            "A_counts": self.params.A.counts,
        }
        if self.params.A.is_pruned:
            arrays["A_pruned_lse"] = self.params.A.pruned_lse
        enc = self.params.encoder
        if enc.mode == "linear":
            arrays["projection"] = enc.projection
        else:
            arrays["embeddings"] = enc.embeddings
        manifest, blobs, offset = [], [], 0
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            dtype = "<f8" if arr.dtype.kind == "f" else "<i8"
            raw = arr.astype(dtype).tobytes()
            manifest.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
            blobs.append(raw)
            offset += len(raw)
        header = json.dumps(
            {
                "stage": self.stage,
                "config": self.config.to_dict(),
                "encoder": {"mode": enc.mode, "dim": enc.dim},
                "num_clusters": self.partition.num_clusters,
                "num_labels": self.params.A.num_labels,
                "history": self.history,
                "arrays": manifest,
            },
            sort_keys=True,
        ).encode()
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", VERSION, len(header)))
            f.write(header)
            for raw in blobs:
                f.write(raw)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            buf = f.read()
        if buf[:8] != MAGIC:
            raise DataFormatError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack_from("<II", buf, 8)
        if version != VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(buf[16:16 + hlen])
        base = 16 + hlen
        arrays = {}
        for spec in header["arrays"]:
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            arr = np.frombuffer(buf, dtype=spec["dtype"], count=count, offset=base + spec["offset"])
            arrays[spec["name"]] = arr.reshape(spec["shape"]).astype(
                np.float64 if spec["dtype"] == "<f8" else np.int64
            )
        enc_info = header["encoder"]
        if enc_info["mode"] == "linear":
            enc = Encoder("linear", enc_info["dim"], projection=arrays["projection"])
        else:
            enc = Encoder.precomputed(arrays["embeddings"])
        A = AdjacencyMatrix(arrays["A_indices"], arrays["A_weights"], arrays["A_counts"], header["num_labels"],
                            arrays.get("A_pruned_lse"))
        params = ModelParams(enc, arrays["W_C"], arrays["W_L"], A)
        partition = Partition(arrays["partition"], header["num_clusters"])
        return cls(params, partition, TrainConfig.from_dict(header["config"]), header["stage"], header["history"])


def _seeds(seed):
    ss = np.random.SeedSequence(seed)
    names = ("cluster", "encoder", "W_C", "W_L", "shuffle1", "adjacency", "shuffle2")
    return {n: int(s.generate_state(1)[0]) for n, s in zip(names, ss.spawn(len(names)))}


def make_encoder(dataset, cfg, embeddings=None):
    if cfg.encoder == "precomputed":
        if embeddings is None:
            raise ValueError("precomputed encoder mode needs an embedding matrix")
        return Encoder.precomputed(embeddings)
    return Encoder.linear(dataset.num_features, cfg.dim, seed=_seeds(cfg.seed)["encoder"], scale=cfg.init_scale)


def fit_partition(dataset, encoder, cfg):
    """Balanced partition of the labels from centroids of the static reps."""
    Phi = encoder.encode_batch(dataset.X, np.arange(dataset.num_points))
    Psi = static_reps(dataset.X, Phi)
    centroids, zero = label_centroids(dataset.Y, Psi)
    return build_partition(
        centroids, cfg.num_clusters, seed=_seeds(cfg.seed)["cluster"], max_iters=cfg.cluster_max_iters,
        zero_mask=zero,
    )


def init_params(dataset, cfg, partition, embeddings=None):
    seeds = _seeds(cfg.seed)
    enc = make_encoder(dataset, cfg, embeddings)
    W_C = np.random.default_rng(seeds["W_C"]).standard_normal((cfg.num_clusters, enc.dim)) * 0.01
    W_L = np.random.default_rng(seeds["W_L"]).standard_normal((dataset.num_labels, enc.dim)) * 0.01
    return ModelParams(enc, W_C, W_L, AdjacencyMatrix.from_partition(partition))


def make_optimizer(cfg, params, train_A):
    groups = {
        "W_C": dict(lr=cfg.lr_w, weight_decay=cfg.weight_decay),
        "W_L": dict(lr=cfg.lr_w, weight_decay=cfg.weight_decay, accum_steps=cfg.accum_steps),
    }
    if params.encoder.trainable:
        groups["encoder"] = dict(lr=cfg.lr_phi, weight_decay=cfg.weight_decay)
    if train_A:
        groups["A"] = dict(lr=cfg.lr_w, weight_decay=0.0)
    return AdamW(groups)


def run_epochs(params, dataset, cfg, epochs, train_A, seed, callback=None):
    """Mini-batch training; returns the mean training loss of every epoch."""
    K = cfg.resolved_K(dataset.num_labels)
    opt = make_optimizer(cfg, params, train_A)
    rng = np.random.default_rng(seed)
    history = []
    N = dataset.num_points
    for epoch in range(epochs):
        perm = rng.permutation(N)
        total = 0.0
        for lo in range(0, N, cfg.batch_size):
            rows = np.sort(perm[lo:lo + cfg.batch_size])
            batch = Batch.from_dataset(dataset, rows)
            res = forward_backward(params, batch, cfg.alpha, cfg.beta, cfg.b, K, cfg.lam, train_A=train_A)
            if not np.isfinite(res.loss.total):
                raise DivergenceError(f"loss became non-finite in epoch {epoch}")
            total += res.loss.total * len(batch)
            opt.step(params.groups(), res.grads)
            params.A.invalidate()
        history.append(total / N)
        logger.info("epoch %d loss %.6f", epoch, history[-1])
        if callback is not None:
            callback(epoch, params)
    return history


def train_stage1(dataset, cfg, embeddings=None, partition=None, epochs=None):
    """Train encoder, cluster and label classifiers with the adjacency fixed to a partition."""
    cfg.validate(dataset.num_labels)
    if partition is None:
        enc = make_encoder(dataset, cfg, embeddings)
        partition = fit_partition(dataset, enc, cfg)
    params = init_params(dataset, cfg, partition, embeddings)
    epochs = cfg.epochs_stage1 if epochs is None else epochs
    try:
        history = run_epochs(params, dataset, cfg, epochs, train_A=False, seed=_seeds(cfg.seed)["shuffle1"])
    except DivergenceError as err:
        err.checkpoint = Checkpoint(params, partition, cfg, "stage1")
        raise
    return Checkpoint(params, partition, cfg, "stage1", history)


def init_adjacency_from(stage1, dataset, cfg=None):
    """Replace the partition adjacency of a stage-1 checkpoint by the learned-support init."""
    cfg = stage1.config if cfg is None else cfg
    if stage1.stage != "stage1":
        raise InvariantError(f"adjacency initialisation needs a stage-1 checkpoint, got {stage1.stage!r}")
    params = stage1.params.copy()
    Phi = params.encoder.encode_batch(dataset.X, np.arange(dataset.num_points))
    S = cluster_scores(params.W_C, Phi, cfg.alpha)
    kappa = max(cfg.resolved_kappa(dataset.num_labels), int(stage1.partition.cluster_sizes().max()))
    A, _ = init_adjacency(S, dataset.Y, stage1.partition, cfg.b, kappa, seed=_seeds(cfg.seed)["adjacency"])
    A.validate()
    params.A = A
    return Checkpoint(params, stage1.partition, cfg, "init", list(stage1.history))


def train_stage2(ckpt, dataset, cfg=None, epochs=None):
    """Joint training of all parameter groups; the adjacency support stays fixed."""
    cfg = ckpt.config if cfg is None else cfg
    if ckpt.stage != "init":
        raise InvariantError("stage 2 needs an initialised adjacency (run init-adjacency first)")
    params = ckpt.params.copy()
    support = params.A.copy()
    epochs = cfg.epochs_stage2 if epochs is None else epochs
    try:
        history = run_epochs(params, dataset, cfg, epochs, train_A=True, seed=_seeds(cfg.seed)["shuffle2"])
    except DivergenceError as err:
        err.checkpoint = Checkpoint(params, ckpt.partition, cfg, "stage2")
        raise
    if not params.A.same_support(support):
        raise InvariantError("adjacency support changed during stage 2")
    return Checkpoint(params, ckpt.partition, cfg, "stage2", list(ckpt.history) + history)


def train(dataset, cfg, embeddings=None):
    """Both stages end to end; returns ``(stage1, stage2)`` checkpoints."""
    s1 = train_stage1(dataset, cfg, embeddings)
    s2 = train_stage2(init_adjacency_from(s1, dataset), dataset)
    return s1, s2


def train_ensemble(dataset, cfg, seeds=(0, 1, 2), embeddings=None):
    """Independent full runs differing only in their seed (and hence initial clustering)."""
    return [train(dataset, cfg.replace(seed=s), embeddings)[1] for s in seeds]
