"""Hyperparameters for training and running an index.

Defaults are sized for large label spaces (alpha=10, beta=150,
lambda=0.05, K=2000, b=20, kappa ~ 10 L/C).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


@dataclass
class TrainConfig:
    num_clusters: int = 64
    alpha: float = 10.0
    beta: float = 150.0
    kappa: int | None = None
    lam: float = 0.05
    K: int = 2000
    b: int = 20
    num_epochs: int = 60
    stage1_epochs: int | None = None
    batch_size: int = 256
    seed: int = 0
    lr_w: float = 0.01
    lr_phi: float = 1e-4
    weight_decay: float = 0.01
    accum_steps: int = 10
    encoder: str = "linear"
    dim: int = 64
    init_scale: float = 1.0
    cluster_max_iters: int = 50
    ranker_topk: int = 100
    ranker_reg: float = 1.0
    ranker_max_iter: int = 100
    threads: int = 1

    def validate(self, num_labels=None):
        for name in ("num_clusters", "alpha", "beta", "K", "b", "num_epochs", "batch_size", "dim", "accum_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.b > self.num_clusters:
            raise ValueError(f"beam size b={self.b} exceeds num_clusters={self.num_clusters}")
        if num_labels is not None:
            if self.num_clusters > num_labels:
                raise ValueError("more clusters than labels")
        if self.stage1_epochs is not None and not 0 <= self.stage1_epochs <= self.num_epochs:
            raise ValueError("stage1_epochs must lie in [0, num_epochs]")
        return self

    @property
    def epochs_stage1(self):
        return self.num_epochs // 2 if self.stage1_epochs is None else self.stage1_epochs

    @property
    def epochs_stage2(self):
        return self.num_epochs - self.epochs_stage1

    def resolved_kappa(self, num_labels):
        if self.kappa is not None:
            return int(self.kappa)
        return int(round(10 * num_labels / self.num_clusters))

    def resolved_K(self, num_labels):
        return min(self.K, num_labels)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def load_toml(path):
    with open(path, "rb") as f:
        return tomllib.load(f)
