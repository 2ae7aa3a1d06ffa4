import numpy as np
import pytest

from elias.analysis import prune_threshold
from elias.config import TrainConfig
from elias.exceptions import DataFormatError, InvariantError
from elias.index import all_edge_scores, cluster_scores
from elias.model import Batch, forward_backward
from elias.synthetic import make_planted_dataset
from elias.training import (
    Checkpoint,
    init_adjacency_from,
    train,
    train_ensemble,
    train_stage1,
    train_stage2,
)

CFG = TrainConfig(num_clusters=8, alpha=2.0, beta=20.0, kappa=24, K=48, b=2, num_epochs=10,
                  batch_size=64, lr_w=0.02, lr_phi=1e-3, dim=16)


@pytest.fixture(scope="module")
def data():
    train_ds, test_ds, _ = make_planted_dataset(num_labels=64, num_train=600, num_test=200, num_topics=8,
                                                words_per_topic=12, noise_words=32, seed=0)
    return train_ds, test_ds


@pytest.fixture(scope="module")
def stages(data):
    return train(data[0], CFG)


def test_stage1_loss_decreases(stages):
    s1, _ = stages
    assert s1.stage == "stage1" and len(s1.history) == 5
    assert np.all(np.diff(s1.history[:5]) < 0)


def test_stage2_loss_decreases(stages):
    s1, s2 = stages
    h = s2.history[len(s1.history):]
    assert len(h) == 5 and h[-1] < h[0]


def test_partition_edges_pass_parent_scores(stages, data):
    s1, _ = stages
    A = s1.params.A
    assert np.all(A.counts == s1.partition.cluster_sizes())
    # beta >= L / C and uniform weights: every edge score saturates at 1
    assert np.all(all_edge_scores(A, CFG.beta)[A.mask] == 1.0)
    batch = Batch.from_dataset(data[0], np.arange(20))
    res = forward_backward(s1.params, batch, CFG.alpha, CFG.beta, CFG.b, CFG.K, CFG.lam, train_A=False,
                           compute_grad=False, keep_shortlists=True)
    Phi = s1.params.encoder.encode_batch(batch.X, batch.rows)
    S = cluster_scores(s1.params.W_C, Phi, CFG.alpha)
    for i, sl in enumerate(res.shortlists):
        np.testing.assert_allclose(sl.scores, S[i, s1.partition.assignment[sl.labels]], rtol=1e-12)


def test_seed_determinism(data, stages):
    again = train_stage1(data[0], CFG)
    assert again.history == stages[0].history
    assert np.array_equal(again.params.W_L, stages[0].params.W_L)


def test_stage2_keeps_support(stages, data):
    s1, s2 = stages
    init = init_adjacency_from(s1, data[0])
    assert s2.params.A.same_support(init.params.A)
    assert not np.array_equal(s2.params.A.weights, init.params.A.weights)
    assert init.params.A.kappa == CFG.kappa
    assert np.all(init.params.A.label_degrees() > 0)


def test_stage_preconditions(stages, data):
    s1, s2 = stages
    with pytest.raises(InvariantError, match="init-adjacency"):
        train_stage2(s1, data[0])
    with pytest.raises(InvariantError):
        init_adjacency_from(s2, data[0])


def test_checkpoint_round_trip(stages, tmp_path):
    _, s2 = stages
    path = tmp_path / "m.ckpt"
    s2.save(str(path))
    back = Checkpoint.load(str(path))
    assert back.stage == "stage2" and back.config == s2.config and back.history == s2.history
    for name, arr in s2.params.groups().items():
        assert np.array_equal(back.params.groups()[name], arr)
    assert np.array_equal(back.partition.assignment, s2.partition.assignment)
    assert not back.params.A.is_pruned
    # a pruned adjacency carries its frozen normaliser through the file
    pruned = prune_threshold(s2.params.A, CFG.beta, 0.3).adjacency
    s2.params.A, orig = pruned, s2.params.A
    try:
        s2.save(str(path))
    finally:
        s2.params.A = orig
    back = Checkpoint.load(str(path))
    np.testing.assert_array_equal(back.params.A.pruned_lse, pruned.pruned_lse)
    path.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(DataFormatError):
        Checkpoint.load(str(path))


def test_config_validation():
    with pytest.raises(ValueError):
        CFG.replace(b=9).validate()
    with pytest.raises(ValueError):
        CFG.replace(lam=-1).validate()
    with pytest.raises(ValueError):
        CFG.replace(stage1_epochs=11).validate()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})
    assert CFG.epochs_stage1 == CFG.epochs_stage2 == 5


@pytest.mark.slow
def test_ensemble_distinct_partitions(data):
    cfg = CFG.replace(num_epochs=2)
    models = train_ensemble(data[0], cfg, seeds=(0, 1, 2))
    parts = [m.partition.assignment for m in models]
    assert not np.array_equal(parts[0], parts[1]) and not np.array_equal(parts[1], parts[2])
    again = train_ensemble(data[0], cfg, seeds=(1,))[0]
    assert np.array_equal(again.params.A.weights, models[1].params.A.weights)
