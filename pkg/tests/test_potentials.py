import math

import numpy as np
import pytest

from cltm.data import LabeledDataset
from cltm.latent_tree import LatentTree
from cltm.potentials import (BaselineModel, CltmModel, Mlp, TrainConfig, TrainingError, init_cltm,
                             independent_baseline_train, load_model, loss_gradient, marginal_nll_loss,
                             mlp_forward, potential_gradients, save_model, sgd_train)
from cltm.synthetic import brute_force_inference, random_ground_truth, random_latent_tree, sample_dataset
from cltm.tree_crf import UNSET, Potentials, log_partition, marginals
from helpers import random_tree


def make_model(tree, d, rng, depth=2, widths=None):
    cfg = TrainConfig(depth=depth, hidden_widths=widths, dropout_rate=0.0, edge_l2=0.0, standardize=False)
    model = init_cltm(tree, np.zeros((1, d)), cfg, rng)
    model.edge_potentials = rng.uniform(-2, 2, len(tree.edges))
    for b in model.mlp.biases:
        b += rng.uniform(-0.5, 0.5, b.shape)
    return model


def flat_params(model):
    return [*model.mlp.weights, *model.mlp.biases, model.edge_potentials]


def test_single_layer_identity():
    mlp = Mlp([np.eye(3)], [np.zeros(3)], 0.0)
    x = np.array([[0.5, -1.0, 2.0]])
    out, _ = mlp_forward(mlp, x)
    assert np.array_equal(out, x)
    with pytest.raises(ValueError):
        mlp_forward(mlp, np.ones((1, 4)))


def test_zero_network_gives_half_marginals():
    tree = random_latent_tree(5, 1, np.random.default_rng(0))
    cfg = TrainConfig(depth=2, hidden_widths=[4], init="zero")
    model = init_cltm(tree, np.ones((3, 2)), cfg)
    pot, _ = model.potentials(np.ones((3, 2)))
    assert np.all(pot.node == 0)
    np.testing.assert_allclose(model.marginals(np.ones((3, 2))).node_marginals, 0.5, atol=1e-15)


def test_no_dropout_train_equals_eval():
    rng = np.random.default_rng(1)
    mlp = Mlp.init([4, 8, 6, 3], rng, dropout_rate=0.0)
    x = rng.normal(size=(5, 4))
    train, _ = mlp_forward(mlp, x, mode="train", rng=np.random.default_rng(2))
    evaluated, _ = mlp_forward(mlp, x, mode="eval")
    assert np.array_equal(train, evaluated)


def test_dropout_is_inverted():
    rng = np.random.default_rng(3)
    mlp = Mlp([np.ones((1, 2000)), np.ones((2000, 1)) / 2000], [np.zeros(2000), np.zeros(1)], 0.5)
    out, _ = mlp_forward(mlp, np.ones((1, 1)), mode="train", rng=rng)
    # half the units survive, each scaled by 2, so the mean stays near 1
    assert out[0, 0] == pytest.approx(1.0, abs=0.1)


def test_loss_examples():
    single = LatentTree(("y0",), (), ())
    zero = init_cltm(single, np.zeros((1, 1)), TrainConfig(depth=1, init="zero", standardize=False))
    assert marginal_nll_loss(zero, np.zeros(1), np.array([1])) == pytest.approx(math.log(2), abs=1e-15)
    tree = LatentTree(("y0",), ("h1",), ((0, 1),))
    model = init_cltm(tree, np.zeros((1, 1)), TrainConfig(depth=1, init="zero", standardize=False))
    model.edge_potentials = np.array([-math.log(3)])
    assert marginal_nll_loss(model, np.zeros(1), np.array([1])) == pytest.approx(math.log(6) - math.log(4), abs=1e-14)


def test_loss_identity_and_nonnegativity():
    rng = np.random.default_rng(4)
    for _ in range(20):
        tree = random_tree(int(rng.integers(2, 12)), rng, observed=None)
        n_obs = int(rng.integers(1, tree.n_nodes + 1))
        tree = LatentTree(tuple(f"y{i}" for i in range(n_obs)),
                          tuple(f"h{i + 1}" for i in range(tree.n_nodes - n_obs)), tree.edges)
        model = make_model(tree, 3, rng, depth=1)
        x = rng.normal(size=(4, 3))
        y = rng.integers(0, 2, (4, n_obs))
        loss = marginal_nll_loss(model, x, y)
        pot, _ = model.potentials(x)
        for i in range(4):
            p = Potentials(pot.node[i], pot.edge)
            clamp = np.concatenate([y[i], np.full(tree.latent_count, UNSET)])
            free = brute_force_inference(tree, p).log_partition
            fixed = brute_force_inference(tree, p, clamp).log_partition
            assert loss[i] == pytest.approx(free - fixed, abs=1e-9)
            assert loss[i] >= 0


def test_gradient_single_node():
    single = LatentTree(("y0",), (), ())
    _, d_node, _ = potential_gradients(single, Potentials(np.zeros((1, 1)), np.zeros(0)), np.array([[1]]))
    assert d_node[0, 0] == 0.5


def test_observed_gradient_identity():
    rng = np.random.default_rng(5)
    tree = random_latent_tree(6, 2, rng)
    pot = Potentials(rng.uniform(-3, 3, (7, 8)), rng.uniform(-3, 3, 7))
    y = rng.integers(0, 2, (7, 6))
    clamp = np.hstack([y, np.full((7, 2), UNSET)])
    _, d_node, _ = potential_gradients(tree, pot, clamp)
    free = marginals(tree, pot).node_marginals
    np.testing.assert_allclose(d_node[:, :6], y - free[:, :6], atol=1e-12)


def test_moment_matched_gradient_vanishes():
    single = LatentTree(("y0",), (), ())
    model = init_cltm(single, np.zeros((1, 1)), TrainConfig(depth=1, init="zero", standardize=False))
    model.mlp.biases[0][:] = -40.0  # P(y=1) is 1 to machine precision
    _, grads = loss_gradient(model, np.zeros((1, 1)), np.array([[1]]))
    assert np.abs(grads.flat()).max() < 1e-15


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_finite_difference_gradient(depth):
    rng = np.random.default_rng(10 + depth)
    tree = random_latent_tree(4, 2, rng)
    model = make_model(tree, 4, rng, depth=depth, widths=[5, 4][: depth - 1])
    x = rng.normal(size=(3, 4))
    y = rng.integers(0, 2, (3, 4))
    _, grads = loss_gradient(model, x, y)
    analytic = grads.flat()
    numeric = []
    h = 1e-5
    for arr in flat_params(model):
        for idx in np.ndindex(arr.shape):
            keep = arr[idx]
            arr[idx] = keep + h
            up = marginal_nll_loss(model, x, y).mean()
            arr[idx] = keep - h
            down = marginal_nll_loss(model, x, y).mean()
            arr[idx] = keep
            numeric.append((up - down) / (2 * h))
    numeric = np.array(numeric)
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    assert np.all((rel < 1e-4) | (np.abs(analytic - numeric) < 1e-9))


def test_single_sample_fit():
    single = LatentTree(("y0",), (), ())
    ds = LabeledDataset(np.array([[0.3]]), np.array([[1]]), ["y0"])
    cfg = TrainConfig(depth=1, batch_size=1, learning_rate=0.5, lr_decay=0.0, epochs=200, dropout_rate=0.0, init="zero")
    model, trace = sgd_train(ds, single, cfg)
    assert model.marginals(ds.features).node_marginals[0, 0] >= 0.95
    assert all(math.isfinite(v) for v in trace)


def test_zero_epochs_returns_initialization():
    tree = random_latent_tree(5, 1, np.random.default_rng(6))
    x = np.random.default_rng(7).normal(size=(10, 3))
    ds = LabeledDataset(x, np.random.default_rng(8).integers(0, 2, (10, 5)), list(tree.observed))
    cfg = TrainConfig(epochs=0, depth=2, hidden_widths=[4], seed=3)
    model, trace = sgd_train(ds, tree, cfg)
    fresh = init_cltm(tree, x, cfg, np.random.default_rng(3))
    assert trace == []
    assert model.to_dict() == fresh.to_dict()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch():
    single = LatentTree(("y0",), (), ())
    x = np.array([[1e200], [-1e200]])
    ds = LabeledDataset(x, np.array([[1], [0]]), ["y0"])
    cfg = TrainConfig(depth=1, standardize=False, learning_rate=1.0, epochs=3, dropout_rate=0.0)
    with pytest.raises(TrainingError, match=r"epoch \d+"):
        sgd_train(ds, single, cfg)


def test_training_is_deterministic():
    rng = np.random.default_rng(9)
    tree = random_latent_tree(5, 1, rng)
    data = sample_dataset(random_ground_truth(tree, 2, 2, rng), 200, 1)
    cfg = TrainConfig(depth=2, hidden_widths=[8], epochs=3, batch_size=20, seed=4)
    a, ta = sgd_train(data, tree, cfg)
    b, tb = sgd_train(data, tree, cfg)
    assert ta == tb and a.to_dict() == b.to_dict()


def test_cltm_beats_independent_nll_on_correlated_data():
    rng = np.random.default_rng(12)
    tree = random_latent_tree(6, 2, rng)
    data = sample_dataset(random_ground_truth(tree, 3, 3, rng, edge_range=(2.0, 4.0)), 1500, 2)
    cfg = TrainConfig(depth=2, hidden_widths=[16], epochs=15, batch_size=50, learning_rate=0.1, dropout_rate=0.0)
    cltm, _ = sgd_train(data, tree, cfg)
    base, _ = independent_baseline_train(data, cfg)
    assert marginal_nll_loss(cltm, data.features, data.labels).mean() < base.nll(data.features, data.labels).mean()


def test_heldout_nll_decreases_early():
    good = 0
    for seed in range(10):
        rng = np.random.default_rng(200 + seed)
        tree = random_latent_tree(6, 2, rng)
        data = sample_dataset(random_ground_truth(tree, 3, 3, rng), 1000, seed)
        train, test = data.subset(np.arange(600)), data.subset(np.arange(600, 1000))
        curve = []
        for epochs in range(1, 6):
            model, _ = sgd_train(train, tree, TrainConfig(epochs=epochs, seed=seed))
            curve.append(marginal_nll_loss(model, test.features, test.labels).mean())
        good += all(b < a for a, b in zip(curve, curve[1:]))
    assert good >= 8


def test_baseline_examples():
    x = np.linspace(-2, 2, 40)[:, None]
    y = (x[:, 0] > 0).astype(int)[:, None]
    ds = LabeledDataset(x, y, ["pos"])
    cfg = TrainConfig(depth=1, epochs=200, batch_size=10, learning_rate=0.5, dropout_rate=0.0)
    model, _ = independent_baseline_train(ds, cfg)
    assert np.mean(model.predict(x) == y) == 1.0
    zero, _ = independent_baseline_train(ds, TrainConfig(depth=2, hidden_widths=[3], epochs=0, init="zero"))
    assert np.all(zero.predict_proba(x) == 0.5)
    again, _ = independent_baseline_train(ds, cfg)
    assert again.to_dict() == model.to_dict()


def test_model_json_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    tree = random_latent_tree(5, 1, rng)
    data = sample_dataset(random_ground_truth(tree, 2, 2, rng), 100, 3)
    cfg = TrainConfig(depth=3, hidden_widths=[6, 5], epochs=2, batch_size=25)
    model, _ = sgd_train(data, tree, cfg)
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert isinstance(back, CltmModel)
    np.testing.assert_allclose(marginal_nll_loss(back, data.features, data.labels),
                               marginal_nll_loss(model, data.features, data.labels), atol=1e-12, rtol=0)
    base, _ = independent_baseline_train(data, cfg)
    save_model(base, tmp_path / "b.json")
    again = load_model(tmp_path / "b.json")
    assert isinstance(again, BaselineModel)
    assert np.array_equal(again.predict_proba(data.features), base.predict_proba(data.features))


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"momentum": 0.9})
