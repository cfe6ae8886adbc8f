import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpgcn import checkpoint
from mpgcn.clustering import (
    AutoencoderModel,
    ClusterTrainConfig,
    GcnEncoderModel,
    ae_forward,
    joint_loss,
    kl_divergence,
    kmeans_init,
    normalized_mutual_info,
    predict_labels,
    reconstruction_loss,
    soft_assign,
    split_patterns,
    target_distribution,
    train_clustering,
    gcn_forward,
    node_features,
)
from mpgcn.errors import ConfigError, ShapeError
from mpgcn.graphs import SharingStopGraph, normalize
from mpgcn.numerics import SparseMatrix, Tape
from mpgcn.numerics.gradcheck import check_gradients
from mpgcn.ingest import Boarding, PassengerStopProfile


def relu(v):
    return np.maximum(v, 0)


def sigmoid(v):
    return 1 / (1 + np.exp(-v))


def softmax(v):
    e = np.exp(v - v.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def random_ae(widths, seed=0):
    rng = np.random.default_rng(seed)
    return AutoencoderModel.init(widths, rng)


class TestAutoencoder:
    def test_zero_weights_relu(self):
        ae = random_ae([5, 4, 3])
        ae.params = {k: np.zeros_like(v) for k, v in ae.params.items()}
        ae.hidden_act = ae.bottleneck_act = ae.output_act = "relu"
        latents, x_hat = ae_forward(ae, np.random.default_rng(1).random((6, 5)))
        assert all(np.all(y == 0) for y in latents)
        assert x_hat.shape == (6, 5) and np.all(x_hat == 0)

    def test_identity_round_trip(self):
        ae = AutoencoderModel(
            [3, 3],
            {"ae.enc.0.W": np.eye(3), "ae.enc.0.b": np.zeros(3), "ae.dec.0.W": np.eye(3), "ae.dec.0.b": np.zeros(3)},
            "identity", "identity", "identity",
        )
        x = np.random.default_rng(2).normal(size=(4, 3))
        np.testing.assert_array_equal(ae_forward(ae, x)[1], x)

    def test_layer_oracle(self):
        ae = random_ae([6, 5, 4, 2], seed=3)
        for k in ae.params:
            if k.endswith(".b"):
                ae.params[k] = np.random.default_rng(len(k)).normal(size=ae.params[k].shape)
        x = np.random.default_rng(4).random((7, 6))
        latents, x_hat = ae_forward(ae, x)
        p = ae.params
        y1 = relu(x @ p["ae.enc.0.W"] + p["ae.enc.0.b"])
        y2 = relu(y1 @ p["ae.enc.1.W"] + p["ae.enc.1.b"])
        y3 = y2 @ p["ae.enc.2.W"] + p["ae.enc.2.b"]
        z = relu(y3 @ p["ae.dec.0.W"] + p["ae.dec.0.b"])
        z = relu(z @ p["ae.dec.1.W"] + p["ae.dec.1.b"])
        z = sigmoid(z @ p["ae.dec.2.W"] + p["ae.dec.2.b"])
        for got, want in zip(latents, [y1, y2, y3]):
            np.testing.assert_allclose(got, want, atol=1e-12)
        np.testing.assert_allclose(x_hat, z, atol=1e-12)

    def test_mirror_widths(self):
        ae = random_ae([8, 6, 3])
        assert ae.params["ae.dec.0.W"].shape == (3, 6) and ae.params["ae.dec.1.W"].shape == (6, 8)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            ae_forward(random_ae([5, 3]), np.zeros((2, 4)))


class TestReconstruction:
    def test_equal_is_zero(self):
        x = np.random.default_rng(0).random((3, 4))
        assert reconstruction_loss(x, x) == 0

    def test_hand(self):
        assert reconstruction_loss(np.array([[1.0, 0.0]]), np.zeros((1, 2))) == 0.5

    def test_oracle(self):
        rng = np.random.default_rng(1)
        x, y = rng.random((5, 3)), rng.random((5, 3))
        want = sum((x[i, j] - y[i, j]) ** 2 for i in range(5) for j in range(3)) / 10
        assert abs(float(reconstruction_loss(x, y)) - want) < 1e-12


def ring_prop(n, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.random((n, n)) * (rng.random((n, n)) < 0.5)
    a = np.triu(a, 1)
    a = a + a.T
    return a, normalize(SparseMatrix.from_dense(a, symmetric=True))


def dense_prop(a):
    t = a + np.eye(len(a))
    d = np.diag(1 / np.sqrt(t.sum(axis=1)))
    return d @ t @ d


class TestGcn:
    def test_alpha_one_ignores_latents(self):
        rng = np.random.default_rng(0)
        a, prop = ring_prop(6)
        gcn = GcnEncoderModel.init([5, 4, 3, 2], 3, rng, alpha=1.0)
        x = rng.random((6, 5))
        lat_a = [rng.random((6, 4)), rng.random((6, 3))]
        lat_b = [rng.random((6, 4)), rng.random((6, 3))]
        h = gcn_forward(gcn, prop, x, lat_a)
        np.testing.assert_array_equal(h, gcn_forward(gcn, prop, x, lat_b))
        pa = dense_prop(a)
        z = relu(pa @ x @ gcn.params["gcn.0.W"])
        z = relu(pa @ z @ gcn.params["gcn.1.W"])
        np.testing.assert_allclose(h, softmax(pa @ z @ gcn.params["gcn.2.W"]), atol=1e-12)

    def test_single_node_hand(self):
        gcn = GcnEncoderModel([2, 2], 2, {"gcn.0.W": np.array([[1.0, 0.0], [0.0, 2.0]])})
        prop = normalize(SparseMatrix.zeros(1, 1))
        h = gcn_forward(gcn, prop, np.array([[1.0, 1.0]]), [])
        e1, e2 = np.exp(1.0), np.exp(2.0)
        np.testing.assert_allclose(h, [[e1 / (e1 + e2), e2 / (e1 + e2)]], atol=1e-15)

    def test_six_node_oracle(self):
        rng = np.random.default_rng(5)
        a, prop = ring_prop(6, seed=5)
        gcn = GcnEncoderModel.init([5, 4, 3, 2], 3, rng, alpha=0.5)
        x = rng.random((6, 5))
        lat = [rng.random((6, 4)), rng.random((6, 3)), rng.random((6, 2))]
        pa = dense_prop(a)
        h1 = relu(pa @ x @ gcn.params["gcn.0.W"])
        h2 = relu(pa @ (0.5 * h1 + 0.5 * lat[0]) @ gcn.params["gcn.1.W"])
        want = softmax(pa @ (0.5 * h2 + 0.5 * lat[1]) @ gcn.params["gcn.2.W"])
        got = gcn_forward(gcn, prop, x, lat)
        np.testing.assert_allclose(got, want, atol=1e-12)
        np.testing.assert_allclose(got.sum(axis=1), 1, atol=1e-12)

    def test_latent_width_mismatch(self):
        rng = np.random.default_rng(0)
        _, prop = ring_prop(6)
        gcn = GcnEncoderModel.init([5, 4, 3, 2], 3, rng)
        with pytest.raises(ShapeError):
            gcn_forward(gcn, prop, rng.random((6, 5)), [rng.random((6, 3)), rng.random((6, 3))])


def student_t_oracle(y, mu, n):
    q = np.empty((len(y), len(mu)))
    for i in range(len(y)):
        for j in range(len(mu)):
            q[i, j] = (1 + np.sum((y[i] - mu[j]) ** 2) / n) ** (-(n + 1) / 2)
    return q / q.sum(axis=1, keepdims=True)


class TestSoftAssign:
    def test_at_center(self):
        q = soft_assign(np.array([[0.0, 0.0]]), np.array([[0.0, 100.0], [0.0, 0.0]]), 1)
        assert q[0, 0] > 0.999 and abs(q.sum() - 1) < 1e-12

    def test_equidistant_uniform(self):
        mu = np.array([[1.0, 0], [-1, 0], [0, 1], [0, -1]])
        q = soft_assign(np.zeros((1, 2)), mu.T, 1)
        np.testing.assert_allclose(q, np.full((1, 4), 0.25), atol=1e-15)

    @pytest.mark.parametrize("n", [1, 3])
    def test_formula_oracle(self, n):
        rng = np.random.default_rng(n)
        y, mu = rng.normal(size=(9, 4)), rng.normal(size=(3, 4))
        np.testing.assert_allclose(soft_assign(y, mu.T, n), student_t_oracle(y, mu, n), atol=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            soft_assign(np.zeros((2, 3)), np.zeros((2, 2)))


def target_oracle(q):
    w = q**2 / q.sum(axis=0)
    return w / w.sum(axis=1, keepdims=True)


class TestTarget:
    def test_one_hot_fixed_point(self):
        q = np.eye(3)[[0, 1, 2, 0, 2]]
        np.testing.assert_array_equal(target_distribution(q), q)

    def test_one_hot_unused_cluster(self):
        q = np.eye(3)[[0, 0, 2]]
        np.testing.assert_array_equal(target_distribution(q), q)

    def test_uniform(self):
        np.testing.assert_allclose(target_distribution(np.full((4, 3), 1 / 3)), np.full((4, 3), 1 / 3), atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_oracle_and_sharpening(self, seed):
        rng = np.random.default_rng(seed)
        q = rng.dirichlet(np.ones(4), size=20)
        p = target_distribution(q)
        np.testing.assert_allclose(p, target_oracle(q), atol=1e-12)
        np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-12)


class TestJointLoss:
    def test_zero_when_consistent(self):
        rng = np.random.default_rng(0)
        x = rng.random((5, 3))
        p = target_distribution(rng.dirichlet(np.ones(3), size=5))
        assert abs(float(joint_loss(x, x, p, p, p, ClusterTrainConfig()))) < 1e-12

    def test_kl_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            p, q = rng.dirichlet(np.ones(4), size=3), rng.dirichlet(np.ones(4), size=3)
            assert float(kl_divergence(p, q)) >= -1e-12

    def test_gradient_check_all_parameters(self):
        rng = np.random.default_rng(2)
        n = 6
        a, prop = ring_prop(n, seed=2)
        x = rng.random((n, 5))
        ae = AutoencoderModel.init([5, 4, 2], rng)
        gcn = GcnEncoderModel.init([5, 4, 2], 3, rng)
        params = dict(ae.params)
        params.update(gcn.params)
        for k in params:
            if k.endswith(".b"):
                params[k] = rng.normal(scale=0.1, size=params[k].shape)
        params["cluster.centers_t"] = rng.normal(size=(2, 3))
        cfg = ClusterTrainConfig(n_clusters=3)
        latents, _ = ae_forward(ae, x, params)
        p_fixed = target_distribution(soft_assign(latents[-1], params["cluster.centers_t"]))

        def build(tape, vs):
            lat, x_hat = ae_forward(ae, x, vs)
            q = soft_assign(lat[-1], vs["cluster.centers_t"])
            h = gcn_forward(gcn, prop, x, lat, params=vs)
            return joint_loss(x, x_hat, p_fixed, q, h, cfg)

        errs = check_gradients(build, params)
        assert max(errs.values()) <= 1e-4, errs


class TestKmeans:
    def test_k_equals_n(self):
        x = np.random.default_rng(0).random((5, 2))
        c = kmeans_init(x, 5, seed=1)
        assert sorted(map(tuple, c)) == sorted(map(tuple, x))

    def test_two_blobs(self):
        rng = np.random.default_rng(1)
        a = rng.normal([0, 0], 0.3, size=(200, 2))
        b = rng.normal([5, 5], 0.3, size=(200, 2))
        c = kmeans_init(np.vstack([a, b]), 2, seed=2)
        c = c[np.argsort(c[:, 0])]
        assert np.abs(c[0] - a.mean(axis=0)).max() < 0.1
        assert np.abs(c[1] - b.mean(axis=0)).max() < 0.1

    def test_deterministic(self):
        x = np.random.default_rng(3).random((50, 3))
        np.testing.assert_array_equal(kmeans_init(x, 4, seed=7), kmeans_init(x, 4, seed=7))

    def test_too_many(self):
        with pytest.raises(ConfigError):
            kmeans_init(np.zeros((3, 2)), 4)


def planted_graph(blocks=4, size=30, seed=0, p_in=0.5, p_out=0.01):
    rng = np.random.default_rng(seed)
    n = blocks * size
    truth = np.repeat(np.arange(blocks), size)
    same = truth[:, None] == truth[None, :]
    w = np.where(same, rng.integers(1, 6, size=(n, n)) * (rng.random((n, n)) < p_in),
                 (rng.random((n, n)) < p_out).astype(float))
    w = np.triu(w, 1)
    w = w + w.T
    nodes = [f"c{i:04d}" for i in range(n)]
    return SharingStopGraph(nodes, SparseMatrix.from_dense(w.astype(float), symmetric=True)), truth


SMALL = dict(hidden=(32, 16, 8), epochs=40, pretrain_epochs=30, pretrain_batch=32, kmeans_restarts=5)


class TestTraining:
    def test_planted_blocks(self):
        g, truth = planted_graph()
        _, out = train_clustering(g, node_features(g), ClusterTrainConfig(n_clusters=4, seed=0, **SMALL))
        assert normalized_mutual_info(out.labels, truth) >= 0.9
        for m in (out.q, out.p, out.h):
            np.testing.assert_allclose(m.sum(axis=1), 1, atol=1e-9)
        np.testing.assert_array_equal(out.labels, out.h.argmax(axis=1))

    def test_single_cluster(self):
        g, _ = planted_graph(blocks=2, size=10)
        model, out = train_clustering(g, node_features(g), ClusterTrainConfig(n_clusters=1, **SMALL))
        assert np.all(out.labels == 0)
        assert all(np.isfinite(h["loss"]) for h in model.history)

    def test_deterministic(self):
        g, _ = planted_graph(blocks=2, size=10, seed=3)
        cfg = ClusterTrainConfig(n_clusters=2, seed=5, **SMALL)
        a = train_clustering(g, node_features(g), cfg)[1]
        b = train_clustering(g, node_features(g), cfg)[1]
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.h, b.h)

    def test_pretrain_loss_window_non_increasing(self):
        g, _ = planted_graph(seed=4)
        model, _ = train_clustering(g, node_features(g), ClusterTrainConfig(n_clusters=4, **dict(SMALL, epochs=1)))
        pre = [h["loss"] for h in model.history if h["stage"] == "pretrain"]
        for i in range(len(pre) - 10):
            assert pre[i + 10] <= pre[i]

    def test_row_mismatch(self):
        g, _ = planted_graph(blocks=2, size=5)
        with pytest.raises(ShapeError):
            train_clustering(g, np.zeros((3, 10)), ClusterTrainConfig(n_clusters=2))

    def test_checkpoint_round_trip(self, tmp_path):
        g, _ = planted_graph(blocks=2, size=10, seed=6)
        x = node_features(g)
        model, out = train_clustering(g, x, ClusterTrainConfig(n_clusters=2, **dict(SMALL, epochs=3)))
        checkpoint.save(tmp_path, model.manifest(), model.parameters())
        manifest, params = checkpoint.load(tmp_path)
        assert manifest["alpha"] == 0.5 and manifest["dof"] == 1
        for k, v in model.parameters().items():
            np.testing.assert_array_equal(params[k], v)
        np.testing.assert_array_equal(predict_labels(model, g, x), out.labels)


class TestSplit:
    def _profile(self, n):
        from datetime import datetime

        return PassengerStopProfile({f"c{i}": [Boarding(datetime(2019, 11, 1, 8), "s", "1")] for i in range(n)})

    def test_all_equal(self):
        groups = split_patterns(self._profile(5), np.zeros(5, dtype=int))
        assert len(groups) == 1 and len(groups[0]) == 5

    def test_partition(self):
        labels = np.array([0, 2, 1, 2, 0, 1])
        groups = split_patterns(self._profile(6), labels)
        assert [len(g) for g in groups] == [2, 2, 2]
        assert set().union(*groups) == {f"c{i}" for i in range(6)}

    def test_must_cover(self):
        with pytest.raises(ShapeError):
            split_patterns(self._profile(3), np.zeros(2, dtype=int))


def test_nmi_permutation_invariant():
    a = np.array([0, 0, 1, 1, 2, 2])
    assert abs(normalized_mutual_info(a, (a + 1) % 3) - 1) < 1e-12
    assert normalized_mutual_info(a, np.zeros(6)) == 0
