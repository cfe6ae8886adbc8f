import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpgcn.errors import ContractError, ShapeError
from mpgcn.numerics import AdamState, SparseMatrix, Tape, adam_step, matmul, spmm
from mpgcn.numerics import ad
from mpgcn.numerics.gradcheck import check_gradients
from mpgcn.numerics import kernels


def triple_loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def random_sparse(rng, n, m, density):
    dense = rng.normal(size=(n, m)) * (rng.random((n, m)) < density)
    return SparseMatrix.from_dense(dense), dense


class TestMatmul:
    def test_identity(self):
        np.testing.assert_array_equal(matmul(np.eye(2), [[3, 4], [5, 6]]), [[3, 4], [5, 6]])

    def test_row_by_column(self):
        assert matmul([[1, 2]], [[3], [4]]).tolist() == [[11.0]]

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        np.testing.assert_allclose(matmul(a, b), triple_loop_matmul(a, b), rtol=0, atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestSparse:
    def test_zero_annihilates(self):
        d = np.arange(12.0).reshape(4, 3)
        np.testing.assert_array_equal(spmm(SparseMatrix.zeros(4, 4), d), np.zeros((4, 3)))

    def test_identity(self):
        d = np.arange(12.0).reshape(4, 3)
        np.testing.assert_array_equal(spmm(SparseMatrix.identity(4), d), d)

    def test_densify_oracle(self):
        rng = np.random.default_rng(1)
        s, dense = random_sparse(rng, 6, 6, 0.3)
        d = rng.normal(size=(6, 2))
        np.testing.assert_allclose(spmm(s, d), dense @ d, rtol=0, atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            spmm(SparseMatrix.identity(3), np.ones((4, 2)))

    def test_coalesce_sums_duplicates_and_drops_zeros(self):
        s = SparseMatrix.from_triplets(3, 3, [2, 0, 0, 1], [1, 2, 2, 1], [1.0, 2.0, 3.0, 0.0])
        assert list(s.entries()) == [(0, 2, 5.0), (2, 1, 1.0)]

    def test_symmetric_flag_is_verified(self):
        with pytest.raises(ValueError):
            SparseMatrix.from_dense([[0, 1], [2, 0]], symmetric=True)
        s = SparseMatrix.from_dense([[0, 1], [1, 0]], symmetric=True)
        assert s.symmetric

    def test_trailing_axes_carried(self):
        rng = np.random.default_rng(2)
        s, dense = random_sparse(rng, 5, 5, 0.4)
        d = rng.normal(size=(5, 2, 3, 4))
        np.testing.assert_allclose(spmm(s, d), np.einsum("ij,jabc->iabc", dense, d), atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(
        n=st.integers(1, 9),
        m=st.integers(1, 9),
        w=st.integers(1, 4),
        density=st.floats(0.0, 1.0),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_spmm_equals_dense_product(self, n, m, w, density, seed):
        rng = np.random.default_rng(seed)
        s, dense = random_sparse(rng, n, m, density)
        d = rng.normal(size=(m, w))
        np.testing.assert_allclose(spmm(s, d), dense @ d, rtol=0, atol=1e-12)
        np.testing.assert_allclose(s.todense(), dense)

    @pytest.mark.parametrize("name", sorted(kernels.backends()))
    def test_backends_agree(self, name):
        impl = kernels.backends()[name]
        rng = np.random.default_rng(3)
        s, dense = random_sparse(rng, 30, 20, 0.2)
        d = rng.normal(size=(20, 7))
        out = impl.spmm_csr(s.indptr, np.ascontiguousarray(s.col), np.ascontiguousarray(s.val), d)
        np.testing.assert_allclose(out, dense @ d, atol=1e-12)
        g = rng.normal(size=(30, 7))
        out_t = impl.spmm_csr_t(s.indptr, np.ascontiguousarray(s.col), np.ascontiguousarray(s.val), g, 20)
        np.testing.assert_allclose(out_t, dense.T @ g, atol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self):
        tape = Tape()
        w = tape.param(np.array([[1.0, -2.0], [3.0, 0.5]]), name="W")
        grads = tape.backward(ad.sum(w))
        np.testing.assert_array_equal(grads["W"], np.ones((2, 2)))

    def test_half_square_norm_gives_w(self):
        tape = Tape()
        value = np.array([[1.0, -2.0], [3.0, 0.5]])
        w = tape.param(value, name="W")
        grads = tape.backward(ad.mul(ad.sum(ad.square(w)), 0.5))
        np.testing.assert_allclose(grads["W"], value, atol=1e-15)

    def test_non_scalar_loss(self):
        tape = Tape()
        w = tape.param(np.ones((2, 2)), name="W")
        with pytest.raises(ContractError):
            tape.backward(ad.relu(w))

    def test_unused_param_gets_zero(self):
        tape = Tape()
        w = tape.param(np.ones(3), name="w")
        tape.param(np.ones((2, 2)), name="unused")
        grads = tape.backward(ad.sum(w))
        np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))

    def test_topological_record(self):
        tape = Tape()
        a = tape.param(np.ones((2, 2)), name="a")
        b = ad.relu(ad.matmul(a, a))
        c = ad.sum(b)
        for out_id, in_ids, _ in tape._ops:
            assert all(i < out_id for i in in_ids)
        assert c.id > b.id > a.id


SPARSE = SparseMatrix.from_dense([[1.0, 0, 2.0], [0, 0, -1.0], [0.5, 3.0, 0]])

PRIMITIVES = {
    "matmul": lambda t, v: ad.sum(ad.matmul(v["a"], v["b"])),
    "spmm": lambda t, v: ad.sum(ad.square(ad.spmm(SPARSE, ad.slice_rows(v["b"], 0, 3)))),
    "add_bias": lambda t, v: ad.sum(ad.square(ad.add(v["a"], ad.slice_rows(v["c"], 0, 1)))),
    "mul": lambda t, v: ad.sum(ad.mul(v["a"], v["a"])),
    "relu": lambda t, v: ad.sum(ad.square(ad.relu(v["a"]))),
    "sigmoid": lambda t, v: ad.sum(ad.sigmoid(v["a"])),
    "softmax": lambda t, v: ad.sum(ad.square(ad.softmax_rows(v["a"]))),
    "log": lambda t, v: ad.sum(ad.log(ad.add(ad.square(v["a"]), 1.0))),
    "mean": lambda t, v: ad.sum(ad.square(ad.mean(v["a"], axis=0))),
    "slice_concat": lambda t, v: ad.sum(ad.square(ad.concat_rows([ad.slice_rows(v["a"], 1, 3), v["a"]]))),
    "conv1d": lambda t, v: ad.sum(ad.square(ad.conv1d_time(ad.reshape(v["b"], (2, 3, 4)), v["k"]))),
    "reshape": lambda t, v: ad.sum(ad.square(ad.reshape(v["a"], (2, 6)))),
}


def _params(seed):
    rng = np.random.default_rng(seed)
    return {
        "a": rng.normal(size=(3, 4)),
        "b": rng.normal(size=(4, 6)),
        "c": rng.normal(size=(2, 4)),
        "k": rng.normal(size=(2, 4, 2)),
    }


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    for seed in range(3):
        errors = check_gradients(PRIMITIVES[name], _params(seed))
        assert max(errors.values()) <= 1e-4, errors


UNARY = [ad.relu, ad.sigmoid, ad.softmax_rows, ad.square, lambda x: ad.log(ad.add(ad.square(x), 0.5))]


def _random_composite(seed):
    """A random chain of primitives of depth <= 6 ending in a scalar."""
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 7))
    plan = []
    for _ in range(depth):
        plan.append(int(rng.integers(0, 4)))
    unary = [int(rng.integers(0, len(UNARY))) for _ in range(depth)]

    def build(tape, v):
        x = v["x"]
        for step, kind in enumerate(plan):
            if kind == 0:
                x = ad.matmul(x, v["w"])
            elif kind == 1:
                x = ad.add(x, v["bias"])
            elif kind == 2:
                x = ad.mul(x, v["x"])
            else:
                x = UNARY[unary[step]](x)
        return ad.mean(ad.square(x))

    params = {"x": rng.normal(size=(3, 3)), "w": rng.normal(size=(3, 3)) * 0.7, "bias": rng.normal(size=(3,))}
    return build, params


@pytest.mark.parametrize("seed", range(20))
def test_random_composites_match_finite_differences(seed):
    build, params = _random_composite(seed)
    errors = check_gradients(build, params)
    assert max(errors.values()) <= 1e-4, errors


def test_deterministic():
    def run():
        build, params = _random_composite(7)
        tape = Tape()
        vs = {k: tape.param(v, name=k) for k, v in params.items()}
        return tape.backward(build(tape, vs))

    a, b = run(), run()
    for k in a:
        assert np.array_equal(a[k], b[k])


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"x": np.array([1.0, -2.0, 3.0])}
        start = p["x"].copy()
        state = AdamState()
        for _ in range(10):
            adam_step(p, {"x": np.zeros(3)}, state, 0.01)
        assert np.max(np.abs(p["x"] - start)) < 1e-12

    def test_monotone_descent_on_linear_loss(self):
        p = {"x": np.array(10.0)}
        state = AdamState()
        prev = 10.0
        for _ in range(1000):
            adam_step(p, {"x": np.array(1.0)}, state, 0.001)
            assert float(p["x"]) < prev
            prev = float(p["x"])

    def test_quadratic_converges(self):
        p = {"x": np.array(0.0)}
        state = AdamState()
        for _ in range(5000):
            adam_step(p, {"x": 2.0 * (p["x"] - 3.0)}, state, 0.01)
        assert abs(float(p["x"]) - 3.0) < 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step({"x": np.zeros(2)}, {"x": np.zeros(3)}, AdamState(), 0.1)


@pytest.mark.parametrize("seed", range(5))
def test_dense_and_csr_paths_agree(seed, monkeypatch):
    from mpgcn.numerics import sparse as sp

    rng = np.random.default_rng(seed)
    dense = rng.normal(size=(30, 20)) * (rng.random((30, 20)) < 0.3)
    d = rng.normal(size=(20, 3, 2))
    e = rng.normal(size=(30, 4))
    monkeypatch.setattr(sp, "DENSE_FILL", 2.0)
    csr = SparseMatrix.from_dense(dense)
    a, at = sp.spmm(csr, d), sp.spmm_t(csr, e)
    assert csr._dense is None
    monkeypatch.setattr(sp, "DENSE_FILL", 0.0)
    blas = SparseMatrix.from_dense(dense)
    b, bt = sp.spmm(blas, d), sp.spmm_t(blas, e)
    assert blas._dense is not None
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(at, bt, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(b, np.einsum("ij,jkl->ikl", dense, d), rtol=1e-12, atol=1e-12)
