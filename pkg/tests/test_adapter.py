import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate

from oftkit import adapter as adp
from oftkit.energy import hyperspherical_energy
from oftkit.errors import DimensionError, DivisibilityError, ModeError
from conftest import random_adapter, random_skew


def orth_residual(r):
    return np.linalg.norm(r.T @ r - np.eye(r.shape[0]))


# -- skew layout ------------------------------------------------------------


def test_skew_is_exactly_antisymmetric(rng):
    q = adp.SkewParams(6, rng.normal(size=15)).matrix()
    assert np.array_equal(q, -q.T)
    assert np.all(np.diag(q) == 0.0)


def test_skew_roundtrip(rng):
    q = random_skew(rng, 5)
    assert np.array_equal(adp.SkewParams.from_matrix(q).matrix(), q)


def test_skew_wrong_count():
    with pytest.raises(DimensionError):
        adp.SkewParams(4, np.zeros(5))


def test_skew_grad_matches_layout(rng):
    # <G, dQ> for dQ built from a unit free param equals skew_grad(G)
    b = 4
    g = rng.normal(size=(b, b))
    expected = [np.sum(g * adp.skew(np.eye(adp.n_free(b))[k], b)) for k in range(adp.n_free(b))]
    assert np.allclose(adp.skew_grad(g), expected, rtol=0, atol=1e-15)


# -- cayley -----------------------------------------------------------------


@pytest.mark.parametrize("b", [1, 2, 5, 16])
def test_cayley_zero_is_identity(b):
    assert np.array_equal(adp.cayley(adp.SkewParams.zeros(b)), np.eye(b))


def test_cayley_2x2():
    # (I+Q)(I-Q)^-1 with Q = [[0,1],[-1,0]]: I-Q = [[1,-1],[1,1]], inverse = [[1,1],[-1,1]]/2
    r = adp.cayley(adp.SkewParams(2, [1.0]))
    assert np.allclose(r, [[0.0, 1.0], [-1.0, 0.0]], atol=1e-15, rtol=0)


def test_cayley_random_16_orthogonal(rng):
    assert orth_residual(adp.cayley(random_skew(rng, 16))) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([2, 3, 8, 32, 128]), st.floats(0.01, 10.0), st.integers(0, 2**32 - 1))
def test_cayley_orthogonal_and_special(b, scale, seed):
    r = adp.cayley(random_skew(np.random.default_rng(seed), b, scale))
    assert orth_residual(r) <= 1e-10
    assert np.linalg.norm(r @ r.T - np.eye(b)) <= 1e-10
    assert abs(np.linalg.det(r) - 1.0) <= 1e-8


def test_cayley_block_512(rng):
    r = adp.cayley(random_skew(rng, 512, 0.05))
    assert orth_residual(r) <= 1e-10
    sign, logdet = np.linalg.slogdet(r)
    assert sign == 1.0 and abs(logdet) <= 1e-8


def test_neumann_first_order(rng):
    for _ in range(10):
        q = random_skew(rng, 8)
        q *= 1e-3 * rng.uniform(0.1, 1.0) / np.linalg.norm(q)
        r = adp.cayley(q)
        assert np.linalg.norm(r - (np.eye(8) + 2 * q)) <= 5 * np.linalg.norm(q) ** 2


# -- transforms -------------------------------------------------------------


def test_divisibility_reported():
    with pytest.raises(DivisibilityError) as exc:
        adp.OrthoTransform(12, 5)
    assert exc.value.divisors == [1, 2, 3, 4, 6, 12]


def test_materialize_one_by_one_blocks():
    t = adp.OrthoTransform(6, 6)
    assert t.free.shape == (6, 0)
    assert np.array_equal(adp.materialize(t), np.eye(6))


def test_materialize_single_block_is_full_cayley(rng):
    q = random_skew(rng, 8)
    t = adp.OrthoTransform(8, 1, free=adp.SkewParams.from_matrix(q).free)
    assert np.allclose(adp.materialize(t), adp.cayley(q), atol=1e-15, rtol=0)
    assert np.count_nonzero(adp.materialize(t)) > 8 * 7


def test_materialize_shared_blocks(rng):
    t = adp.OrthoTransform(8, 4, shared=True, free=rng.normal(size=1))
    r = adp.materialize(t)
    blocks = [r[2 * k:2 * k + 2, 2 * k:2 * k + 2] for k in range(4)]
    for blk in blocks[1:]:
        assert np.array_equal(blk, blocks[0])
    mask = np.kron(np.eye(4), np.ones((2, 2))) == 0
    assert np.all(r[mask] == 0.0)


def test_materialize_block_structure(rng):
    t = adp.OrthoTransform(12, 3, free=rng.normal(size=(3, 6)))
    r = adp.materialize(t)
    for k, sp in enumerate(t.blocks):
        assert np.array_equal(r[4 * k:4 * k + 4, 4 * k:4 * k + 4], adp.cayley(sp))


def test_composition_is_orthogonal(rng):
    t1 = adp.OrthoTransform(16, 4, free=rng.normal(size=(4, 6)))
    t2 = adp.OrthoTransform(16, 2, free=rng.normal(size=(2, 28)))
    prod = adp.materialize(t1) @ adp.materialize(t2)
    assert orth_residual(prod) <= 1e-10


def test_q_norm_counts_mirror_and_sharing(rng):
    t = adp.OrthoTransform(8, 4, shared=True, free=[0.5])
    q = np.kron(np.eye(4), adp.skew([0.5], 2))
    assert t.q_norm() == pytest.approx(np.linalg.norm(q), rel=1e-15)
    t = adp.OrthoTransform(8, 2, free=rng.normal(size=(2, 6)))
    full = np.zeros((8, 8))
    full[:4, :4], full[4:, 4:] = (adp.skew(row, 4) for row in t.free)
    assert t.q_norm() == pytest.approx(np.linalg.norm(full), rel=1e-14)


# -- adapter ----------------------------------------------------------------


def test_adapter_mode_validation():
    with pytest.raises(ModeError):
        adp.Adapter.fresh(4, 3, 2, "coft")
    with pytest.raises(ModeError):
        adp.Adapter.fresh(4, 3, 2, "oft", eps_prime=0.1)
    with pytest.raises(ModeError):
        adp.Adapter.fresh(4, 3, 2, "lora")
    with pytest.raises(ModeError):
        adp.Adapter(adp.OrthoTransform(4, 2), 3, "oft", theta=np.zeros(3))


def test_fresh_adapter_is_zero():
    a = adp.Adapter.fresh(8, 5, 2, "rescaled_oft")
    assert not np.any(a.params())
    assert np.array_equal(a.scales, np.ones(5))


def test_params_roundtrip(rng):
    a = random_adapter(rng, 8, 5, 2, "rescaled_oft", shared=True)
    p = a.params()
    assert p.size == 6 + 5
    assert np.array_equal(a.with_params(p).params(), p)


@pytest.mark.parametrize("mode", adp.MODES)
def test_fresh_forward_is_identity(rng, mode):
    a = adp.Adapter.fresh(12, 7, 3, mode, eps_prime=1e-2 if mode == "coft" else None)
    w0, x = rng.normal(size=(12, 7)), rng.normal(size=(12, 5))
    assert np.max(np.abs(adp.forward(a, w0, x) - w0.T @ x)) <= 1e-12


def test_rescaled_uniform_doubling(rng):
    a = random_adapter(rng, 8, 4, 2, "oft")
    b = adp.Adapter(a.transform, 4, "rescaled_oft", theta=np.full(4, np.log(2.0)))
    w0, x = rng.normal(size=(8, 4)), rng.normal(size=(8, 3))
    assert np.allclose(adp.forward(b, w0, x), 2 * adp.forward(a, w0, x), rtol=1e-15, atol=1e-15)


@pytest.mark.parametrize("mode", adp.MODES)
@pytest.mark.parametrize("shared", [False, True])
def test_forward_matches_merge(rng, mode, shared):
    a = random_adapter(rng, 12, 6, 3, mode, shared)
    w0, x = rng.normal(size=(12, 6)), rng.normal(size=(12, 4))
    assert np.max(np.abs(adp.forward(a, w0, x) - adp.merge(a, w0).T @ x)) <= 1e-10


def test_merge_matches_dense_formula(rng):
    a = random_adapter(rng, 8, 5, 2, "rescaled_oft")
    w0 = rng.normal(size=(8, 5))
    dense = adp.materialize(a.transform) @ w0 @ np.diag(np.exp(a.theta))
    assert np.max(np.abs(adp.merge(a, w0) - dense)) <= 1e-13


def test_merge_fresh_is_exact():
    w0 = np.array([[1.0, -0.0], [2.5, 3.0]])
    out = adp.merge(adp.Adapter.fresh(2, 2, 1), w0)
    assert out.tobytes() == w0.tobytes()


def test_merge_additive_view(rng):
    a = random_adapter(rng, 12, 5, 4, "oft")
    w0 = rng.normal(size=(12, 5))
    r = adp.materialize(a.transform)
    assert np.max(np.abs((adp.merge(a, w0) - w0) - (r - np.eye(12)) @ w0)) <= 1e-12


@pytest.mark.parametrize("mode", ["oft", "coft"])
def test_merge_preserves_energy(rng, mode):
    a = random_adapter(rng, 16, 10, 4, mode)
    w0 = rng.normal(size=(16, 10))
    he0 = hyperspherical_energy(w0)
    assert abs(hyperspherical_energy(adp.merge(a, w0)) - he0) <= 1e-8 * he0


def test_angle_preservation(rng):
    a = random_adapter(rng, 10, 6, 2, "oft", scale=1.0)
    w0 = rng.normal(size=(10, 6))
    w = adp.merge(a, w0)

    def cosines(m):
        u = m / np.linalg.norm(m, axis=0)
        return u.T @ u

    assert np.max(np.abs(cosines(w) - cosines(w0))) <= 1e-10


def test_forward_dimension_mismatch(rng):
    a = adp.Adapter.fresh(4, 3, 2)
    with pytest.raises(DimensionError):
        adp.forward(a, np.ones((4, 2)), np.ones((4, 1)))
    with pytest.raises(DimensionError):
        adp.forward(a, np.ones((4, 3)), np.ones((5, 1)))


# -- coft projection ------------------------------------------------------


def _coft_with_norm(rng, target, eps):
    a = random_adapter(rng, 8, 4, 2, "coft", eps_prime=eps)
    return a.with_params(a.params() * (target / a.q_norm()))


def test_coft_project_inside_ball(rng):
    a = _coft_with_norm(rng, 0.05, 0.1)
    assert adp.coft_project(a) is a


def test_coft_project_halves(rng):
    a = _coft_with_norm(rng, 0.2, 0.1)
    b = adp.coft_project(a)
    assert np.allclose(b.params(), a.params() / 2, rtol=1e-15, atol=0)
    assert b.q_norm() == pytest.approx(0.1, rel=1e-14)


def test_coft_project_bound_small_eps(rng):
    for _ in range(20):
        a = adp.coft_project(_coft_with_norm(rng, 1.0, 1e-3))
        dev = np.linalg.norm(adp.materialize(a.transform) - np.eye(8))
        assert dev <= 2.01e-3


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-4, 0.1), st.floats(1e-3, 100.0), st.booleans(), st.integers(0, 2**32 - 1))
def test_coft_projection_bounds(eps, size, shared, seed):
    rng = np.random.default_rng(seed)
    a = random_adapter(rng, 12, 3, 3, "coft", shared=shared, eps_prime=eps)
    a = adp.coft_project(a.with_params(a.params() * size))
    assert a.q_norm() <= eps
    dev = np.linalg.norm(adp.materialize(a.transform) - np.eye(12))
    assert dev <= 2 * eps + 10 * eps**2


def test_coft_project_wrong_mode():
    with pytest.raises(ModeError):
        adp.coft_project(adp.Adapter.fresh(4, 2, 2))


# -- convolution view -----------------------------------------------------


def test_conv_view_examples():
    assert adp.conv_view((64, 32, 3, 3)) == (288, 64, 32)
    assert adp.conv_view((8, 1, 1, 1)) == (1, 8, 1)


def test_conv_view_scalar_rescaler(rng):
    d, n, r = adp.conv_view((8, 1, 1, 1))
    a = adp.Adapter(adp.OrthoTransform(d, r), n, "rescaled_oft", theta=rng.normal(size=n))
    assert np.array_equal(adp.materialize(a.transform), np.ones((1, 1)))
    w0 = rng.normal(size=(1, 8))
    assert np.allclose(adp.merge(a, w0), w0 * np.exp(a.theta), rtol=1e-15, atol=0)


def test_flatten_kernel_blocks_follow_channels(rng):
    kernel = rng.normal(size=(5, 3, 2, 2))
    w = adp.flatten_kernel(kernel)
    assert w.shape == (12, 5)
    assert np.array_equal(w[4:8, 2], kernel[2, 1].ravel())
    assert np.array_equal(adp.unflatten_kernel(w, kernel.shape), kernel)


def _conv_oracle(images, kernel):
    bsz, c_out = images.shape[0], kernel.shape[0]
    out = []
    for b in range(bsz):
        out.append([correlate(images[b], kernel[o], mode="valid")[0] for o in range(c_out)])
    return np.array(out)


def test_fresh_conv_adapter_is_identity(rng):
    kernel = rng.normal(size=(4, 3, 3, 3))
    images = rng.normal(size=(2, 3, 7, 6))
    d, n, r = adp.conv_view(kernel.shape)
    a = adp.Adapter.fresh(d, n, r)
    got = adp.conv_forward(a, kernel, images)
    assert np.max(np.abs(got - _conv_oracle(images, kernel))) <= 1e-12


def test_channel_blocks_act_per_channel(rng):
    kernel = rng.normal(size=(4, 3, 3, 3))
    d, n, r = adp.conv_view(kernel.shape)
    a = random_adapter(rng, d, n, r, "oft")
    w = adp.merge(a, adp.flatten_kernel(kernel))
    rotated = adp.unflatten_kernel(w, kernel.shape)
    blocks = [adp.cayley(sp) for sp in a.transform.blocks]
    for c in range(3):
        expect = blocks[c] @ kernel[:, c].reshape(4, 9).T
        assert np.allclose(rotated[:, c].reshape(4, 9).T, expect, atol=1e-13, rtol=0)
    images = rng.normal(size=(2, 3, 5, 5))
    assert np.allclose(adp.conv_forward(a, kernel, images), _conv_oracle(images, rotated), atol=1e-12, rtol=0)


# -- parameter counts -----------------------------------------------------


def test_param_counts():
    assert adp.param_count(128, 128, 8, ("lora", 8)) == 2048
    assert adp.param_count(128, 128, 8, "oft") == 960
    assert adp.param_count(128, 128, 8, "oft_shared") == 120
    assert adp.param_count(64, 64, 64, "oft") == 0
    with pytest.raises(DivisibilityError):
        adp.param_count(100, 100, 8, "oft")


@pytest.mark.parametrize("d,r,shared", [(16, 4, False), (16, 4, True), (12, 1, False), (9, 9, False)])
def test_param_count_matches_adapter(d, r, shared):
    a = adp.Adapter.fresh(d, 5, r, shared=shared)
    assert a.num_params == adp.param_count(d, 5, r, "oft_shared" if shared else "oft")
