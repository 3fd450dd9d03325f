import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ktimpute.core_types import DescriptorKind as K
from ktimpute.gp_prior import (
    BinaryProduct,
    Categorical,
    CholeskyFailure,
    DescriptorEncoder,
    DimensionMismatch,
    GramMatrix,
    Interaction,
    KernelSpec,
    KindMismatch,
    SquaredExponential,
    default_spec,
    eval_component,
    eval_gram,
    kl_posterior_vs_gp,
    kl_standard_normal,
    kl_value,
    spec_from_config,
    spec_from_structure,
    spec_structure,
)
from ktimpute.numeric import Parameter, Tape, backward, constant, finite_difference_grad, no_grad

from conftest import rel_err

KINDS = [K.CONTINUOUS, K.CONTINUOUS, K.CATEGORICAL, K.BINARY]


def random_X(rng, n, repeats=False):
    X = np.column_stack(
        [rng.normal(size=n), rng.normal(size=n), rng.integers(0, 3, size=n), rng.integers(0, 2, size=n)]
    ).astype(float)
    if repeats:
        X = X[rng.integers(0, max(1, n // 3), size=n)]
    return X


def all_components(ls=0.8, var=1.3):
    return [
        SquaredExponential.create([0, 1], [ls, 1.7], var),
        Categorical.create(2, var),
        Interaction.create(2, [0], ls, var),
        BinaryProduct.create(3, [1], ls, var),
    ]


def identity_gram(n):
    return GramMatrix(n, constant(np.eye(n)), np.eye(n))


# ---------------------------------------------------------------------------
# components


def test_se_closed_forms():
    se = SquaredExponential.create([0], 2.0, 1.5)
    X = np.array([[0.0], [0.0], [2.0]])
    k = eval_component(se, X).data
    assert k[0, 1] == pytest.approx(1.5, abs=1e-15)
    assert k[0, 2] == pytest.approx(1.5 * np.exp(-0.5), abs=1e-15)
    assert 1.5 * np.exp(-0.5) == pytest.approx(0.6065 * 1.5, rel=1e-4)


def test_categorical_closed_form():
    k = eval_component(Categorical.create(0, 1.0), np.array([[0.0], [0.0], [1.0]])).data
    assert k[0, 1] == 1.0 and k[0, 2] == 0.0


def test_interaction_and_binary_product():
    X = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
    inter = eval_component(Interaction.create(2, [0], 1.0, 2.0), X, [K.CONTINUOUS, K.CONTINUOUS, K.CATEGORICAL]).data
    assert inter[0, 1] == pytest.approx(2.0 * np.exp(-0.5))
    assert inter[0, 2] == 0.0
    bp = eval_component(BinaryProduct.create(2, [0], 1.0, 2.0), X, [K.CONTINUOUS, K.CONTINUOUS, K.BINARY]).data
    assert bp[0, 1] == pytest.approx(2.0 * np.exp(-0.5))
    assert bp[2, 2] == 0.0 and bp[0, 2] == 0.0


def test_kind_mismatch():
    with pytest.raises(KindMismatch):
        eval_component(SquaredExponential.create([2]), np.zeros((2, 4)), KINDS)
    with pytest.raises(KindMismatch):
        eval_component(Categorical.create(0), np.zeros((2, 4)), KINDS)
    with pytest.raises(KindMismatch):
        eval_component(BinaryProduct.create(2, [0]), np.zeros((2, 4)), KINDS)


@given(st.integers(0, 10_000), st.integers(1, 9))
@settings(max_examples=50, deadline=None)
def test_components_exactly_symmetric(seed, n):
    X = random_X(np.random.default_rng(seed), n)
    for comp in all_components():
        k = eval_component(comp, X, KINDS).data
        assert np.array_equal(k, k.T)


# ---------------------------------------------------------------------------
# Gram


def test_single_point_gram():
    spec = KernelSpec([SquaredExponential.create([0], 1.0, 0.7)], jitter=1e-6)
    g = eval_gram(spec, np.array([[0.3]]))
    assert g.values.data[0, 0] == pytest.approx(0.7 + 1e-6, abs=1e-15)


@given(st.integers(0, 10_000), st.integers(1, 8))
@settings(max_examples=50, deadline=None)
def test_gram_is_sum_of_components_plus_jitter(seed, n):
    X = random_X(np.random.default_rng(seed), n)
    comps = all_components()
    g = eval_gram(KernelSpec(comps, jitter=1e-6), X, KINDS)
    expect = sum(eval_component(c, X, KINDS).data for c in comps) + g.jitter * np.eye(n)
    assert np.array_equal(g.values.data, expect)


@given(st.integers(0, 10_000), st.integers(1, 8))
@settings(max_examples=50, deadline=None)
def test_noise_gram_matches_components(seed, n):
    X = random_X(np.random.default_rng(seed), n, repeats=True)
    comps = all_components()
    spec = KernelSpec(comps, jitter=1e-6, log_noise=Parameter(np.log(0.4)))
    g = eval_gram(spec, X, KINDS)
    assert g.structured
    expect = sum(eval_component(c, X, KINDS).data for c in comps) + (0.4 + g.jitter) * np.eye(n)
    np.testing.assert_allclose(g.values.data, expect, rtol=0, atol=1e-14)


@pytest.mark.parametrize("seed", range(20))
def test_jittered_gram_is_spd(seed):
    rng = np.random.default_rng(seed)
    X = random_X(rng, 8, repeats=seed % 2 == 1)
    for noise in (None, 0.9):
        spec = default_spec(KINDS, noise=noise)
        g = eval_gram(spec, X, KINDS)
        assert np.linalg.eigvalsh(g.values.data).min() > 0
        assert np.linalg.norm(g.chol @ g.chol.T - g.values.data) < 1e-8


def test_jitter_escalates_then_fails():
    # near-duplicate points with a huge variance: roundoff swamps a tiny jitter
    X = np.linspace(0.0, 1.0, 30)[:, None]
    spec = KernelSpec([SquaredExponential.create([0], 1.0, 1e6)], jitter=1e-12)
    g = eval_gram(spec, X)
    assert 1e-12 < g.jitter <= 1e-4
    with pytest.raises(CholeskyFailure):
        eval_gram(spec, X, escalate=False)
    hopeless = KernelSpec([SquaredExponential.create([0], 1.0, 1e13)], jitter=1e-12)
    with pytest.raises(CholeskyFailure):
        eval_gram(hopeless, X)


def test_empty_descriptor_matrix_rejected():
    with pytest.raises(DimensionMismatch):
        eval_gram(default_spec(KINDS), np.zeros((0, 4)), KINDS)


# ---------------------------------------------------------------------------
# KL


def test_kl_identical_gaussians_is_zero():
    n = 4
    kl = kl_posterior_vs_gp(constant(np.zeros((n, 2))), constant(np.zeros((n, 2))), [identity_gram(n)] * 2)
    assert abs(kl.item()) < 1e-10


def test_kl_half_mu_squared():
    kl = kl_posterior_vs_gp(constant([[1.0]]), constant([[0.0]]), [identity_gram(1)])
    assert kl.item() == pytest.approx(0.5, abs=1e-12)


def test_kl_standard_normal_examples():
    assert kl_standard_normal(constant([[0.0]]), constant([[0.0]])).item() == 0.0
    assert kl_standard_normal(constant([[2.0]]), constant([[0.0]])).item() == pytest.approx(2.0)


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 3))
@settings(max_examples=100, deadline=None)
def test_kl_identity_gram_equals_standard_normal(seed, n, L):
    rng = np.random.default_rng(seed)
    mu, ls = rng.normal(size=(n, L)), rng.normal(scale=0.5, size=(n, L))
    a = kl_posterior_vs_gp(constant(mu), constant(ls), [identity_gram(n)] * L).item()
    b = kl_standard_normal(constant(mu), constant(ls)).item()
    assert abs(a - b) < 1e-10


@given(st.integers(0, 10_000), st.integers(1, 7))
@settings(max_examples=100, deadline=None)
def test_kl_nonnegative(seed, n):
    rng = np.random.default_rng(seed)
    X = random_X(rng, n, repeats=True)
    spec = default_spec(KINDS, variance=float(rng.uniform(0.1, 2)), noise=float(rng.uniform(0.05, 1)))
    g = eval_gram(spec, X, KINDS)
    mu, ls = rng.normal(size=(n, 1)), rng.normal(scale=0.7, size=(n, 1))
    assert kl_posterior_vs_gp(constant(mu), constant(ls), [g]).item() >= -1e-8


def test_kl_zero_when_posterior_matches_prior_marginals_of_diagonal_prior():
    d = np.array([0.5, 2.0, 1.3])
    g = GramMatrix(3, constant(np.diag(d)), np.diag(np.sqrt(d)))
    kl = kl_posterior_vs_gp(constant(np.zeros((3, 1))), constant(0.5 * np.log(d)[:, None]), [g])
    assert abs(kl.item()) < 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_structured_kl_matches_dense(seed):
    rng = np.random.default_rng(seed)
    n = 12
    X = random_X(rng, n, repeats=True)
    spec = default_spec(KINDS, variance=0.7, noise=0.3)
    g = eval_gram(spec, X, KINDS)
    mu, ls = rng.normal(size=(n, 1)), rng.normal(scale=0.4, size=(n, 1))
    dense = GramMatrix(n, constant(g.values.data.copy()), jitter=g.jitter)
    a = kl_posterior_vs_gp(constant(mu), constant(ls), [g]).item()
    b = kl_posterior_vs_gp(constant(mu), constant(ls), [dense]).item()
    c = kl_value(mu[:, 0], np.exp(2 * ls[:, 0]), g.values.data)
    assert a == pytest.approx(b, rel=1e-10)
    assert a == pytest.approx(c, rel=1e-10)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("noise", [None, 0.5])
def test_kl_gradients_including_kernel_parameters(seed, noise):
    rng = np.random.default_rng(seed)
    n = 7
    X = random_X(rng, n, repeats=noise is not None)
    spec = default_spec(KINDS, lengthscale=1.3, variance=0.6, noise=noise)
    mu = Parameter(rng.normal(size=(n, 2)))
    ls = Parameter(rng.normal(scale=0.3, size=(n, 2)))
    params = [mu, ls, *spec.parameters()]

    def loss():
        g = eval_gram(spec, X, KINDS, escalate=False)
        return kl_posterior_vs_gp(mu, ls, [g, g])

    with Tape() as tape:
        value = loss()
    grads = backward(tape, value, params)
    for p in params:
        def f():
            with no_grad():
                return loss().item()
        assert rel_err(grads[p], finite_difference_grad(f, p)) < 1e-4


def test_kl_dimension_checks():
    with pytest.raises(DimensionMismatch):
        kl_posterior_vs_gp(constant(np.zeros((3, 2))), constant(np.zeros((3, 2))), [identity_gram(3)])
    with pytest.raises(DimensionMismatch):
        kl_posterior_vs_gp(constant(np.zeros((3, 1))), constant(np.zeros((3, 1))), [identity_gram(4)])


# ---------------------------------------------------------------------------
# construction helpers


def test_default_spec_layout():
    spec = default_spec(KINDS)
    types = [type(c).__name__ for c in spec.components]
    assert types == ["SquaredExponential", "Categorical", "Interaction", "BinaryProduct"]
    assert spec.log_noise is not None


def test_structure_round_trip():
    spec = spec_from_config(
        [
            {"type": "se", "descriptors": ["a", "b"]},
            {"type": "categorical", "descriptor": "c"},
            {"type": "interaction", "categorical": "c", "descriptors": ["a"]},
        ],
        ["a", "b", "c", "d"],
        noise=None,
    )
    back = spec_from_structure(spec_structure(spec))
    assert spec_structure(back) == spec_structure(spec)
    assert back.log_noise is None
    with pytest.raises(KeyError):
        spec_from_config([{"type": "se", "descriptors": ["zz"]}], ["a"])


def test_descriptor_encoder_round_trip():
    descs = [(10.0, 70.0, "A", 1.0), (12.0, 55.0, "B", 0.0), (11.0, 80.0, "A", 0.0)]
    enc = DescriptorEncoder(KINDS, use_time=True).fit(descs, np.array([1.0, 2.0, 3.0]))
    X = enc.matrix(descs, [1.0, 2.0, 3.0])
    assert X.shape == (3, 5)
    np.testing.assert_allclose(X[:, 0].mean(), 0.0, atol=1e-12)
    assert list(X[:, 2]) == [0.0, 1.0, 0.0]
    assert list(X[:, 3]) == [1.0, 0.0, 0.0]
    again = DescriptorEncoder.from_state(enc.state())
    np.testing.assert_array_equal(again.matrix(descs, [1.0, 2.0, 3.0]), X)
