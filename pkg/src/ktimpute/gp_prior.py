"""Additive Gaussian-process prior over subject descriptors.

Each latent dimension gets its own :class:`KernelSpec`, a sum of covariance
components over the descriptor matrix ``X`` (one row per sample). Kernel
hyperparameters live in log space as trainable scalar tensors, so the prior
is fitted together with the encoder and decoder.

Descriptor matrices are numeric: categorical columns hold integer codes (two
samples share a category iff their codes are equal) and binary columns hold
0/1 indicators.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import scipy.linalg

from .core_types import DescriptorKind
from .numeric import (
    Parameter,
    Tensor,
    add,
    apply_op,
    constant,
    exp,
    mul,
    reduce_sum,
    scale,
    square,
    sub,
)

DEFAULT_JITTER = 1e-6
MAX_JITTER = 1e-4


class KindMismatch(ValueError):
    pass


class CholeskyFailure(np.linalg.LinAlgError):
    pass


class DimensionMismatch(ValueError):
    pass


def _log_param(value: float, name: str) -> Tensor:
    if value <= 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return Parameter(np.log(value), name=name)


@dataclass
class SquaredExponential:
    indices: tuple[int, ...]
    log_lengthscales: list[Tensor]
    log_variance: Tensor

    @classmethod
    def create(cls, indices: Sequence[int], lengthscales=1.0, variance=1.0) -> "SquaredExponential":
        indices = tuple(indices)
        if np.ndim(lengthscales) == 0:
            lengthscales = [float(lengthscales)] * len(indices)
        return cls(
            indices,
            [_log_param(float(l), "lengthscale") for l in lengthscales],
            _log_param(variance, "variance"),
        )

    def parameters(self) -> list[Tensor]:
        return [*self.log_lengthscales, self.log_variance]


@dataclass
class Categorical:
    index: int
    log_variance: Tensor

    @classmethod
    def create(cls, index: int, variance=1.0) -> "Categorical":
        return cls(int(index), _log_param(variance, "variance"))

    def parameters(self) -> list[Tensor]:
        return [self.log_variance]


@dataclass
class Interaction:
    """Categorical equality times an SE kernel over continuous descriptors."""

    cat_index: int
    indices: tuple[int, ...]
    log_lengthscales: list[Tensor]
    log_variance: Tensor

    @classmethod
    def create(cls, cat_index: int, indices: Sequence[int], lengthscales=1.0, variance=1.0) -> "Interaction":
        indices = tuple(indices)
        if np.ndim(lengthscales) == 0:
            lengthscales = [float(lengthscales)] * len(indices)
        return cls(
            int(cat_index),
            indices,
            [_log_param(float(l), "lengthscale") for l in lengthscales],
            _log_param(variance, "variance"),
        )

    def parameters(self) -> list[Tensor]:
        return [*self.log_lengthscales, self.log_variance]


@dataclass
class BinaryProduct:
    """Indicator product 1[b = b' = 1] times an SE kernel over continuous descriptors."""

    bin_index: int
    indices: tuple[int, ...]
    log_lengthscales: list[Tensor]
    log_variance: Tensor

    @classmethod
    def create(cls, bin_index: int, indices: Sequence[int], lengthscales=1.0, variance=1.0) -> "BinaryProduct":
        indices = tuple(indices)
        if np.ndim(lengthscales) == 0:
            lengthscales = [float(lengthscales)] * len(indices)
        return cls(
            int(bin_index),
            indices,
            [_log_param(float(l), "lengthscale") for l in lengthscales],
            _log_param(variance, "variance"),
        )

    def parameters(self) -> list[Tensor]:
        return [*self.log_lengthscales, self.log_variance]


KernelComponent = Union[SquaredExponential, Categorical, Interaction, BinaryProduct]


@dataclass
class KernelSpec:
    """Additive kernel: sum of components + noise variance * I + jitter * I.

    ``log_noise`` is the trainable per-sample variance of the prior (set it
    to None for a purely structured kernel).
    """

    components: list[KernelComponent]
    jitter: float = DEFAULT_JITTER
    log_noise: Optional[Tensor] = None

    def __post_init__(self):
        if not self.components:
            raise ValueError("KernelSpec needs at least one component")
        if not self.jitter > 0:
            raise ValueError("jitter must be positive")

    def parameters(self) -> list[Tensor]:
        out = [p for c in self.components for p in c.parameters()]
        if self.log_noise is not None:
            out.append(self.log_noise)
        return out


class GramMatrix:
    """An n x n prior covariance, either dense or K = P K_u P^T + c I.

    In the structured form ``unique`` is the Gram over distinct descriptor
    rows, ``inverse`` maps each sample to its row and ``diag`` is the scalar
    c (noise variance plus jitter). The dense ``values`` tensor and its
    Cholesky factor ``chol`` are then only built on request.
    """

    def __init__(self, n, values=None, chol=None, jitter=DEFAULT_JITTER, unique=None, inverse=None, diag=None):
        if values is None and unique is None:
            raise ValueError("GramMatrix needs dense values or a structured form")
        self.n = n
        self.jitter = jitter
        self.unique = unique
        self.inverse = None if inverse is None else np.asarray(inverse)
        self.diag = diag
        self._values = values
        self._chol = chol
        self._factor = None  # (counts, Cholesky of c I + G^1/2 K_u G^1/2)

    @property
    def structured(self) -> bool:
        return self.unique is not None

    @property
    def values(self) -> Tensor:
        if self._values is None:
            self._values = add(_expand_square(self.unique, self.inverse), mul(self.diag, constant(np.eye(self.n))))
        return self._values

    @property
    def chol(self) -> np.ndarray:
        if self._chol is None:
            self._chol = np.linalg.cholesky(self.values.data)
        return self._chol

    def factor(self) -> tuple[np.ndarray, np.ndarray]:
        if self._factor is None:
            self._factor = _small_factor(self.unique.data, self.inverse, float(self.diag.data))
        return self._factor


# ---------------------------------------------------------------------------
# evaluation


def _check_kind(kinds: Optional[Sequence[DescriptorKind]], idx: int, want: DescriptorKind, who: str) -> None:
    if kinds is None:
        return
    if idx >= len(kinds):
        raise KindMismatch(f"{who}: descriptor index {idx} out of range")
    if DescriptorKind(kinds[idx]) != want:
        raise KindMismatch(f"{who}: descriptor {idx} is {DescriptorKind(kinds[idx]).value}, expected {want.value}")


def _sq_dist(col: np.ndarray) -> np.ndarray:
    d = col[:, None] - col[None, :]
    return d * d


def _se_tensor(X: np.ndarray, indices, log_ls: list[Tensor], cache: Optional[dict]) -> Tensor:
    """exp(-1/2 sum_d (x_d - x'_d)^2 / l_d^2), unit variance."""
    expo = None
    for d, lls in zip(indices, log_ls):
        key = ("sq", d)
        sq = cache.get(key) if cache is not None else None
        if sq is None:
            sq = _sq_dist(X[:, d])
            if cache is not None:
                cache[key] = sq
        term = mul(constant(sq), exp(scale(lls, -2.0)))
        expo = term if expo is None else add(expo, term)
    if expo is None:
        return constant(np.ones((X.shape[0], X.shape[0])))
    return exp(scale(expo, -0.5))


def _equal_mask(col: np.ndarray) -> np.ndarray:
    return (col[:, None] == col[None, :]).astype(np.float64)


def eval_component(
    component: KernelComponent,
    X: np.ndarray,
    kinds: Optional[Sequence[DescriptorKind]] = None,
    cache: Optional[dict] = None,
) -> Tensor:
    """Evaluate one covariance component on descriptor matrix ``X`` (n, Q)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch(f"descriptor matrix must be 2-D, got {X.shape}")
    var = exp(component.log_variance)
    if isinstance(component, SquaredExponential):
        for d in component.indices:
            _check_kind(kinds, d, DescriptorKind.CONTINUOUS, "SquaredExponential")
        return mul(var, _se_tensor(X, component.indices, component.log_lengthscales, cache))
    if isinstance(component, Categorical):
        _check_kind(kinds, component.index, DescriptorKind.CATEGORICAL, "Categorical")
        return mul(var, constant(_equal_mask(X[:, component.index])))
    if isinstance(component, Interaction):
        _check_kind(kinds, component.cat_index, DescriptorKind.CATEGORICAL, "Interaction")
        for d in component.indices:
            _check_kind(kinds, d, DescriptorKind.CONTINUOUS, "Interaction")
        se = _se_tensor(X, component.indices, component.log_lengthscales, cache)
        return mul(var, mul(constant(_equal_mask(X[:, component.cat_index])), se))
    if isinstance(component, BinaryProduct):
        _check_kind(kinds, component.bin_index, DescriptorKind.BINARY, "BinaryProduct")
        for d in component.indices:
            _check_kind(kinds, d, DescriptorKind.CONTINUOUS, "BinaryProduct")
        b = (X[:, component.bin_index] == 1.0).astype(np.float64)
        se = _se_tensor(X, component.indices, component.log_lengthscales, cache)
        return mul(var, mul(constant(np.outer(b, b)), se))
    raise TypeError(f"unknown kernel component {type(component).__name__}")


def _expand_square(K_u: Tensor, inverse: np.ndarray) -> Tensor:
    """K_u[inverse][:, inverse]: lift a Gram over unique rows back to all rows."""
    m = K_u.shape[0]
    P = np.zeros((inverse.size, m))
    P[np.arange(inverse.size), inverse] = 1.0

    def vjp(g):
        return (P.T @ g @ P,)

    return apply_op(K_u.data[np.ix_(inverse, inverse)], (K_u,), vjp)


def _unique_rows(X: np.ndarray, cache: Optional[dict]) -> tuple[np.ndarray, np.ndarray]:
    if cache is not None and "unique" in cache:
        return cache["unique"]
    U, inverse = np.unique(X, axis=0, return_inverse=True)
    out = (U, np.asarray(inverse).reshape(-1))
    if cache is not None:
        cache["unique"] = out
    return out


def _component_sum(spec: KernelSpec, U: np.ndarray, kinds, cache: Optional[dict]) -> Tensor:
    sub_cache = cache.setdefault("sub", {}) if cache is not None else None
    total = None
    for comp in spec.components:
        k = eval_component(comp, U, kinds, sub_cache)
        total = k if total is None else add(total, k)
    return total


def structured_sum(spec: KernelSpec, X: np.ndarray, kinds=None, cache: Optional[dict] = None) -> Tensor:
    """Dense sum of the components plus the noise term (no jitter).

    Components are evaluated once per distinct descriptor row and then
    expanded, which matters when many samples share a subject's descriptors.
    """
    U, inverse = _unique_rows(X, cache)
    total = _component_sum(spec, U, kinds, cache)
    if U.shape[0] != X.shape[0] or np.any(inverse != np.arange(X.shape[0])):
        total = _expand_square(total, inverse)
    if spec.log_noise is not None:
        total = add(total, mul(exp(spec.log_noise), constant(np.eye(X.shape[0]))))
    return total


def _small_factor(K_u: np.ndarray, inverse: np.ndarray, c: float) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(inverse, minlength=K_u.shape[0]).astype(np.float64)
    gs = np.sqrt(counts)
    M = gs[:, None] * K_u * gs[None, :]
    M[np.diag_indices_from(M)] += c
    return counts, np.linalg.cholesky(M)


def eval_gram(
    spec: KernelSpec,
    X: np.ndarray,
    kinds=None,
    cache: Optional[dict] = None,
    escalate: bool = True,
) -> GramMatrix:
    """Sum the components, add jitter to the diagonal and factorise.

    On a failed Cholesky the jitter is multiplied by 10 until it would pass
    ``MAX_JITTER``; then :class:`CholeskyFailure` is raised. With a noise
    term the result stays in structured form: K is positive definite exactly
    when the small matrix c I + G^1/2 K_u G^1/2 is (G holds the row counts).
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 1:
        raise DimensionMismatch("need at least one sample")
    jitter = spec.jitter
    if spec.log_noise is not None:
        U, inverse = _unique_rows(X, cache)
        K_u = _component_sum(spec, U, kinds, cache)
        noise = exp(spec.log_noise)
        while True:
            c = add(noise, constant(np.asarray(jitter)))
            g = GramMatrix(n, jitter=jitter, unique=K_u, inverse=inverse, diag=c)
            try:
                g.factor()
                return g
            except np.linalg.LinAlgError:
                if not escalate or jitter * 10 > MAX_JITTER * (1 + 1e-12):
                    raise CholeskyFailure(f"Gram matrix not positive definite at jitter {jitter:g}") from None
                jitter *= 10
    base = structured_sum(spec, X, kinds, cache)
    while True:
        values = add(base, constant(jitter * np.eye(n)))
        try:
            chol = np.linalg.cholesky(values.data)
            return GramMatrix(n, values, chol, jitter)
        except np.linalg.LinAlgError:
            if not escalate or jitter * 10 > MAX_JITTER * (1 + 1e-12):
                raise CholeskyFailure(f"Gram matrix not positive definite at jitter {jitter:g}") from None
            jitter *= 10


# ---------------------------------------------------------------------------
# KL divergences


def kl_standard_normal(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """KL( N(mu, diag(sigma^2)) || N(0, I) ), summed over all entries."""
    if mu.shape != log_sigma.shape:
        raise DimensionMismatch(f"mu {mu.shape} vs log_sigma {log_sigma.shape}")
    two_ls = scale(log_sigma, 2.0)
    inner = sub(add(exp(two_ls), square(mu)), add(two_ls, constant(np.ones(mu.shape))))
    return scale(reduce_sum(inner), 0.5)


def _kl_dense(g: GramMatrix, mu: np.ndarray, ls: np.ndarray, s2: np.ndarray):
    n = g.n
    Lc = g.chol
    alpha = scipy.linalg.cho_solve((Lc, True), mu)
    Linv = scipy.linalg.solve_triangular(Lc, np.eye(n), lower=True)
    # diag(K^-1) = column sums of Linv^2
    kinv_diag = np.einsum("ij,ij->j", Linv, Linv)
    logdet = 2.0 * np.log(np.diag(Lc)).sum()
    kl = 0.5 * (kinv_diag @ s2 + mu @ alpha - n + logdet - 2.0 * ls.sum())

    def grads():
        Kinv = Linv.T @ Linv
        dK = 0.5 * (Kinv - (Kinv * s2[None, :]) @ Kinv - np.outer(alpha, alpha))
        return (0.5 * (dK + dK.T),)

    return kl, alpha, kinv_diag, grads


def _kl_structured(g: GramMatrix, mu: np.ndarray, ls: np.ndarray, s2: np.ndarray):
    # Woodbury: K^-1 = (I - P A P^T) / c with A = G^-1/2 (I - c M^-1) G^-1/2
    n, u = g.n, g.inverse
    c = float(g.diag.data)
    counts, Lm = g.factor()
    m = counts.size
    gs = np.sqrt(counts)
    Minv = scipy.linalg.cho_solve((Lm, True), np.eye(m))
    A = (np.eye(m) - c * Minv) / gs[:, None] / gs[None, :]
    A = 0.5 * (A + A.T)
    A_diag = np.diag(A)
    alpha = (mu - (A @ np.bincount(u, mu, m))[u]) / c
    kinv_diag = (1.0 - A_diag[u]) / c
    logdet = (n - m) * np.log(c) + 2.0 * np.log(np.diag(Lm)).sum()
    kl = 0.5 * (kinv_diag @ s2 + mu @ alpha - n + logdet - 2.0 * ls.sum())

    def grads():
        # dK = 1/2 (K^-1 - K^-1 S K^-1 - a a^T); pull back through K = P K_u P^T + c I
        R = np.eye(m) - A * counts[None, :]  # K^-1 P = P R / c
        PtKinvP = (np.diag(counts) - counts[:, None] * A * counts[None, :]) / c
        PtKSKP = R.T @ (np.bincount(u, s2, m)[:, None] * R) / (c * c)
        ag = np.bincount(u, alpha, m)
        dKu = 0.5 * (PtKinvP - PtKSKP - np.outer(ag, ag))
        aga_diag = ((A * counts[None, :]) * A).sum(axis=1)
        kinv2_diag = (1.0 - 2.0 * A_diag[u] + aga_diag[u]) / (c * c)
        dc = 0.5 * (kinv_diag.sum() - s2 @ kinv2_diag - alpha @ alpha)
        return 0.5 * (dKu + dKu.T), np.asarray(dc)

    return kl, alpha, kinv_diag, grads


def kl_posterior_vs_gp(mu: Tensor, log_sigma: Tensor, grams: Sequence[GramMatrix]) -> Tensor:
    """Sum over latent dims of KL( N(mu_l, diag(sigma_l^2)) || N(0, K_l) ).

    ``mu`` and ``log_sigma`` are (n, L); ``grams`` holds one n x n Gram per
    latent dimension. The gradient w.r.t. each K_l is
    1/2 (K^-1 - K^-1 S K^-1 - a a^T) with a = K^-1 mu_l and S = diag(sigma_l^2);
    for structured Grams it is pulled back to K_u and c without forming any
    n x n matrix.
    """
    if mu.shape != log_sigma.shape or mu.data.ndim != 2:
        raise DimensionMismatch(f"mu {mu.shape} vs log_sigma {log_sigma.shape}")
    n, L = mu.shape
    if len(grams) != L:
        raise DimensionMismatch(f"{len(grams)} Gram matrices for {L} latent dims")
    for g in grams:
        if g.n != n:
            raise DimensionMismatch(f"Gram of size {g.n} for {n} samples")

    mud, lsd = mu.data, log_sigma.data
    s2 = np.exp(2.0 * lsd)
    total = 0.0
    parts = []
    parents: list[Tensor] = [mu, log_sigma]
    for l, g in enumerate(grams):
        fn = _kl_structured if g.structured else _kl_dense
        kl, alpha, kinv_diag, grads = fn(g, mud[:, l], lsd[:, l], s2[:, l])
        total += kl
        parts.append((alpha, kinv_diag, grads))
        parents.extend([g.unique, g.diag] if g.structured else [g.values])

    def vjp(gout):
        gs = float(gout)
        dmu = np.empty_like(mud)
        dls = np.empty_like(lsd)
        rest = []
        for l, (alpha, kinv_diag, grads) in enumerate(parts):
            dmu[:, l] = gs * alpha
            dls[:, l] = gs * (kinv_diag * s2[:, l] - 1.0)
            rest.extend(gs * d for d in grads())
        return (dmu, dls, *rest)

    return apply_op(np.asarray(total), tuple(parents), vjp)


def kl_value(mu: np.ndarray, sigma2: np.ndarray, K: np.ndarray) -> float:
    """Plain-numpy KL( N(mu, diag(sigma2)) || N(0, K) ) for a single latent dim."""
    n = len(mu)
    c = scipy.linalg.cho_factor(K, lower=True)
    Kinv_mu = scipy.linalg.cho_solve(c, mu)
    Kinv_diag = np.diag(scipy.linalg.cho_solve(c, np.eye(n)))
    logdet = 2.0 * np.log(np.diag(c[0])).sum()
    return 0.5 * (Kinv_diag @ sigma2 + mu @ Kinv_mu - n + logdet - np.log(sigma2).sum())


# ---------------------------------------------------------------------------
# construction helpers


def default_spec(
    kinds: Sequence[DescriptorKind],
    lengthscale: float = 1.0,
    variance: float = 0.1,
    noise: Optional[float] = 0.9,
    jitter: float = DEFAULT_JITTER,
    continuous_extra: Sequence[int] = (),
) -> KernelSpec:
    """One SE over all continuous descriptors, a Categorical and an
    Interaction per categorical descriptor, a BinaryProduct per binary one.

    The defaults keep the prior close to N(0, I) at initialisation (small
    component variances, noise near 1), so training starts from the
    standard-normal model and learns descriptor structure from there.

    ``continuous_extra`` appends further continuous columns (e.g. a time
    column placed after the descriptors) to the SE inputs.
    """
    kinds = [DescriptorKind(k) for k in kinds]
    cont = [i for i, k in enumerate(kinds) if k is DescriptorKind.CONTINUOUS] + list(continuous_extra)
    comps: list[KernelComponent] = []
    if cont:
        comps.append(SquaredExponential.create(cont, lengthscale, variance))
    for i, k in enumerate(kinds):
        if k is DescriptorKind.CATEGORICAL:
            comps.append(Categorical.create(i, variance))
            if cont:
                comps.append(Interaction.create(i, cont, lengthscale, variance))
    for i, k in enumerate(kinds):
        if k is DescriptorKind.BINARY and cont:
            comps.append(BinaryProduct.create(i, cont, lengthscale, variance))
    if not comps:
        # only binary descriptors and no continuous inputs: fall back to equality on them
        comps = [Categorical.create(i, variance) for i, k in enumerate(kinds)]
    log_noise = None if noise is None else _log_param(noise, "noise")
    return KernelSpec(comps, jitter, log_noise)


def spec_from_config(
    entries: Sequence[dict],
    names: Sequence[str],
    noise: Optional[float] = 0.9,
    jitter: float = DEFAULT_JITTER,
) -> KernelSpec:
    """Build a spec from config entries such as
    ``{"type": "se", "descriptors": ["age"], "lengthscales": [1.0], "variance": 0.5}``.
    """
    pos = {n: i for i, n in enumerate(names)}

    def idx(name):
        if name not in pos:
            raise KeyError(f"unknown descriptor {name!r} in kernel config")
        return pos[name]

    comps: list[KernelComponent] = []
    for e in entries:
        kind = e["type"].lower()
        var = float(e.get("variance", 1.0))
        ls = e.get("lengthscales", 1.0)
        if kind in ("se", "squared_exponential"):
            comps.append(SquaredExponential.create([idx(d) for d in e["descriptors"]], ls, var))
        elif kind == "categorical":
            comps.append(Categorical.create(idx(e["descriptor"]), var))
        elif kind == "interaction":
            comps.append(Interaction.create(idx(e["categorical"]), [idx(d) for d in e["descriptors"]], ls, var))
        elif kind in ("binary", "binary_product"):
            comps.append(BinaryProduct.create(idx(e["binary"]), [idx(d) for d in e["descriptors"]], ls, var))
        else:
            raise ValueError(f"unknown kernel component type {e['type']!r}")
    log_noise = None if noise is None else _log_param(noise, "noise")
    return KernelSpec(comps, jitter, log_noise)


def spec_structure(spec: KernelSpec) -> dict:
    """JSON-ready layout of ``spec`` (component types and descriptor indices, no values)."""
    comps = []
    for c in spec.components:
        if isinstance(c, SquaredExponential):
            comps.append({"type": "se", "indices": list(c.indices)})
        elif isinstance(c, Categorical):
            comps.append({"type": "categorical", "index": c.index})
        elif isinstance(c, Interaction):
            comps.append({"type": "interaction", "cat_index": c.cat_index, "indices": list(c.indices)})
        else:
            comps.append({"type": "binary_product", "bin_index": c.bin_index, "indices": list(c.indices)})
    return {"components": comps, "jitter": spec.jitter, "noise": spec.log_noise is not None}


def spec_from_structure(d: dict) -> KernelSpec:
    """Inverse of :func:`spec_structure`; parameters start at 1 and are meant to be overwritten."""
    comps: list[KernelComponent] = []
    for c in d["components"]:
        if c["type"] == "se":
            comps.append(SquaredExponential.create(c["indices"]))
        elif c["type"] == "categorical":
            comps.append(Categorical.create(c["index"]))
        elif c["type"] == "interaction":
            comps.append(Interaction.create(c["cat_index"], c["indices"]))
        elif c["type"] == "binary_product":
            comps.append(BinaryProduct.create(c["bin_index"], c["indices"]))
        else:
            raise ValueError(f"unknown kernel component type {c['type']!r}")
    return KernelSpec(comps, d["jitter"], _log_param(1.0, "noise") if d["noise"] else None)


def sample_prior(grams: Sequence[GramMatrix], rng: np.random.Generator) -> np.ndarray:
    """Draw Z (n, L) with column l ~ N(0, K_l)."""
    n = grams[0].n
    eps = rng.standard_normal((n, len(grams)))
    return np.stack([g.chol @ eps[:, l] for l, g in enumerate(grams)], axis=1)


__all__ = [
    "SquaredExponential",
    "Categorical",
    "Interaction",
    "BinaryProduct",
    "KernelComponent",
    "KernelSpec",
    "GramMatrix",
    "KindMismatch",
    "CholeskyFailure",
    "DimensionMismatch",
    "eval_component",
    "eval_gram",
    "kl_standard_normal",
    "kl_posterior_vs_gp",
    "kl_value",
    "default_spec",
    "spec_from_config",
    "sample_prior",
    "spec_structure",
    "spec_from_structure",
    "structured_sum",
    "DescriptorEncoder",
]


class DescriptorEncoder:
    """Turn raw descriptor tuples into the numeric matrix the kernels read.

    Continuous columns are standardised with training statistics, categorical
    labels become integer codes (unseen labels get fresh codes in order of
    appearance), binary columns pass through as 0/1. With ``use_time`` an
    extra standardised event-time column is appended after the descriptors.
    """

    def __init__(self, kinds: Sequence[DescriptorKind], use_time: bool = False):
        self.kinds = [DescriptorKind(k) for k in kinds]
        self.use_time = use_time
        self.means: dict[int, float] = {}
        self.stds: dict[int, float] = {}
        self.vocab: dict[int, dict[str, int]] = {}
        self.time_mean = 0.0
        self.time_std = 1.0

    @property
    def column_kinds(self) -> list[DescriptorKind]:
        return self.kinds + ([DescriptorKind.CONTINUOUS] if self.use_time else [])

    @property
    def time_column(self) -> Optional[int]:
        return len(self.kinds) if self.use_time else None

    def fit(self, descriptors: Sequence[Sequence], times: Optional[np.ndarray] = None) -> "DescriptorEncoder":
        for j, k in enumerate(self.kinds):
            col = [d[j] for d in descriptors]
            if k is DescriptorKind.CONTINUOUS:
                arr = np.asarray(col, dtype=np.float64)
                self.means[j] = float(arr.mean()) if arr.size else 0.0
                sd = float(arr.std()) if arr.size else 1.0
                self.stds[j] = sd if sd > 0 else 1.0
            elif k is DescriptorKind.CATEGORICAL:
                self.vocab[j] = {lab: i for i, lab in enumerate(sorted({str(v) for v in col}))}
        if self.use_time and times is not None and np.size(times):
            self.time_mean = float(np.mean(times))
            sd = float(np.std(times))
            self.time_std = sd if sd > 0 else 1.0
        return self

    def encode_row(self, desc: Sequence) -> list[float]:
        out = []
        for j, k in enumerate(self.kinds):
            v = desc[j]
            if k is DescriptorKind.CONTINUOUS:
                out.append((float(v) - self.means.get(j, 0.0)) / self.stds.get(j, 1.0))
            elif k is DescriptorKind.CATEGORICAL:
                voc = self.vocab.setdefault(j, {})
                lab = str(v)
                if lab not in voc:
                    voc[lab] = len(voc)
                out.append(float(voc[lab]))
            else:
                out.append(1.0 if float(v) == 1.0 else 0.0)
        return out

    def matrix(self, descriptors: Sequence[Sequence], times: Optional[Sequence[float]] = None) -> np.ndarray:
        """One row per sample. ``times`` is required when ``use_time`` is set."""
        rows = [self.encode_row(d) for d in descriptors]
        X = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(self.kinds))
        if self.use_time:
            t = (np.asarray(times, dtype=np.float64) - self.time_mean) / self.time_std
            X = np.concatenate([X, t[:, None]], axis=1)
        return X

    def state(self) -> dict:
        return {
            "kinds": [k.value for k in self.kinds],
            "use_time": self.use_time,
            "means": {str(k): v for k, v in self.means.items()},
            "stds": {str(k): v for k, v in self.stds.items()},
            "vocab": {str(k): v for k, v in self.vocab.items()},
            "time_mean": self.time_mean,
            "time_std": self.time_std,
        }

    @classmethod
    def from_state(cls, st: dict) -> "DescriptorEncoder":
        enc = cls(st["kinds"], st["use_time"])
        enc.means = {int(k): v for k, v in st["means"].items()}
        enc.stds = {int(k): v for k, v in st["stds"].items()}
        enc.vocab = {int(k): dict(v) for k, v in st["vocab"].items()}
        enc.time_mean, enc.time_std = st["time_mean"], st["time_std"]
        return enc
