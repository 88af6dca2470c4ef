"""Reproducing kernels on [0, 1] and the Gram structures built from them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import LongitudinalDataset

FAMILIES = ("sobolev1", "cubic-spline", "gaussian")
_ALIASES = {"cubic": "cubic-spline"}


@dataclass(frozen=True)
class KernelSpec:
    family: str = "sobolev1"
    bandwidth: float = 0.25

    def __post_init__(self):
        fam = _ALIASES.get(self.family, self.family)
        object.__setattr__(self, "family", fam)
        if fam not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; choose from {FAMILIES}")
        if fam == "gaussian" and not self.bandwidth > 0:
            raise ValueError("gaussian kernel needs a positive bandwidth")

    def __call__(self, s, t):
        return kernel_matrix(self, s, t)

    def to_dict(self) -> dict:
        d = {"family": self.family}
        if self.family == "gaussian":
            d["bandwidth"] = self.bandwidth
        return d

    @classmethod
    def from_dict(cls, d) -> "KernelSpec":
        return cls(d["family"], float(d.get("bandwidth", 0.25)))


def _check_times(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t > 1.0) or np.any(np.isnan(t)):
        raise ValueError("kernel arguments must lie in [0, 1]")
    return t


def _k1(x):
    return x - 0.5


def _k2(x):
    return (_k1(x) ** 2 - 1.0 / 12.0) / 2.0


def _k4(x):
    k = _k1(x)
    return (k**4 - k**2 / 2.0 + 7.0 / 240.0) / 24.0


def kernel_matrix(spec: KernelSpec, s, t) -> np.ndarray:
    """Cross-kernel matrix ``K[a, b] = K(s[a], t[b])``."""
    s = np.atleast_1d(_check_times(s))
    t = np.atleast_1d(_check_times(t))
    S, T = s[:, None], t[None, :]
    if spec.family == "sobolev1":
        return 1.0 + np.minimum(S, T)
    if spec.family == "cubic-spline":
        # constant + linear + smooth part of the second-order Sobolev space
        return 1.0 + _k1(S) * _k1(T) + _k2(S) * _k2(T) - _k4(np.abs(S - T))
    return np.exp(-((S - T) ** 2) / (2.0 * spec.bandwidth**2))


def kernel_eval(spec: KernelSpec, s: float, t: float) -> float:
    return float(kernel_matrix(spec, s, t)[0, 0])


def kernel_diagonal(spec: KernelSpec, t) -> np.ndarray:
    t = np.atleast_1d(_check_times(t))
    if spec.family == "sobolev1":
        return 1.0 + t
    if spec.family == "cubic-spline":
        return 1.0 + _k1(t) ** 2 + _k2(t) ** 2 - _k4(0.0)
    return np.ones_like(t)


def gram_matrix(spec: KernelSpec, ds_or_times) -> np.ndarray:
    """``N x N`` Gram matrix over all visit times in dataset order."""
    t = ds_or_times.times if isinstance(ds_or_times, LongitudinalDataset) else ds_or_times
    G = kernel_matrix(spec, t, t)
    return (G + G.T) / 2.0


def component_gram(G: np.ndarray, x_j) -> np.ndarray:
    """Covariate-weighted Gram ``D_j G D_j`` with ``D_j = diag(x_j)``."""
    x_j = np.asarray(x_j, dtype=float)
    if G.shape != (len(x_j), len(x_j)):
        raise ValueError(f"Gram of shape {G.shape} does not match {len(x_j)} covariate values")
    return x_j[:, None] * G * x_j[None, :]


def aggregate_kernel(sigma, theta) -> np.ndarray:
    """``K_theta = sum_j theta_j Sigma_j``."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0):
        raise ValueError("theta must be nonnegative")
    sigma = np.asarray(sigma)
    if sigma.shape[0] != len(theta):
        raise ValueError("need one weight per component Gram")
    return np.tensordot(theta, sigma, axes=1)


@dataclass(frozen=True, eq=False)
class GramBlocks:
    """Pure Gram ``G`` and the stacked ``p x N x N`` component Grams."""

    G: np.ndarray
    sigma: np.ndarray
    x: np.ndarray  # N x p covariate matrix the blocks were built from
    visit_index: dict

    @property
    def N(self) -> int:
        return self.G.shape[0]

    @property
    def p(self) -> int:
        return self.sigma.shape[0]

    def aggregate(self, theta) -> np.ndarray:
        return aggregate_kernel(self.sigma, theta)

    def fitted_components(self, coeffs) -> np.ndarray:
        """Rows ``Sigma_j a^j`` for a ``p x N`` coefficient array (or one shared vector)."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.ndim == 1:
            coeffs = np.broadcast_to(coeffs, (self.p, self.N))
        if coeffs.shape != (self.p, self.N):
            raise ValueError(f"coefficients of shape {coeffs.shape}, expected {(self.p, self.N)}")
        # Sigma_j a = x_j * (G (x_j * a)), cheaper than touching sigma
        return self.x.T * ((self.x.T * coeffs) @ self.G)

    def component_norms_sq(self, coeffs) -> np.ndarray:
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.ndim == 1:
            coeffs = np.broadcast_to(coeffs, (self.p, self.N))
        return np.maximum(np.einsum("jn,jn->j", coeffs, self.fitted_components(coeffs)), 0.0)


def build_blocks(spec: KernelSpec, ds: LongitudinalDataset) -> GramBlocks:
    if ds.has_missing():
        raise ValueError("dataset still has missing covariates; apply a MissingPolicy first")
    G = gram_matrix(spec, ds)
    X = ds.X
    sigma = np.stack([component_gram(G, X[:, j]) for j in range(ds.p)])
    index = {}
    row = 0
    for s in ds.subjects:
        for k in range(s.m):
            index[(s.id, k)] = row
            row += 1
    return GramBlocks(G, sigma, X, index)


def psd_jitter(A: np.ndarray) -> float:
    """Diagonal jitter used when a factorization of ``A`` fails."""
    n = A.shape[0]
    return 1e-10 * max(float(np.trace(A)), 1e-300) / n
