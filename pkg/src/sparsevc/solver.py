"""Penalized estimation of sparse varying-coefficient models.

Two equivalent objectives are exposed:

* the primal form, squared loss plus a sum of RKHS norms of the
  coefficient curves, and
* the weighted form, squared loss plus ``tau0 * sum ||beta_j||^2 / theta_j``
  plus ``tau1 * sum theta_j`` over nonnegative weights ``theta``.

Coefficient curves are represented through covariate-weighted representers,
``beta_j(t) = sum_a a^j_a x_aj K(t_a, t)``, so that
``beta_j(t_b) x_bj = (Sigma_j a^j)_b`` and ``||beta_j||^2 = a^j' Sigma_j a^j``.
Throughout, ``beta_coeffs`` is the ``p x N`` array of the ``a^j``.

The fitting schedule is a single pass: solve at ``theta = 1``, re-weight
``theta`` under a budget ``sum theta <= M``, then solve once more.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .datamodel import LongitudinalDataset
from .kernel import GramBlocks, KernelSpec, build_blocks, psd_jitter

log = logging.getLogger(__name__)

LITERAL_SIZE_LIMIT = 5000


class SolverError(RuntimeError):
    """A linear system could not be solved even after jitter."""


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class InfiniteObjective(ValueError):
    """A component has positive norm but zero weight."""


class DegenerateComponentWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FitConfig:
    """Settings for one fit.

    ``tau0=None`` means "choose by GCV".  ``M=None`` means "choose by
    cross-validation" at the CLI level; ``fit_one_step`` itself needs a number.
    ``lam`` is only used to report the implied ``tau1 = lam**4 / (4 tau0)``.
    """

    tau0: float | None = None
    M: float | None = None
    lam: float | None = None
    kernel: KernelSpec = field(default_factory=KernelSpec)
    jitter: float = 1e-10
    cd_tol: float = 1e-9
    cd_max_iter: int = 20000
    bisect_tol: float = 1e-10
    selection_eps: float = 1e-8

    def __post_init__(self):
        if self.tau0 is not None and not self.tau0 > 0:
            raise ValueError("tau0 must be positive")
        if self.M is not None and self.M < 0:
            raise ValueError("M must be nonnegative")
        if self.lam is not None and not self.lam > 0:
            raise ValueError("lambda must be positive")

    @property
    def tau1(self) -> float | None:
        if self.lam is None or self.tau0 is None:
            return None
        return self.lam**4 / (4.0 * self.tau0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel"] = self.kernel.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "FitConfig":
        d = dict(d)
        d["kernel"] = KernelSpec.from_dict(d["kernel"])
        return cls(**d)


# ---------------------------------------------------------------------------
# objectives


def _y(ds_or_y) -> np.ndarray:
    if isinstance(ds_or_y, LongitudinalDataset):
        return ds_or_y.y
    return np.asarray(ds_or_y, dtype=float)


def residuals(ds, blocks: GramBlocks, b: float, beta_coeffs) -> np.ndarray:
    y = _y(ds)
    if len(y) != blocks.N:
        raise ValueError(f"{len(y)} responses but blocks built for N={blocks.N}")
    return y - b - blocks.fitted_components(beta_coeffs).sum(axis=0)


def objective_primal(ds, blocks: GramBlocks, b: float, beta_coeffs, lam: float) -> float:
    """Mean squared residual plus ``lam**2 * sum_j ||beta_j||``.

    The penalty weight is ``lam**2`` so that, with ``tau1 = lam**4 / (4 tau0)``,
    ``objective_aux`` at the optimal weights equals this value exactly
    (``tau0 a^2 / theta + tau1 theta >= 2 sqrt(tau0 tau1) a = lam**2 a``).
    """
    r = residuals(ds, blocks, b, beta_coeffs)
    norms = np.sqrt(blocks.component_norms_sq(beta_coeffs))
    return float(r @ r / len(r) + lam**2 * norms.sum())


def objective_aux(ds, blocks: GramBlocks, theta, b: float, beta_coeffs, tau0: float, tau1: float) -> float:
    """Weighted objective; a zero weight with a nonzero curve is an error."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0):
        raise ValueError("theta must be nonnegative")
    r = residuals(ds, blocks, b, beta_coeffs)
    nsq = blocks.component_norms_sq(beta_coeffs)
    zero = theta == 0
    if np.any(zero & (nsq > 0)):
        bad = np.flatnonzero(zero & (nsq > 0)).tolist()
        raise InfiniteObjective(f"components {bad} have theta = 0 but nonzero norm")
    ratio = np.divide(nsq, theta, out=np.zeros_like(nsq), where=~zero)
    return float(r @ r / len(r) + tau0 * ratio.sum() + tau1 * theta.sum())


def fixed_theta_objective(ds, blocks: GramBlocks, theta, b: float, c, tau0: float) -> float:
    """Objective in ``(b, c)`` at fixed weights, ``c`` being ``p x N``.

    Curve ``j`` has coefficients ``theta_j c^j``.
    """
    theta = np.asarray(theta, dtype=float)
    c = np.asarray(c, dtype=float)
    if c.ndim == 1:
        c = np.broadcast_to(c, (blocks.p, blocks.N))
    fc = blocks.fitted_components(c)
    r = _y(ds) - b - theta @ fc
    return float(r @ r / len(r) + tau0 * np.sum(theta * np.einsum("jn,jn->j", c, fc)))


def fixed_theta_gradient(ds, blocks: GramBlocks, theta, b: float, c, tau0: float):
    """Gradient of ``fixed_theta_objective`` as ``(d/db, p x N array)``."""
    theta = np.asarray(theta, dtype=float)
    c = np.asarray(c, dtype=float)
    if c.ndim == 1:
        c = np.broadcast_to(c, (blocks.p, blocks.N))
    N = blocks.N
    r = _y(ds) - b - theta @ blocks.fitted_components(c)
    gb = -2.0 * r.sum() / N
    gc = 2.0 * theta[:, None] * blocks.fitted_components(tau0 * c - r[None, :] / N)
    return gb, gc


def theta_from_beta(component_norms, tau0: float, tau1: float) -> np.ndarray:
    norms = np.asarray(component_norms, dtype=float)
    if np.any(norms < 0):
        raise ValueError("norms must be nonnegative")
    if not (tau0 > 0 and tau1 > 0):
        raise ValueError("tau0 and tau1 must be positive")
    return np.sqrt(tau0 / tau1) * norms


def lambda_from_taus(tau0: float, tau1: float) -> float:
    return (4.0 * tau0 * tau1) ** 0.25


# ---------------------------------------------------------------------------
# fixed-theta solves


@dataclass
class FixedThetaSolution:
    b: float
    u: np.ndarray
    theta: np.ndarray
    component_norms: np.ndarray
    fitted: np.ndarray
    tau0: float
    c_blocks: np.ndarray | None = None  # literal solve only, p x N

    @property
    def beta_coeffs(self) -> np.ndarray:
        if self.c_blocks is not None:
            return self.c_blocks
        return self.theta[:, None] * self.u[None, :]


def _cho_factor(A: np.ndarray, jitter: float = 1e-10):
    """Cholesky factor of ``A``, or of ``A + eps I`` if ``A`` is not numerically PD.

    Returns ``(factor, jittered)``.
    """
    try:
        return linalg.cho_factor(A, lower=True, check_finite=False), False
    except linalg.LinAlgError:
        pass
    eps = psd_jitter(A) * (jitter / 1e-10 if jitter > 0 else 1.0)
    log.debug("Cholesky failed; adding diagonal jitter %.3g", eps)
    try:
        return linalg.cho_factor(A + eps * np.eye(len(A)), lower=True, check_finite=False), True
    except linalg.LinAlgError:
        cond = np.linalg.cond(A)
        raise SolverError(f"matrix not positive definite after jitter (cond={cond:.3g})") from None


def _spd_solve(A: np.ndarray, B: np.ndarray, jitter: float = 1e-10) -> np.ndarray:
    """Solve ``A X = B`` for symmetric PSD ``A`` by Cholesky with the jitter fallback."""
    fac, _ = _cho_factor(A, jitter)
    return linalg.cho_solve(fac, B, check_finite=False)


def _psd_pinv_solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Minimum-norm solution of a consistent singular PSD system.

    Eigenvalues below ``N * eps * max_eig`` are treated as exact zeros; the
    caller logs when this path is taken.
    """
    w, V = linalg.eigh(A, check_finite=False)
    cut = len(w) * np.finfo(float).eps * max(float(w[-1]), 0.0)
    inv = np.where(w > cut, 1.0 / np.where(w > cut, w, 1.0), 0.0)
    return V @ (inv[:, None] * (V.T @ B))


def solve_fixed_theta_reduced(ds, blocks: GramBlocks, theta, tau0: float, jitter: float = 1e-10) -> FixedThetaSolution:
    """N-dimensional solve with shared dual vector ``u``.

    Solves ``(K_theta + N tau0 I) u = y - b 1`` subject to ``1'u = 0`` by block
    elimination; component coefficients are ``theta_j u``.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (blocks.p,):
        raise ValueError(f"theta must have length {blocks.p}")
    if np.any(theta < 0):
        raise ValueError("theta must be nonnegative")
    if not tau0 > 0:
        raise ValueError("tau0 must be positive")
    y = _y(ds)
    N = blocks.N
    Kt = blocks.aggregate(theta)
    v = _spd_solve(Kt + N * tau0 * np.eye(N), np.column_stack([y, np.ones(N)]), jitter)
    b = float(v[:, 0].sum() / v[:, 1].sum())
    u = v[:, 0] - b * v[:, 1]
    fitted = b + Kt @ u
    norms = theta * np.sqrt(blocks.component_norms_sq(u))
    return FixedThetaSolution(b, u, theta, norms, fitted, tau0)


def solve_fixed_theta_literal(ds, blocks: GramBlocks, theta, tau0: float, jitter: float = 1e-10) -> FixedThetaSolution:
    """Stacked ``(Np)``-dimensional closed-form solve.

    Cross-checking path for ``solve_fixed_theta_reduced``.  Components with
    ``theta_j = 0`` are removed before assembling the system.
    """
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0):
        raise ValueError("theta must be nonnegative")
    y = _y(ds)
    N, p = blocks.N, blocks.p
    if N * p > LITERAL_SIZE_LIMIT:
        raise ValueError(f"literal solve limited to N*p <= {LITERAL_SIZE_LIMIT} (got {N * p})")
    keep = np.flatnonzero(theta > 0)
    c_blocks = np.zeros((p, N))
    if keep.size == 0:
        b = float(y.mean())
        return FixedThetaSolution(b, np.zeros(N), theta, np.zeros(p), np.full(N, b), tau0, c_blocks)

    S = np.hstack([blocks.sigma[j] for j in keep])
    pen = linalg.block_diag(*[(tau0 / theta[j]) * blocks.sigma[j] for j in keep])
    St = S.T @ S + N * pen
    St = (St + St.T) / 2.0
    try:
        W = linalg.cho_solve(linalg.cho_factor(St, lower=True, check_finite=False), S.T, check_finite=False)
    except linalg.LinAlgError:
        # repeated visit times make St singular; the fitted values do not depend
        # on which generalized inverse is used, so take the pseudo-inverse
        log.info("stacked system is singular; using its pseudo-inverse")
        W = _psd_pinv_solve(St, S.T)
    A = np.eye(N) - S @ W
    ones = np.ones(N)
    b = float((ones @ A @ y) / (ones @ A @ ones))
    c_hat = W @ (y - b)
    c_blocks[keep] = c_hat.reshape(len(keep), N)
    fitted = b + S @ c_hat
    norms = np.sqrt(blocks.component_norms_sq(c_blocks))
    # shared dual vector recovered from the residual identity r = N tau0 u
    u = (y - fitted) / (N * tau0)
    return FixedThetaSolution(b, u, theta, norms, fitted, tau0, c_blocks)


# ---------------------------------------------------------------------------
# theta step


@dataclass
class ThetaStepResult:
    theta: np.ndarray
    b: float
    mu: float  # multiplier of the budget constraint (squared-loss scale)
    kkt_residual: float
    sweeps: int


def _cd_nonneg(Q, h, lin, theta, tol, max_iter):
    """Cyclic coordinate descent for min theta'Q theta - 2h'theta + lin'theta, theta >= 0."""
    p = len(h)
    diag = np.diag(Q).copy()
    scale = max(1.0, float(np.max(np.abs(h), initial=0.0)), float(np.max(np.abs(lin), initial=0.0)))
    grad = 2.0 * (Q @ theta - h) + lin
    for sweep in range(1, max_iter + 1):
        for j in range(p):
            if diag[j] <= 0.0:
                new = 0.0
            else:
                new = max(0.0, theta[j] - grad[j] / (2.0 * diag[j]))
            delta = new - theta[j]
            if delta != 0.0:
                theta[j] = new
                grad += 2.0 * delta * Q[:, j]
        res = _kkt_violation(theta, grad)
        if res <= tol * scale:
            return theta, sweep, res
        if sweep % 10 == 0:
            theta, grad = _polish(Q, h, lin, theta, grad)
            res = _kkt_violation(theta, grad)
            if res <= tol * scale:
                return theta, sweep, res
    raise ConvergenceError(
        f"coordinate descent did not converge in {max_iter} sweeps (KKT residual {res:.3g})", res
    )


def _kkt_violation(theta, grad):
    active = theta > 0
    r_act = np.max(np.abs(grad[active]), initial=0.0)
    r_ina = np.max(np.maximum(-grad[~active], 0.0), initial=0.0)
    return max(r_act, r_ina)


def _polish(Q, h, lin, theta, grad, max_iter=None):
    """Finish a coordinate-descent iterate with an exact active-set solve.

    Minimizes ``theta'Q theta - 2 r'theta`` with ``r = h - lin / 2`` over
    ``theta >= 0``.  Faces on which ``Q`` is singular are left along a null
    direction (the objective is linear there) until a coordinate hits zero.
    The result replaces the iterate only if its KKT residual is smaller.
    """
    p = len(h)
    r = h - lin / 2.0
    th = np.where(theta > 0, theta, 0.0)
    P = th > 0
    scale = max(1.0, float(np.max(np.abs(r), initial=0.0)))
    max_iter = max_iter or 10 * p + 10
    for _ in range(max_iter):
        # optimize on the current face, dropping coordinates that leave the orthant
        for _ in range(p + 1):
            idx = np.flatnonzero(P)
            if idx.size == 0:
                break
            Qp = Q[np.ix_(idx, idx)]
            rhs = r[idx] - Qp @ th[idx]
            step, *_ = np.linalg.lstsq(Qp, rhs, rcond=None)
            resid = rhs - Qp @ step
            if np.linalg.norm(resid) > 1e-12 * scale * max(1.0, np.linalg.norm(rhs)):
                # rhs has a component in the null space: descend along it
                v = resid
                neg = v < 0
                if not neg.any():
                    break  # unbounded face; cannot happen for bounded problems
                t = np.min(th[idx][neg] / -v[neg])
                new = th[idx] + t * v
            else:
                z = th[idx] + step
                if np.all(z > 0):
                    th[idx] = z
                    break
                bad = z <= 0
                t = np.min(th[idx][bad] / (th[idx][bad] - z[bad]))
                new = th[idx] + t * (z - th[idx])
            hit = idx[np.argmin(new)]
            th[idx] = np.maximum(new, 0.0)
            th[hit] = 0.0
            P = th > 0
        g = 2.0 * (Q @ th - r)
        out = ~P & (g < -1e-14 * scale)
        if not out.any():
            break
        j = int(np.argmin(np.where(out, g, np.inf)))
        P[j] = True
    grad_new = 2.0 * (Q @ th - h) + lin
    if _kkt_violation(th, grad_new) <= _kkt_violation(theta, grad):
        return th, grad_new
    return theta, grad


def solve_theta_step(
    ds,
    g,
    d,
    tau0: float,
    M: float,
    cd_tol: float = 1e-9,
    cd_max_iter: int = 20000,
    bisect_tol: float = 1e-10,
) -> ThetaStepResult:
    """Re-weight components under the budget ``sum(theta) <= M``.

    Minimizes ``||y - sum theta_j g_j - b||^2 + N tau0 sum theta_j d_j`` over
    ``theta >= 0`` and ``b``.  The intercept is profiled out by centering; the
    budget is handled by bisection on its multiplier around a coordinate
    descent inner solver.
    """
    y = _y(ds)
    g = np.atleast_2d(np.asarray(g, dtype=float))
    d = np.asarray(d, dtype=float)
    N = len(y)
    p = g.shape[0]
    if g.shape[1] != N or d.shape != (p,):
        raise ValueError("g must be p x N and d of length p")
    if M < 0:
        raise ValueError("M must be nonnegative")
    if np.any(d < 0):
        raise ValueError("d must be nonnegative")

    yc = y - y.mean()
    gc = g - g.mean(axis=1, keepdims=True)
    Q = gc @ gc.T
    h = gc @ yc
    w = N * tau0 * d
    mu_max = max(0.0, float(np.max(2.0 * h - w, initial=0.0)))

    def inner(mu, start):
        return _cd_nonneg(Q, h, w + mu, start.copy(), cd_tol, cd_max_iter)

    sweeps = 0
    if M == 0:
        theta, mu = np.zeros(p), mu_max
    else:
        theta, k, _ = inner(0.0, np.zeros(p))
        sweeps += k
        mu = 0.0
        if theta.sum() > M + bisect_tol:
            # theta = 0 is optimal at mu_max, so [0, mu_max] brackets the multiplier
            lo, hi = 0.0, mu_max
            th_lo, th_hi = theta, np.zeros(p)
            done = False
            for _ in range(200):
                # once both ends share an active set, the budget is linear in mu there
                exact = _exact_mu(Q, h, w, th_lo, th_hi, M, lo, hi)
                if exact is not None:
                    th_check, k, _ = inner(exact[0], exact[1])
                    sweeps += k
                    if abs(th_check.sum() - M) <= bisect_tol * max(1.0, M):
                        mu, theta, done = exact[0], th_check, True
                        break
                if hi - lo <= bisect_tol * max(1.0, mu_max):
                    break
                mid = 0.5 * (lo + hi)
                th_mid, k, _ = inner(mid, th_lo)
                sweeps += k
                if th_mid.sum() > M:
                    lo, th_lo = mid, th_mid
                else:
                    hi, th_hi = mid, th_mid
            if not done:
                mu = hi
                s_lo, s_hi = th_lo.sum(), th_hi.sum()
                if s_hi >= M - bisect_tol or s_lo <= s_hi:
                    theta = th_hi
                else:
                    # the budget jumps at mu: both ends are optimal there, and so
                    # is the mixture that spends exactly M
                    alpha = (M - s_hi) / (s_lo - s_hi)
                    theta = alpha * th_lo + (1.0 - alpha) * th_hi
    grad = 2.0 * (Q @ theta - h) + w + mu
    res = _kkt_violation(theta, grad)
    b = float(np.mean(y - theta @ g))
    return ThetaStepResult(theta, b, float(mu), float(res), sweeps)


def _exact_mu(Q, h, w, th_lo, th_hi, M, lo, hi):
    act = np.flatnonzero(th_lo > 0)
    if act.size == 0 or not np.array_equal(act, np.flatnonzero(th_hi > 0)):
        return None
    try:
        Qa = Q[np.ix_(act, act)]
        base = np.linalg.solve(Qa, h[act] - w[act] / 2.0)
        slope = np.linalg.solve(Qa, -0.5 * np.ones(act.size))
    except np.linalg.LinAlgError:
        return None
    if slope.sum() == 0:
        return None
    mu = (M - base.sum()) / slope.sum()
    if not (lo <= mu <= hi):
        return None
    theta = np.zeros_like(th_lo)
    theta[act] = base + mu * slope
    if np.any(theta[act] <= 0):
        return None
    return float(mu), theta


# ---------------------------------------------------------------------------
# fitted model and the one-step schedule


@dataclass
class FittedModel:
    b: float
    theta: np.ndarray
    u: np.ndarray
    knot_times: np.ndarray
    knot_x: np.ndarray  # p x N
    kernel: KernelSpec
    covariate_names: tuple[str, ...]
    config: FitConfig
    tau0: float
    M: float
    tau1: float = 0.0
    history: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return len(self.theta)

    @property
    def selected(self) -> list[int]:
        return selected_set(self.theta, self.config.selection_eps)

    @property
    def selected_names(self) -> list[str]:
        return [self.covariate_names[j] for j in self.selected]

    @property
    def beta_coeffs(self) -> np.ndarray:
        theta = np.where(np.isin(np.arange(self.p), self.selected), self.theta, 0.0)
        return theta[:, None] * self.u[None, :]

    def component_norms(self) -> np.ndarray:
        from .kernel import kernel_matrix

        G = kernel_matrix(self.kernel, self.knot_times, self.knot_times)
        a = self.beta_coeffs * self.knot_x
        return np.sqrt(np.maximum(np.einsum("jn,nm,jm->j", a, G, a), 0.0))


def selected_set(theta, rel_eps: float = 1e-8) -> list[int]:
    theta = np.asarray(theta, dtype=float)
    top = float(np.max(theta, initial=0.0))
    if top <= 0:
        return []
    return [int(j) for j in np.flatnonzero(theta > rel_eps * top)]


def degenerate_components(blocks: GramBlocks) -> list[int]:
    return [int(j) for j in np.flatnonzero(~np.any(blocks.x != 0, axis=0))]


def fit_one_step(ds: LongitudinalDataset, config: FitConfig, blocks: GramBlocks | None = None) -> FittedModel:
    """Run the four-step schedule and return the final model.

    ``config.tau0=None`` selects ``tau0`` by GCV at ``theta = 1``.
    ``config.M`` must be set.  Objective values of the weighted form after
    steps 2, 3 and 4 are recorded in ``model.history["objective"]``.
    """
    if config.M is None:
        raise ValueError("fit_one_step needs a budget M; use tuning.cross_validate_M to pick one")
    if blocks is None:
        blocks = build_blocks(config.kernel, ds)
    p, N = blocks.p, blocks.N
    history: dict = {}

    theta1 = np.ones(p)
    dead = degenerate_components(blocks)
    if dead:
        warnings.warn(
            "dropping identically-zero covariates: " + ", ".join(ds.covariate_names[j] for j in dead),
            DegenerateComponentWarning,
            stacklevel=2,
        )
        theta1[dead] = 0.0

    tau0 = config.tau0
    if tau0 is None:
        from .tuning import default_tau0_grid, select_tau0

        trace = select_tau0(ds, blocks, default_tau0_grid(), theta=theta1)
        tau0 = trace.chosen
        history["gcv"] = trace

    step2 = solve_fixed_theta_reduced(ds, blocks, theta1, tau0, config.jitter)
    model = _one_step_from(ds, blocks, config, tau0, config.M, theta1, step2)
    model.history.update(history)
    return model


def _one_step_from(ds, blocks, config, tau0, M, theta1, step2) -> FittedModel:
    """Steps 3 and 4 given the step-2 solution (shared across budgets in CV)."""
    u = step2.u
    g = blocks.fitted_components(u) * (theta1 > 0)[:, None]
    dvec = blocks.component_norms_sq(u) * (theta1 > 0)
    step3 = solve_theta_step(ds, g, dvec, tau0, M, config.cd_tol, config.cd_max_iter, config.bisect_tol)
    theta = step3.theta.copy()
    sel = selected_set(theta, config.selection_eps)
    theta[np.setdiff1d(np.arange(blocks.p), sel)] = 0.0
    step4 = solve_fixed_theta_reduced(ds, blocks, theta, tau0, config.jitter)

    N = blocks.N
    tau1 = step3.mu / N
    obj = [
        objective_aux(ds, blocks, theta1, step2.b, theta1[:, None] * u[None, :], tau0, tau1),
        objective_aux(ds, blocks, step3.theta, step3.b, step3.theta[:, None] * u[None, :], tau0, tau1),
        objective_aux(ds, blocks, theta, step4.b, step4.beta_coeffs, tau0, tau1),
    ]
    return FittedModel(
        b=step4.b,
        theta=theta,
        u=step4.u,
        knot_times=ds.times.copy(),
        knot_x=blocks.x.T.copy(),
        kernel=config.kernel,
        covariate_names=tuple(ds.covariate_names),
        config=config,
        tau0=float(tau0),
        M=float(M),
        tau1=float(tau1),
        history={"objective": obj, "theta_step": step3, "step2": step2, "step4": step4},
    )


def fit_iterated(ds, config: FitConfig, blocks: GramBlocks | None = None, max_iter: int = 50, tol: float = 1e-10):
    """Alternate the theta step and the fixed-theta solve until the weights settle.

    Only used to check the equivalence of the two objectives at convergence.
    """
    model = fit_one_step(ds, config, blocks)
    if blocks is None:
        blocks = build_blocks(config.kernel, ds)
    for _ in range(max_iter):
        theta_old = model.theta
        # the current dual vector plays the role of the step-2 coefficients
        g = blocks.fitted_components(model.u)
        dvec = blocks.component_norms_sq(model.u)
        step = solve_theta_step(ds, g, dvec, model.tau0, model.M, config.cd_tol, config.cd_max_iter, config.bisect_tol)
        new = solve_fixed_theta_reduced(ds, blocks, step.theta, model.tau0, config.jitter)
        model = FittedModel(
            new.b, step.theta, new.u, model.knot_times, model.knot_x, model.kernel,
            model.covariate_names, config, model.tau0, model.M, step.mu / blocks.N,
        )
        if np.max(np.abs(step.theta - theta_old), initial=0.0) <= tol * max(1.0, float(np.max(step.theta, initial=0.0))):
            break
    return model


# ---------------------------------------------------------------------------
# existence-domain diagnostics


def effective_lambda(theta, component_norms, tau0: float) -> float:
    """Primal weight ``lam`` matched to a fixed-weight solution.

    With ``lam**2 = tau0 * sum ||beta_j|| / sum theta_j`` Cauchy-Schwarz gives
    ``lam**2 * sum ||beta_j|| <= tau0 * sum ||beta_j||**2 / theta_j``, so a
    fixed-weight minimizer never has a larger primal objective than the
    intercept-only model.
    """
    theta = np.asarray(theta, dtype=float)
    total = float(theta.sum())
    if total <= 0:
        return 0.0
    return float(np.sqrt(tau0 * np.sum(component_norms) / total))


@dataclass(frozen=True)
class Theorem1Diagnostics:
    rho: float
    c_K: float
    c_x: float
    J_hat: float
    b_bound: float
    in_omega: bool
    penalty: float  # primal weight lam**2 the quantities were normalized by

    def to_dict(self) -> dict:
        return asdict(self)


def theorem1_diagnostics(ds, blocks: GramBlocks, model, lam: float | None = None) -> Theorem1Diagnostics:
    """Bounds of the compact set known to contain a minimizer.

    The bounds hold for unit penalty weight.  A fit at weight ``lam**2`` is
    mapped there by rescaling responses, intercept and curves by
    ``1 / lam**2``; ``lam`` defaults to ``effective_lambda`` of the fit.
    ``model`` may be a ``FittedModel`` or a ``FixedThetaSolution``.
    """
    y = _y(ds)
    norms = np.sqrt(blocks.component_norms_sq(model.beta_coeffs))
    if lam is None:
        lam = effective_lambda(model.theta, norms, model.tau0)
    pen = lam**2 if lam > 0 else 1.0
    ys = y / pen
    rho = float(np.max(ys**2 + np.abs(ys) + 1.0))
    c_K = float(np.sqrt(np.max(np.diag(blocks.G))))
    c_x = float(np.max(np.abs(blocks.x)))
    J = float(norms.sum()) / pen
    b_bound = rho**0.5 + (c_K * c_x + 1.0) * rho
    inside = J <= rho and abs(model.b) / pen <= b_bound
    return Theorem1Diagnostics(rho, c_K, c_x, J, b_bound, bool(inside), float(pen))
