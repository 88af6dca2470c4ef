"""Choice of the smoothing level (GCV) and of the weight budget (k-fold CV)."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .datamodel import LongitudinalDataset
from .kernel import GramBlocks, build_blocks
from .solver import (
    FitConfig,
    _one_step_from,
    degenerate_components,
    solve_fixed_theta_reduced,
)


class GcvDegenerate(ValueError):
    """The smoother reproduces the data (trace of I - H is not positive)."""


def default_tau0_grid() -> np.ndarray:
    return np.logspace(-6, 2, 15)


def default_M_grid(p: int, p_expected: int | None = None) -> np.ndarray:
    if p_expected is None:
        p_expected = min(p, 20)
    return np.arange(0.0, 2 * p_expected + 0.25, 0.5)


class _SpectralSmoother:
    """Reduced-solve hat matrices for many ``tau0`` from one eigendecomposition."""

    def __init__(self, blocks: GramBlocks, theta):
        self.N = blocks.N
        self.lam, self.V = linalg.eigh(blocks.aggregate(theta))
        self.lam = np.maximum(self.lam, 0.0)
        self.V1 = self.V.T @ np.ones(self.N)

    def dual(self, y, tau0):
        """``u = P y`` and ``tr(P)`` where ``I - H = N tau0 P``."""
        w = 1.0 / (self.lam + self.N * tau0)
        Vy = self.V.T @ y
        Kinv_y = w * Vy
        Kinv_1 = w * self.V1
        s11 = self.V1 @ Kinv_1
        b = (self.V1 @ Kinv_y) / s11
        u = self.V @ (Kinv_y - b * Kinv_1)
        trP = w.sum() - (Kinv_1 @ Kinv_1) / s11
        return u, b, trP

    def score(self, y, tau0):
        N = self.N
        u, _, trP = self.dual(y, tau0)
        r = N * tau0 * u
        tr_resid = N * tau0 * trP
        if not tr_resid > 1e-10 * N:
            raise GcvDegenerate(f"tr(I - H) = {tr_resid:.3g} at tau0 = {tau0:.3g}")
        return float((r @ r / N) / (tr_resid / N) ** 2), float(N - tr_resid)

    def fitted(self, y, tau0):
        u, _, _ = self.dual(y, tau0)
        return y - self.N * tau0 * u


def gcv_score(ds, blocks: GramBlocks, theta, tau0: float) -> float:
    """``(1/N)||(I - H) y||^2 / ((1/N) tr(I - H))^2`` for the fixed-weight smoother."""
    y = ds.y if isinstance(ds, LongitudinalDataset) else np.asarray(ds, dtype=float)
    return _SpectralSmoother(blocks, theta).score(y, tau0)[0]


def hat_matrix(ds, blocks: GramBlocks, theta, tau0: float) -> np.ndarray:
    """Explicit ``H`` with ``y_hat = H y`` (intercept included)."""
    sm = _SpectralSmoother(blocks, theta)
    N = blocks.N
    w = 1.0 / (sm.lam + N * tau0)
    Kinv = (sm.V * w) @ sm.V.T
    k1 = Kinv @ np.ones(N)
    P = Kinv - np.outer(k1, k1) / k1.sum()
    return np.eye(N) - N * tau0 * P


def hat_trace_by_solves(ds, blocks: GramBlocks, theta, tau0: float) -> float:
    """``tr(H)`` from N solves against unit responses."""
    N = blocks.N
    tr = 0.0
    for k in range(N):
        e = np.zeros(N)
        e[k] = 1.0
        tr += solve_fixed_theta_reduced(e, blocks, theta, tau0).fitted[k]
    return tr


@dataclass
class GcvTrace:
    grid: np.ndarray
    scores: np.ndarray
    chosen: float
    edf: np.ndarray

    @property
    def chosen_index(self) -> int:
        return int(np.flatnonzero(self.grid == self.chosen)[0])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tau0", "gcv", "edf"])
            for g, s, e in zip(self.grid, self.scores, self.edf):
                w.writerow([repr(float(g)), repr(float(s)), repr(float(e))])


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("grid must be a nonempty 1-d sequence")
    if np.any(grid <= 0):
        raise ValueError("tau0 grid values must be positive")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("tau0 grid must be strictly increasing")
    return grid


def select_tau0(ds, blocks: GramBlocks, grid=None, theta=None) -> GcvTrace:
    """Evaluate GCV at ``theta = 1`` (unless given) across the grid; keep the argmin."""
    grid = _check_grid(default_tau0_grid() if grid is None else grid)
    if theta is None:
        theta = np.ones(blocks.p)
        theta[degenerate_components(blocks)] = 0.0
    y = ds.y if isinstance(ds, LongitudinalDataset) else np.asarray(ds, dtype=float)
    sm = _SpectralSmoother(blocks, theta)
    scores = np.full(grid.size, np.inf)
    edf = np.full(grid.size, np.nan)
    for k, t0 in enumerate(grid):
        try:
            scores[k], edf[k] = sm.score(y, t0)
        except GcvDegenerate:
            pass
    if not np.isfinite(scores).any():
        raise GcvDegenerate("GCV is degenerate at every grid point")
    chosen = float(grid[int(np.argmin(scores))])
    return GcvTrace(grid, scores, chosen, edf)


def oracle_risk_curve(blocks: GramBlocks, y, truth, grid, theta=None) -> np.ndarray:
    """In-sample risk ``(1/N)||y_hat(tau0) - truth||^2`` along the grid."""
    if theta is None:
        theta = np.ones(blocks.p)
    sm = _SpectralSmoother(blocks, theta)
    y = np.asarray(y, dtype=float)
    truth = np.asarray(truth, dtype=float)
    return np.array([np.mean((sm.fitted(y, t0) - truth) ** 2) for t0 in grid])


# ---------------------------------------------------------------------------
# cross-validation of the budget


@dataclass(frozen=True)
class CvPlan:
    k: int
    seed: int
    assignment: dict  # subject id -> fold

    def folds(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.k)]
        for sid in sorted(self.assignment):
            out[self.assignment[sid]].append(sid)
        return out


def make_cv_plan(ds: LongitudinalDataset, k: int = 5, seed: int = 0) -> CvPlan:
    """Subject-level folds with sizes differing by at most one."""
    if k < 2:
        raise ValueError("need at least two folds")
    if k > ds.n:
        raise ValueError(f"cannot split {ds.n} subjects into {k} folds")
    ids = sorted(ds.subject_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    assignment = {ids[i]: int(pos % k) for pos, i in enumerate(order)}
    return CvPlan(k, seed, assignment)


@dataclass
class CvResult:
    grid: np.ndarray
    fold_errors: np.ndarray  # k x len(grid), mean squared error per fold
    fold_sizes: np.ndarray  # held-out visits per fold
    curve: np.ndarray  # pooled held-out MSE
    chosen: float
    tau0: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["M", "cv_mse", *[f"fold{f + 1}" for f in range(len(self.fold_errors))]])
            for i, M in enumerate(self.grid):
                w.writerow([repr(float(M)), repr(float(self.curve[i]))]
                           + [repr(float(e)) for e in self.fold_errors[:, i]])


def _fold_errors(ds, config, tau0, grid_M, held_out):
    from .predictor import predict_dataset

    train_ids = [s for s in ds.subject_ids if s not in held_out]
    train = ds.subset(train_ids)
    test = ds.subset(held_out)
    if test.N == 0 or train.N == 0:
        raise ValueError("fold with zero visits")
    blocks = build_blocks(config.kernel, train)
    theta1 = np.ones(blocks.p)
    theta1[degenerate_components(blocks)] = 0.0
    step2 = solve_fixed_theta_reduced(train, blocks, theta1, tau0, config.jitter)
    errs = np.empty(len(grid_M))
    for i, M in enumerate(grid_M):
        model = _one_step_from(train, blocks, config, tau0, float(M), theta1, step2)
        pred = predict_dataset(model, test)
        errs[i] = np.mean((test.y - pred) ** 2)
    return errs, test.N


def cross_validate_M(
    ds: LongitudinalDataset,
    config: FitConfig,
    grid_M=None,
    plan: CvPlan | None = None,
    jobs: int = 1,
) -> CvResult:
    """Pick the budget minimizing pooled held-out squared error.

    ``tau0`` is held fixed across folds; if the config does not carry one it
    is chosen by GCV on the full data first.  Ties go to the smaller budget.
    """
    grid_M = default_M_grid(ds.p) if grid_M is None else np.asarray(grid_M, dtype=float)
    if grid_M.size == 0 or np.any(grid_M < 0):
        raise ValueError("M grid must be nonempty and nonnegative")
    plan = make_cv_plan(ds, 5) if plan is None else plan
    tau0 = config.tau0
    if tau0 is None:
        tau0 = select_tau0(ds, build_blocks(config.kernel, ds)).chosen
    folds = plan.folds()
    for f in folds:
        if not f:
            raise ValueError("fold with zero visits")

    def run(f):
        return _fold_errors(ds, config, tau0, grid_M, set(f))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, folds))
    else:
        results = [run(f) for f in folds]
    fold_errors = np.array([r[0] for r in results])
    sizes = np.array([r[1] for r in results])
    curve = (fold_errors * sizes[:, None]).sum(axis=0) / sizes.sum()
    chosen = float(grid_M[int(np.argmin(curve))])
    return CvResult(grid_M, fold_errors, sizes, curve, chosen, float(tau0))
