"""Synthetic cohorts with known coefficient curves.

The default design mirrors a study with scheduled visits at months
0, 6, 12, 18, 24, 36 and a prediction visit at month 48, scaled to [0, 1].
Subjects skip scheduled visits according to a visit-count mix.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

from .datamodel import (
    LongitudinalDataset,
    MissingPolicy,
    apply_missing_policy,
    restrict_waves,
)

SCHEDULE_MONTHS = (0, 6, 12, 18, 24, 36)
HORIZON_MONTHS = 48
DEFAULT_GRID = tuple(m / HORIZON_MONTHS for m in SCHEDULE_MONTHS)
# subjects with <=3, 4, 5, 6 scheduled visits (both arms pooled, n = 172)
COHORT_VISIT_MIX = {3: 12, 4: 22, 5: 48, 6: 90}
# halfway between scheduled visits: level k keeps the first k scheduled waves
WAVE_CUTOFFS = tuple(m / HORIZON_MONTHS for m in (3, 9, 15, 21, 30, 42))


def _curve(name: str) -> Callable[[np.ndarray], np.ndarray]:
    if name == "sin2pi":
        return lambda t: np.sin(2 * np.pi * t)
    if name == "linear":
        return lambda t: np.asarray(t, dtype=float)
    if name == "quadratic":
        return lambda t: (1.0 - np.asarray(t, dtype=float)) ** 2
    if name == "zero":
        return lambda t: np.zeros_like(np.asarray(t, dtype=float))
    if name.startswith("const"):
        c = float(name[5:] or 1.0)
        return lambda t: np.full_like(np.asarray(t, dtype=float), c)
    raise ValueError(f"unknown curve {name!r} (sin2pi, linear, quadratic, constC, zero)")


@dataclass(frozen=True)
class SyntheticScenario:
    n: int = 100
    p: int = 20
    # 1-based covariate index -> curve name
    active: dict = field(
        default_factory=lambda: {1: "sin2pi", 2: "linear", 3: "quadratic", 4: "const0.8"}
    )
    noise_sd: float = 0.5
    intercept: float = 1.0
    schedule: str = "grid"  # grid | uniform
    grid: tuple = DEFAULT_GRID
    visit_mix: str = "cohort"  # cohort | full  (grid schedule only)
    m_min: int = 1
    m_max: int = 6
    horizon: bool = True  # add a visit at t = 1 for every subject
    missing_rate: float = 0.0
    covariate_law: str = "iid"  # iid | smooth
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be positive")
        if not set(self.active) <= set(range(1, self.p + 1)):
            raise ValueError("active indices must lie in 1..p")
        for c in self.active.values():
            _curve(c)
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        if self.schedule not in ("grid", "uniform"):
            raise ValueError("schedule must be 'grid' or 'uniform'")
        if self.visit_mix not in ("cohort", "full"):
            raise ValueError("visit_mix must be 'cohort' or 'full'")
        if any(not 0 <= t <= 1 for t in self.grid):
            raise ValueError("schedule times must lie in [0, 1]")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.covariate_law not in ("iid", "smooth"):
            raise ValueError("covariate_law must be 'iid' or 'smooth'")
        if not 1 <= self.m_min <= self.m_max:
            raise ValueError("need 1 <= m_min <= m_max")


@dataclass(frozen=True)
class GroundTruth:
    intercept: float
    curves: tuple  # curve name per covariate (0-based), "zero" when inactive
    noise_sd: float

    @property
    def active(self) -> set[int]:
        return {j for j, c in enumerate(self.curves) if c != "zero"}

    def beta(self, j: int, t) -> np.ndarray:
        return _curve(self.curves[j])(np.asarray(t, dtype=float))

    def mean_response(self, ds: LongitudinalDataset) -> np.ndarray:
        t, X = ds.times, ds.X
        out = np.full(ds.N, self.intercept)
        for j in sorted(self.active):
            out = out + self.beta(j, t) * X[:, j]
        return out


def _allocate(mix: dict, n: int) -> list[int]:
    """Largest-remainder allocation of ``n`` subjects to visit counts."""
    total = sum(mix.values())
    quotas = {m: n * c / total for m, c in mix.items()}
    counts = {m: int(math.floor(q)) for m, q in quotas.items()}
    rest = n - sum(counts.values())
    for m in sorted(quotas, key=lambda m: (-(quotas[m] - counts[m]), m))[:rest]:
        counts[m] += 1
    return [m for m in sorted(counts) for _ in range(counts[m])]


def _visit_times(sc: SyntheticScenario, rng) -> list[np.ndarray]:
    grid = np.asarray(sc.grid, dtype=float)
    out = []
    if sc.schedule == "grid":
        if sc.visit_mix == "full":
            counts = [len(grid)] * sc.n
        else:
            counts = [int(m) for m in rng.permutation(_allocate(COHORT_VISIT_MIX, sc.n))]
            # the "<= 3 visits" bucket is spread uniformly over 1..3
            counts = [int(rng.integers(1, 4)) if m == 3 else m for m in counts]
        for m in counts:
            idx = np.sort(rng.choice(len(grid), size=min(m, len(grid)), replace=False))
            out.append(grid[idx])
    else:
        for _ in range(sc.n):
            m = int(rng.integers(sc.m_min, sc.m_max + 1))
            t = np.sort(rng.uniform(0.0, 1.0 if not sc.horizon else 0.999, size=m))
            out.append(t)
    if sc.horizon:
        out = [np.append(t, 1.0) for t in out]
    return out


def _covariates(sc: SyntheticScenario, times: np.ndarray, rng) -> np.ndarray:
    m = len(times)
    if sc.covariate_law == "iid":
        return rng.uniform(-1.0, 1.0, size=(m, sc.p))
    level = rng.uniform(-0.8, 0.8, size=sc.p)
    slope = rng.uniform(-0.5, 0.5, size=sc.p)
    wiggle = 0.1 * rng.standard_normal((m, sc.p))
    return level + np.outer(times, slope) + wiggle


def generate(sc: SyntheticScenario, policy: MissingPolicy = MissingPolicy()):
    """Draw a cohort and its ground truth; identical scenarios give identical data."""
    rng = np.random.default_rng(sc.seed)
    schedule = _visit_times(sc, rng)
    width = len(str(sc.n))
    ids, ts, Xs = [], [], []
    for i, t in enumerate(schedule):
        ids += [f"S{i + 1:0{width}d}"] * len(t)
        ts.append(t)
        Xs.append(_covariates(sc, t, rng))
    t = np.concatenate(ts)
    X = np.vstack(Xs)
    curves = tuple(sc.active.get(j + 1, "zero") for j in range(sc.p))
    truth = GroundTruth(sc.intercept, curves, sc.noise_sd)
    mean = np.full(len(t), sc.intercept)
    for j in sorted(truth.active):
        mean = mean + truth.beta(j, t) * X[:, j]
    y = mean + sc.noise_sd * rng.standard_normal(len(t))
    if sc.missing_rate > 0:
        X = np.where(rng.uniform(size=X.shape) < sc.missing_rate, np.nan, X)
    names = [f"x{j + 1}" for j in range(sc.p)]
    ds = LongitudinalDataset.from_arrays(ids, t, y, X, names, float(HORIZON_MONTHS))
    if sc.missing_rate > 0:
        ds = apply_missing_policy(ds, policy)
    return ds, truth


# ---------------------------------------------------------------------------
# scenario files: one "key = value" per line, '#' starts a comment


def _coerce(name, raw, default):
    if name == "active":
        out = {}
        for item in raw.split(","):
            item = item.strip()
            if not item:
                continue
            key, _, curve = item.partition(":")
            key = key.strip().lstrip("x")
            out[int(key)] = curve.strip()
        return out
    if name == "grid":
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_scenario(text: str) -> SyntheticScenario:
    base = SyntheticScenario()
    known = {f.name for f in fields(SyntheticScenario)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"scenario line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"scenario line {lineno}: unknown key {key!r}")
        updates[key] = _coerce(key, raw, getattr(base, key))
    return replace(base, **updates)


def load_scenario(path) -> SyntheticScenario:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def format_scenario(sc: SyntheticScenario) -> str:
    lines = []
    for f in fields(SyntheticScenario):
        v = getattr(sc, f.name)
        if f.name == "active":
            v = ", ".join(f"x{k}:{c}" for k, c in sorted(v.items()))
        elif f.name == "grid":
            v = ", ".join(repr(float(t)) for t in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# growing-waves experiment


@dataclass(frozen=True)
class WavesRow:
    seed: int
    level: int
    cutoff: float
    n_train: int
    N_train: int
    tau0: float
    M: float
    n_selected: int
    rmse: float


def split_halves(ds: LongitudinalDataset, seed: int) -> tuple[list[str], list[str]]:
    ids = sorted(ds.subject_ids)
    perm = np.random.default_rng([seed, 1]).permutation(len(ids))
    half = len(ids) // 2
    return [ids[i] for i in sorted(perm[half:])], [ids[i] for i in sorted(perm[:half])]


def run_wave_level(train_full, holdout, cutoff, config, grid_M, folds, seed, eval_time=1.0, jobs=1):
    """Tune and fit on ``train_full`` truncated at ``cutoff``; score holdout at ``eval_time``."""
    from .kernel import build_blocks
    from .predictor import evaluate_predictions
    from .solver import fit_one_step
    from .tuning import cross_validate_M, make_cv_plan, select_tau0

    train = restrict_waves(train_full, cutoff) if cutoff < 1.0 else train_full
    blocks = build_blocks(config.kernel, train)
    tau0 = config.tau0 if config.tau0 is not None else select_tau0(train, blocks).chosen
    cfg = replace(config, tau0=tau0)
    if cfg.M is None:
        k = min(folds, train.n)
        cv = cross_validate_M(train, cfg, grid_M, make_cv_plan(train, k, seed), jobs=jobs)
        cfg = replace(cfg, M=cv.chosen)
    model = fit_one_step(train, cfg, blocks)
    final = [s.id for s in holdout.subjects if any(v.time == eval_time for v in s.visits)]
    target = _at_time(holdout.subset(final), eval_time) if final else holdout
    metrics = evaluate_predictions(model, target)
    return model, metrics, train


def _at_time(ds, t):
    from .datamodel import Subject

    subjects = tuple(
        Subject(s.id, tuple(v for v in s.visits if v.time == t)) for s in ds.subjects
    )
    return LongitudinalDataset(subjects, ds.covariate_names, ds.time_divisor)


def waves_experiment(
    scenario: SyntheticScenario,
    model_levels=WAVE_CUTOFFS,
    seeds=(0,),
    config=None,
    grid_M=None,
    folds: int = 5,
    eval_time: float = 1.0,
    jobs: int = 1,
) -> list[WavesRow]:
    """Holdout RMSE at ``eval_time`` for nested amounts of longitudinal data.

    For each seed a cohort is drawn, split in two halves by subject, and for
    each cutoff the training half is truncated, tuned, fitted and scored.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .solver import FitConfig

    levels = [float(c) for c in model_levels]
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("cutoffs must be strictly increasing")
    config = config or FitConfig()

    def one_seed(seed):
        ds, _ = generate(replace(scenario, seed=int(seed)))
        tr_ids, ho_ids = split_halves(ds, int(seed))
        train_full, holdout = ds.subset(tr_ids), ds.subset(ho_ids)
        rows = []
        for lvl, cut in enumerate(levels, start=1):
            model, metrics, train = run_wave_level(
                train_full, holdout, cut, config, grid_M, folds, int(seed), eval_time
            )
            rows.append(
                WavesRow(int(seed), lvl, cut, train.n, train.N, model.tau0, model.M,
                         len(model.selected), metrics.rmse)
            )
        return rows

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(one_seed, seeds))
    else:
        per_seed = [one_seed(s) for s in seeds]
    return [r for rows in per_seed for r in rows]


def write_waves_csv(path, rows: list[WavesRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f.name for f in fields(WavesRow)])
        for r in rows:
            w.writerow([repr(getattr(r, f.name)) if isinstance(getattr(r, f.name), float)
                        else getattr(r, f.name) for f in fields(WavesRow)])
