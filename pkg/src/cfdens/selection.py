"""Model selection via pseudo squared-L2 risk and linear aggregation of candidates.

Selection scores each candidate density with an estimable risk that differs
from its true squared-L2 distance to the counterfactual density only by a
candidate-independent constant, so the argmin is unchanged. Aggregation
orthonormalizes the candidate span and runs the closed-form doubly-robust
series fit on a held-out split, then swaps the roles and averages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import EvalGrid, FoldPlan, ObservationTable, make_folds
from .distances import DistanceSpec
from .eif import dr_scores
from .errors import DataError
from .models import ExponentialFamily, clip_to_density
from .nuisance import NuisanceConfig, cross_fit, single_split
from .projection import solve_onestep


@dataclass
class RiskTable:
    labels: list
    risks: np.ndarray
    ses: np.ndarray
    chosen: int
    infeasible: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def chosen_label(self):
        return self.labels[self.chosen]


@dataclass
class AggregateEstimate:
    weights: np.ndarray          # per-candidate linear weights
    density: np.ndarray          # clipped aggregate on the grid
    dropped: list                # candidate indices adding no new direction
    meta: dict


def _pseudo_risk_summands(table, fold, level, g_k, grid):
    const = float(grid.integrate(np.asarray(g_k, dtype=float) ** 2))
    return -2.0 * dr_scores(table, fold, level, g_k, grid, center=0.0) + const


def pseudo_l2_risk(table: ObservationTable, folds_nuis, level, g_k, grid: EvalGrid):
    """Pseudo squared-L2 risk of a candidate density and its standard error.

    Pooled mean of the per-row summand
        -2 [ 1(A=a)/pi_hat {g_k(Y) - int g_k eta_hat} + int g_k eta_hat ]
    plus int g_k^2. Equals the one-step squared-L2 distance up to a term that
    does not involve g_k, so candidate rankings agree between the two.
    """
    g_k = np.asarray(g_k, dtype=float)
    if g_k.shape != grid.points.shape:
        raise DataError("candidate density must be tabulated on the grid")
    summands = np.concatenate(
        [_pseudo_risk_summands(table, fold, level, g_k, grid) for fold in folds_nuis])
    n = len(summands)
    risk = float(summands.mean())
    se = float(summands.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return risk, se


class _CandidateFitter:
    """Fits candidates on one training split, sharing the inner nuisance fit.

    Model candidates of any dimension consume the same per-fold tabulations,
    so the inner cross-fit runs once per training split, not per candidate.
    Fixed densities pass through untouched.
    """

    def __init__(self, train, grid, level, inner_folds, nuis_config, seed):
        self.train = train
        self.grid = grid
        self.level = level
        self.inner_folds = inner_folds
        self.nuis_config = nuis_config
        self.seed = seed
        self._folds_nuis = None

    def _nuisances(self):
        if self._folds_nuis is None:
            plan = make_folds(self.train.n, self.inner_folds, self.seed)
            self._folds_nuis = cross_fit(self.train, plan, (self.level,),
                                         self.grid, self.nuis_config)
        return self._folds_nuis

    def fit(self, cand):
        if isinstance(cand, np.ndarray):
            dens = np.asarray(cand, dtype=float)
            if dens.shape != self.grid.points.shape:
                raise DataError("fixed candidate density must be tabulated on the grid")
            return dens
        distance = (DistanceSpec("kl") if isinstance(cand, ExponentialFamily)
                    else DistanceSpec("l2"))
        est = solve_onestep(distance, cand, self.train, self._nuisances(),
                            self.level, self.grid)
        return est.fitted_density


def select_model(table: ObservationTable, folds: FoldPlan, level, candidates,
                 grid: EvalGrid, nuis_config: NuisanceConfig = NuisanceConfig(),
                 inner_folds: int = 2, labels=None) -> RiskTable:
    """Pick the pseudo-risk argmin over candidate models or fixed densities.

    For every fold role, model candidates are fit on the training folds (with
    their own inner cross-fitting) and clipped to densities, nuisances are
    fit on the same training folds, and the pseudo risk is scored on the
    held-out fold; per-row summands pool across roles. Ties break to the
    earlier (smaller-dimension) candidate. Candidates whose fit fails are
    flagged infeasible and excluded with a warning.
    """
    if len(candidates) < 1:
        raise DataError("need at least one candidate")
    if labels is None:
        labels = [c.label if hasattr(c, "label") else f"fixed[{i}]"
                  for i, c in enumerate(candidates)]
    k = len(candidates)
    summands = [[] for _ in range(k)]
    failed = [False] * k
    warnings = []
    for j, train_idx, eval_idx in folds.splits():
        train = table.rows(train_idx)
        fold = single_split(table, train_idx, eval_idx, (level,), grid, nuis_config)
        fitter = _CandidateFitter(train, grid, level, inner_folds, nuis_config,
                                  seed=folds.seed + 7 * j + 1)
        for i, cand in enumerate(candidates):
            if failed[i]:
                continue
            try:
                dens = fitter.fit(cand)
                summands[i].append(_pseudo_risk_summands(table, fold, level, dens, grid))
            except Exception as exc:  # noqa: BLE001 - candidate failure is data-dependent
                failed[i] = True
                warnings.append(f"candidate {labels[i]} infeasible: {exc}")
    feasible = [i for i in range(k) if not failed[i]]
    if not feasible:
        raise DataError("every candidate failed to fit")
    risks = np.full(k, np.inf)
    ses = np.full(k, np.nan)
    for i in feasible:
        pooled = np.concatenate(summands[i])
        risks[i] = pooled.mean()
        ses[i] = pooled.std(ddof=1) / np.sqrt(len(pooled))
    chosen = min(feasible, key=lambda i: (risks[i], i))
    return RiskTable(labels=list(labels), risks=risks, ses=ses, chosen=int(chosen),
                     infeasible=[labels[i] for i in range(k) if failed[i]],
                     warnings=warnings)


def _gram_schmidt(curves, grid, drop_tol=1e-8):
    """Orthonormalize curves in L2([0,1]) under the grid inner product.

    Returns (ortho (R, G), coef (R, K), dropped) with
    ortho[r] = sum_k coef[r, k] * curves[k].
    """
    kcount = len(curves)
    ortho, coef, dropped = [], [], []
    for k_i, raw in enumerate(curves):
        v = np.asarray(raw, dtype=float).copy()
        c = np.zeros(kcount)
        c[k_i] = 1.0
        for e, ce in zip(ortho, coef):
            proj = float(grid.integrate(v * e))
            v -= proj * e
            c -= proj * ce
        norm = float(np.sqrt(max(grid.integrate(v * v), 0.0)))
        if norm < drop_tol:
            dropped.append(k_i)
            continue
        ortho.append(v / norm)
        coef.append(c / norm)
    if not ortho:
        raise DataError("candidate set spans no direction")
    return np.array(ortho), np.array(coef), dropped


def aggregate_linear(table: ObservationTable, folds: FoldPlan, level, candidates,
                     grid: EvalGrid, nuis_config: NuisanceConfig = NuisanceConfig(),
                     inner_folds: int = 2, swap: bool = True) -> AggregateEstimate:
    """Linear aggregation of candidate densities under squared-L2 distance.

    Per fold role: fit model candidates on the training rows, orthonormalize
    the candidate curves on the grid, run the closed-form doubly-robust
    series fit (zero base density) on the held-out rows, and map the
    coefficients back to candidate weights. Roles average unless ``swap`` is
    off, and the averaged aggregate is clipped to a density. Ratio-based
    divergences are undefined for general linear combinations, so
    aggregation is squared-L2 only.
    """
    roles = list(folds.splits()) if swap else [next(iter(folds.splits()))]
    kcount = len(candidates)
    weight_acc = np.zeros(kcount)
    density_acc = np.zeros(grid.size)
    dropped_all = set()
    for j, train_idx, eval_idx in roles:
        train = table.rows(train_idx)
        fitter = _CandidateFitter(train, grid, level, inner_folds, nuis_config,
                                  seed=folds.seed + 11 * j + 3)
        curves = [fitter.fit(c) for c in candidates]
        ortho, coef, dropped = _gram_schmidt(curves, grid)
        dropped_all.update(dropped)
        fold = single_split(table, train_idx, eval_idx, (level,), grid, nuis_config)
        # closed-form doubly-robust coefficients on the orthonormalized span
        theta = dr_scores(table, fold, level, ortho.T, grid, center=0.0).mean(axis=0)
        weight_acc += theta @ coef
        density_acc += theta @ ortho
    nroles = len(roles)
    density = clip_to_density(density_acc / nroles, grid)
    return AggregateEstimate(
        weights=weight_acc / nroles, density=density, dropped=sorted(dropped_all),
        meta={"roles": nroles, "seed": folds.seed, "n": table.n,
              "level": int(level), "swap": bool(swap)})
