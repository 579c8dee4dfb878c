"""Influence-function algebra for counterfactual density functionals.

Everything here reduces to one map: given an outcome transform h tabulated on
the grid, ``dr_scores`` returns the per-row doubly-robust, exactly centered
scores whose average corrects the plug-in bias of the counterfactual mean of
h. The transforms themselves (projection moment corrections, density-effect
curves, fixed-candidate curves) are tabulated by the companion helpers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EvalGrid, ObservationTable
from .distances import DistanceSpec, clamp_densities, influence_integrand_factor
from .errors import DistanceDomainError
from .models import g_grad_on_grid, g_on_grid
from .nuisance import FoldNuisance


@dataclass
class InfluenceValues:
    """Per-row influence evaluations with their first two moments."""

    values: np.ndarray  # (n, m)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        self.values = v

    @property
    def mean(self):
        return self.values.mean(axis=0)

    @property
    def covariance(self):
        v = self.values
        if v.shape[0] < 2:
            return np.zeros((v.shape[1], v.shape[1]))
        cov = np.cov(v, rowvar=False, ddof=1)
        cov = np.atleast_2d(cov)
        # symmetric PSD up to roundoff by construction
        return 0.5 * (cov + cov.T)


def dr_scores(table: ObservationTable, fold: FoldNuisance, level, h_grid,
              grid: EvalGrid, center="sample"):
    """Doubly-robust scores for the counterfactual mean of an outcome transform h.

    Per evaluation row i the raw summand is
        1(A_i = level)/pi_hat(X_i) * (h(Y_i) - hbar(X_i)) + hbar(X_i)
    with hbar(x) the quadrature of h against eta_hat(.|x). h(Y_i) interpolates
    linearly between grid nodes and outcomes are only ever read on rows at the
    queried level.

    ``center`` picks the subtracted constant: the default "sample" subtracts
    the sample mean of the raw summands, so the output averages to zero
    exactly (the influence-value form used for covariances and diagnostics);
    a numeric value subtracts that instead (0.0 gives the raw doubly-robust
    summands whose mean is the one-step estimate of the counterfactual mean).

    h_grid: (G,) or (G, m); returns (n_ev,) or (n_ev, m).
    """
    h_grid = np.asarray(h_grid, dtype=float)
    if not np.all(np.isfinite(h_grid)):
        raise DistanceDomainError("influence transform is non-finite on the grid")
    squeeze = h_grid.ndim == 1
    if squeeze:
        h_grid = h_grid[:, None]
    idx = fold.eval_idx
    a = table.a[idx]
    pi = fold.pi[level]
    eta = fold.eta[level]                       # (n_ev, G)
    hbar = eta @ (grid.weights[:, None] * h_grid)   # (n_ev, m)
    out = hbar.copy()
    hit = a == level
    if hit.any():
        h_at_y = grid.interp(h_grid, table.y[idx[hit]])  # (n_hit, m)
        out[hit] += (h_at_y - hbar[hit]) / pi[hit][:, None]
    if isinstance(center, str):
        if center != "sample":
            raise ValueError(f"unknown centering {center!r}")
        out -= out.mean(axis=0)
    else:
        out -= np.asarray(center, dtype=float)
    return out[:, 0] if squeeze else out


def moment_correction_curve(distance: DistanceSpec, model, beta, p_a, grid: EvalGrid):
    """Outcome transform whose counterfactual mean corrects the plug-in moment.

    Tabulates dg/dbeta * (f_dp + g f_dpdq)(p_a, g) on the grid; shape (G, p).
    For l2 this is -2 dg/dbeta and for KL it is -dlog g/dbeta, with no p_a
    dependence in either case.
    """
    gv = g_on_grid(model, beta, grid)
    gg = g_grad_on_grid(model, beta, grid)
    fac = influence_integrand_factor(distance, np.asarray(p_a, dtype=float), gv)
    return gg * fac[:, None]


def effect_curves(distance: DistanceSpec, p1, p0, floor=None):
    """The pair of outcome transforms behind the density-effect correction.

    lam1(y) = p0 f_dp(p1, p0);  lam0(y) = f(p1, p0) + p0 f_dq(p1, p0).
    Closed per-kind forms (all algebraically equal to the table composition):
      l2:        lam1 = 2 (p1 - p0) = -lam0
      kl:        lam1 = log(p1/p0) + 1,     lam0 = -p1/p0
      chisq:     lam1 = 2 (p1 - p0)/p0,     lam0 = (p1/p0 - 1)^2 - 2 p1 (p1 - p0)/p0^2
      hellinger: lam1 = 1 - sqrt(p0/p1),    lam0 = 1 - sqrt(p1/p0)
      tv:        lam1 = nu'(p1 - p0)/2 = -lam0
    ``floor`` (optional) clamps both densities below before evaluation.
    """
    p1 = np.asarray(p1, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    if distance.kind == "l2":
        lam1 = 2.0 * (p1 - p0)
        return lam1, -lam1
    if floor is not None:
        p1 = np.maximum(p1, floor)
        p0 = np.maximum(p0, floor)
    if distance.kind == "tv":
        from .distances import abs_smooth_d1

        lam1 = abs_smooth_d1(p1 - p0, distance.tv_t, distance.tv_kind) / 2.0
        return lam1, -lam1
    p1c, p0c = clamp_densities(distance, p1, p0)
    r = p1c / p0c
    if distance.kind == "kl":
        return np.log(r) + 1.0, -r
    if distance.kind == "chisq":
        return 2.0 * (p1c - p0c) / p0c, (r - 1.0) ** 2 - 2.0 * p1c * (p1c - p0c) / p0c**2
    return 1.0 - np.sqrt(1.0 / r), 1.0 - np.sqrt(r)


def fixed_candidate_curve(distance: DistanceSpec, p_a, g, floor=None):
    """Outcome transform for the distance to a fixed, known candidate density.

    g(y) f_dp(p_a(y), g(y)); reduces to 2 (p_a - g) for l2.
    """
    p_a = np.asarray(p_a, dtype=float)
    g = np.asarray(g, dtype=float)
    if distance.kind == "l2":
        return 2.0 * (p_a - g)
    if floor is not None:
        p_a = np.maximum(p_a, floor)
        g = np.maximum(g, floor)
    if distance.kind == "tv":
        from .distances import abs_smooth_d1

        return abs_smooth_d1(p_a - g, distance.tv_t, distance.tv_kind) / 2.0
    pc, gc = clamp_densities(distance, p_a, g)
    if distance.kind == "kl":
        return np.log(pc / gc) + 1.0
    if distance.kind == "chisq":
        return 2.0 * (pc - gc) / gc
    return np.sqrt(gc) * (1.0 / np.sqrt(gc) - 1.0 / np.sqrt(pc))


def pooled_scores(per_fold_values):
    """Stack per-fold score arrays into one InfluenceValues across all rows."""
    return InfluenceValues(np.concatenate([np.atleast_2d(v.T).T for v in per_fold_values], axis=0))
