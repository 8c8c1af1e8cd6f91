"""Statistical and economic model evaluation.

Statistical: ROC/AUC and the DeLong paired test on correlated AUCs.
Economic: the expected-maximum-profit measure for credit scoring. A rejected
applicant costs nothing; accepting a defaulter loses the loss fraction
lambda = LGD * EAD / A of the loan amount, and accepting (rejecting) a good
customer earns (forgoes) the ROI. The average classification profit per
borrower at threshold t is

    P(t; lambda) = lambda * pi0 * F0(t) - ROI * pi1 * F1(t)

with pi0/F0 the prior/cumulative score distribution of defaulters and pi1/F1
of non-defaulters. The measure integrates max_t P(t; lambda) over a loss
fraction distribution with point masses p0 at zero and p1 at the maximum
attainable loss (lambda = LGD, a fully drawn card) and a uniform middle. The
maximization is exact: each vertex of the ROC convex hull is optimal on one
lambda interval, delimited by the slope condition on the adjacent segments,
so the integral is a finite sum over hull vertices. `emp_oracle` provides an
independent brute-force check on a lambda grid.

Profit-based feature importance scores a forest feature by the mean profit of
trees that test it minus the mean profit of trees that do not, each tree
classifying the test set with its own hard votes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import kendalltau, norm, rankdata, spearmanr

from .errors import DataError
from .models import ForestModel, ScoredDataset, _tree_leaf_nodes
from .seeding import substream

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# ROC and AUC.
# ---------------------------------------------------------------------------

def roc_points(y: np.ndarray, score: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Empirical ROC as (F1, F0) = (FPR, TPR) per unique threshold, plus (0, 0).

    Classification at threshold t rejects score >= t; tied scores form one
    point. Points run from (0, 0) to (1, 1) as the threshold drops.
    """
    y = np.asarray(y, dtype=bool)
    score = np.asarray(score, dtype=np.float64)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise DataError("ROC needs both classes present")
    order = np.argsort(-score, kind="stable")
    ys = y[order]
    ss = score[order]
    last_of_group = np.flatnonzero(np.diff(ss) != 0)
    ends = np.concatenate([last_of_group, [len(ss) - 1]])
    cum_pos = np.cumsum(ys)
    tpr = cum_pos[ends] / n1
    fpr = (ends + 1 - cum_pos[ends]) / n0
    return np.concatenate([[0.0], fpr]), np.concatenate([[0.0], tpr])


def roc_and_auc(scored: ScoredDataset) -> tuple[tuple[np.ndarray, np.ndarray], float]:
    """ROC curve and trapezoidal AUC (ties grouped, equals the midrank AUC)."""
    fpr, tpr = roc_points(scored.y, scored.score)
    auc = float(np.trapezoid(tpr, fpr))
    return (fpr, tpr), auc


def roc_convex_hull(fpr: np.ndarray, tpr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Upper convex hull of the ROC; vertex slopes strictly decrease."""
    hull: list = []
    for p in zip(fpr, tpr):
        while len(hull) >= 2:
            ox, oy = hull[-2]
            ax, ay = hull[-1]
            cross = (ax - ox) * (p[1] - oy) - (ay - oy) * (p[0] - ox)
            if cross >= 0:  # non-right turn: middle point is on or under the chord
                hull.pop()
            else:
                break
        hull.append(p)
    hx = np.array([p[0] for p in hull])
    hy = np.array([p[1] for p in hull])
    return hx, hy


# ---------------------------------------------------------------------------
# EMP parameters and loan outcomes.
# ---------------------------------------------------------------------------

@dataclass
class EmpParams:
    """Cost model for the profit measure.

    roi: return on a performing loan (the misclassification cost of rejecting
    a good customer). lgd: loss given default; the maximum attainable loss
    fraction, and the upper end of the loss distribution. p0/p1: point masses
    of the loss fraction at zero (full recovery) and at the maximum (fully
    drawn, nothing recovered); the rest is uniform in between. pi0/pi1: class
    priors of defaulters/non-defaulters, taken from the scored data when None.
    Rejecting an applicant itself costs nothing.
    """

    roi: float = 0.05
    lgd: float = 0.8
    p0: float = 0.0
    p1: float = 0.0
    pi0: float | None = None
    pi1: float | None = None

    def __post_init__(self):
        if self.roi <= 0:
            raise DataError("roi must be positive")
        if not 0 < self.lgd <= 1:
            raise DataError("lgd must lie in (0, 1]")
        if self.p0 < 0 or self.p1 < 0 or self.p0 + self.p1 > 1:
            raise DataError("point masses must be non-negative with p0 + p1 <= 1")
        if (self.pi0 is None) != (self.pi1 is None):
            raise DataError("set both priors or neither")
        if self.pi0 is not None and not math.isclose(self.pi0 + self.pi1, 1.0, abs_tol=1e-9):
            raise DataError("class priors must sum to one")

    def priors(self, y: np.ndarray) -> tuple[float, float]:
        if self.pi0 is not None:
            return float(self.pi0), float(self.pi1)
        pi0 = float(np.asarray(y, dtype=bool).mean())
        return pi0, 1.0 - pi0


@dataclass(frozen=True)
class LoanOutcome:
    """Principal and exposure of one test-set loan."""

    principal: float
    ead: float
    is_defaulter: bool
    lgd: float | None = None

    def __post_init__(self):
        if self.principal <= 0:
            raise DataError("loan principal must be positive")
        if not 0 <= self.ead <= self.principal * (1 + 1e-9):
            raise DataError("EAD must lie in [0, principal]")

    def loss_fraction(self, default_lgd: float) -> float:
        lgd = self.lgd if self.lgd is not None else default_lgd
        return lgd * self.ead / self.principal


def estimate_loss_masses(loans: Sequence[LoanOutcome], lgd: float) -> tuple[float, float]:
    """Empirical point masses of the loss fraction among defaulters.

    p0 is the share of defaulters who repaid in full (EAD zero) and p1 the
    share who had drawn the whole principal; between lies the uniform part.
    """
    lam = np.array([ln.loss_fraction(lgd) for ln in loans if ln.is_defaulter])
    if len(lam) == 0:
        raise DataError("no defaulters to estimate the loss distribution from")
    p0 = float(np.mean(lam <= 1e-12))
    p1 = float(np.mean(lam >= lgd * (1 - 1e-9)))
    if p0 + p1 > 1:
        p1 = 1.0 - p0
    return p0, p1


@dataclass
class EmpReport:
    emp: float
    emp_fraction: float
    implied_cutoff: float
    model_profit: float
    no_model_profit: float


# ---------------------------------------------------------------------------
# EMP: exact hull walk and the brute-force oracle.
# ---------------------------------------------------------------------------

def _hull_geometry(scored: ScoredDataset, params: EmpParams):
    pi0, pi1 = params.priors(scored.y)
    fpr, tpr = roc_points(scored.y, scored.score)
    hx, hy = roc_convex_hull(fpr, tpr)
    dx = np.diff(hx)
    dy = np.diff(hy)
    with np.errstate(divide="ignore"):
        boundaries = np.where(dy > 0, params.roi * pi1 * dx / (pi0 * dy), np.inf)
    return pi0, pi1, hx, hy, boundaries


def emp(scored: ScoredDataset, params: EmpParams) -> tuple[float, float]:
    """Expected maximum profit per borrower and the optimal rejected fraction.

    Vertex k of the ROC hull maximizes P(.; lambda) exactly while lambda lies
    between the slope-condition boundaries of its adjacent segments, so the
    uniform part integrates in closed form per vertex and the point masses are
    read off the optimal vertex at lambda = 0 and lambda = lgd. Profit ties
    resolve toward the larger rejected fraction (the limit from above), which
    makes a vertical first hull segment reject all defaulters already at
    lambda -> 0+.
    """
    pi0, pi1, hx, hy, bounds = _hull_geometry(scored, params)
    lam_max = params.lgd
    uniform_mass = 1.0 - params.p0 - params.p1
    density = uniform_mass / lam_max

    emp_value = 0.0
    eta_value = 0.0
    if uniform_mass > 0:
        lo = np.clip(np.concatenate([[0.0], bounds]), 0.0, lam_max)
        hi = np.clip(np.concatenate([bounds, [np.inf]]), 0.0, lam_max)
        width = np.maximum(hi - lo, 0.0)
        emp_value += float(
            np.sum(density * (pi0 * hy * (hi * hi - lo * lo) / 2 - params.roi * pi1 * hx * width))
        )
        eta_value += float(np.sum(density * (pi0 * hy + pi1 * hx) * width))

    k0 = int(np.searchsorted(bounds, 0.0, side="right"))
    k1 = int(np.searchsorted(bounds, lam_max, side="right"))
    if params.p0 > 0:
        # at lambda = 0 the best profit is 0, attained with x = 0
        eta_value += params.p0 * (pi0 * hy[k0] + pi1 * hx[k0])
    if params.p1 > 0:
        emp_value += params.p1 * (lam_max * pi0 * hy[k1] - params.roi * pi1 * hx[k1])
        eta_value += params.p1 * (pi0 * hy[k1] + pi1 * hx[k1])
    return emp_value, eta_value


def emp_oracle(scored: ScoredDataset, params: EmpParams, grid_size: int = 10_000) -> float:
    """Brute-force EMP: scan every empirical threshold on a lambda grid.

    Midpoint quadrature over the uniform part plus exact point masses;
    independent of the hull walk. Deterministic, monotone in grid size.
    """
    if grid_size < 1_000:
        raise DataError("grid_size must be at least 1000")
    pi0, pi1 = params.priors(scored.y)
    fpr, tpr = roc_points(scored.y, scored.score)
    lam_max = params.lgd
    reward = pi0 * tpr
    cost = params.roi * pi1 * fpr
    total = 0.0
    uniform_mass = 1.0 - params.p0 - params.p1
    if uniform_mass > 0:
        acc = 0.0
        grid = (np.arange(grid_size) + 0.5) * (lam_max / grid_size)
        chunk = 2048
        for start in range(0, grid_size, chunk):
            lam = grid[start:start + chunk, None]
            acc += float(np.max(lam * reward[None, :] - cost[None, :], axis=1).sum())
        total += uniform_mass * acc / grid_size
    if params.p1 > 0:
        total += params.p1 * float(np.max(lam_max * reward - cost))
    if params.p0 > 0:
        total += params.p0 * float(np.max(-cost))
    return total


def fraction_to_cutoff(scores: np.ndarray, fraction: float) -> float:
    """Score cutoff whose achievable rejection share is closest to `fraction`.

    Instances scoring at the cutoff count as rejected. Ties between achievable
    shares resolve toward rejecting fewer; a zero fraction returns +inf so that
    nobody is rejected.
    """
    if not 0 <= fraction <= 1:
        raise DataError("fraction must lie in [0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n == 0:
        raise DataError("no scores to threshold")
    ordered = np.sort(scores)
    uniq = np.unique(ordered)[::-1]  # descending: increasing rejection counts
    counts = n - np.searchsorted(ordered, uniq, side="left")
    cand_cuts = np.concatenate([[np.inf], uniq])
    cand_counts = np.concatenate([[0], counts])
    best = int(np.argmin(np.abs(cand_counts / n - fraction)))
    return float(cand_cuts[best])


# ---------------------------------------------------------------------------
# Model profit per the accept/reject outcome table.
# ---------------------------------------------------------------------------

def profit_from_rejections(
    y: np.ndarray,
    reject: np.ndarray,
    loans: Sequence[LoanOutcome],
    params: EmpParams,
) -> float:
    """Total profit: accepted good +ROI*A, rejected good -ROI*A,
    accepted defaulter -LGD*EAD, rejected defaulter 0."""
    y = np.asarray(y, dtype=bool)
    reject = np.asarray(reject, dtype=bool)
    if len(loans) != len(y) or len(reject) != len(y):
        raise DataError("loans, labels and decisions must align")
    terms = []
    for yi, ri, loan in zip(y, reject, loans):
        if bool(yi) != loan.is_defaulter:
            raise DataError("loan outcome labels disagree with the scored labels")
        lgd = loan.lgd if loan.lgd is not None else params.lgd
        if yi:
            terms.append(0.0 if ri else -lgd * loan.ead)
        else:
            terms.append(-params.roi * loan.principal if ri else params.roi * loan.principal)
    return math.fsum(terms)


def model_profit(
    scored: ScoredDataset,
    loans: Sequence[LoanOutcome],
    params: EmpParams,
    cutoff: float,
) -> float:
    """Aggregate profit of accepting everyone scoring below `cutoff`."""
    return profit_from_rejections(scored.y, scored.score >= cutoff, loans, params)


def evaluate_economics(
    scored: ScoredDataset,
    loans: Sequence[LoanOutcome],
    params: EmpParams,
) -> EmpReport:
    """EMP, its rejected fraction, the implied test-set cutoff and the profits."""
    emp_value, fraction = emp(scored, params)
    cutoff = fraction_to_cutoff(scored.score, fraction)
    return EmpReport(
        emp=emp_value,
        emp_fraction=fraction,
        implied_cutoff=cutoff,
        model_profit=model_profit(scored, loans, params, cutoff),
        no_model_profit=model_profit(scored, loans, params, np.inf),
    )


# ---------------------------------------------------------------------------
# Feature importance: profit-based and accuracy-based.
# ---------------------------------------------------------------------------

def _ranked(names: Sequence[str], values: np.ndarray) -> list:
    """Descending by value, undefined (NaN) entries last; ties by name."""
    order = sorted(
        range(len(names)),
        key=lambda j: (np.isnan(values[j]), -(values[j] if not np.isnan(values[j]) else 0.0), names[j]),
    )
    return [(names[j], float(values[j])) for j in order]


def profit_feature_importance(
    forest: ForestModel,
    scored: ScoredDataset,
    loans: Sequence[LoanOutcome],
    params: EmpParams,
    feature_names: Sequence[str],
    cutoff: float = 0.5,
) -> list:
    """Mean decrease in profit per feature, ranked descending.

    Each tree classifies the test set with its own hard votes (vote >= cutoff
    rejects) and earns a profit from the outcome table; a feature scores the
    mean profit of trees whose internal nodes test it minus the mean profit of
    the remaining trees. Features in every tree or in none have no such
    contrast and get a NaN sentinel, ranked last.
    """
    if scored.per_tree_votes is None:
        raise DataError("per-tree votes are required for profit importance")
    votes = scored.per_tree_votes
    if votes.shape[0] != forest.n_trees:
        raise DataError("votes do not match the forest")
    profits = np.array([
        profit_from_rejections(scored.y, votes[i] >= cutoff, loans, params)
        for i in range(forest.n_trees)
    ])
    member = forest.feature_membership(len(feature_names))
    n_in = member.sum(axis=0)
    importance = np.full(len(feature_names), np.nan)
    usable = (n_in > 0) & (n_in < forest.n_trees)
    if usable.any():
        total = profits.sum()
        sum_in = member[:, usable].T @ profits
        mean_in = sum_in / n_in[usable]
        mean_out = (total - sum_in) / (forest.n_trees - n_in[usable])
        importance[usable] = mean_in - mean_out
    return _ranked(feature_names, importance)


def accuracy_feature_importance(
    forest: ForestModel,
    X: np.ndarray,
    y: np.ndarray,
    feature_names: Sequence[str],
    seed: int = 0,
    n_repeats: int = 1,
) -> dict:
    """Mean decrease in accuracy, two readings of the leave-out idea.

    "permutation" (the default ranking): accuracy drop of the forest when the
    feature's test column is shuffled (averaged over `n_repeats` shuffles);
    only trees that test the feature are re-evaluated. "membership": the
    tree-profit construction applied to per-tree accuracy. A feature tested
    by no tree scores exactly zero.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=bool)
    n = len(y)
    n_feat = len(feature_names)
    member = forest.feature_membership(n_feat)

    probs = np.empty((forest.n_trees, n), dtype=np.float64)
    tree_acc = np.empty(forest.n_trees)
    for i, tree in enumerate(forest.trees):
        leaves = _tree_leaf_nodes(tree, X)
        probs[i] = tree.prob[leaves]
        tree_acc[i] = np.mean((tree.vote[leaves] == 1) == y)
    base_score = probs.mean(axis=0)
    base_acc = float(np.mean((base_score >= 0.5) == y))

    perm = np.zeros(n_feat)
    for j in range(n_feat):
        trees_with = np.flatnonzero(member[:, j])
        if trees_with.size == 0:
            continue  # untested feature: permuting it cannot move any split
        rng = substream(seed, "perm", j)
        drops = []
        for _ in range(n_repeats):
            Xp = X.copy()
            Xp[:, j] = Xp[rng.permutation(n), j]
            delta = np.zeros(n)
            for i in trees_with:
                delta += forest.trees[i].prob[_tree_leaf_nodes(forest.trees[i], Xp)] - probs[i]
            new_score = base_score + delta / forest.n_trees
            drops.append(base_acc - float(np.mean((new_score >= 0.5) == y)))
        perm[j] = float(np.mean(drops))

    n_in = member.sum(axis=0)
    membership = np.full(n_feat, np.nan)
    usable = (n_in > 0) & (n_in < forest.n_trees)
    if usable.any():
        total = tree_acc.sum()
        sum_in = member[:, usable].T @ tree_acc
        membership[usable] = sum_in / n_in[usable] - (total - sum_in) / (forest.n_trees - n_in[usable])

    return {
        "permutation": _ranked(feature_names, perm),
        "membership": _ranked(feature_names, membership),
    }


# ---------------------------------------------------------------------------
# DeLong paired AUC comparison.
# ---------------------------------------------------------------------------

@dataclass
class DelongResult:
    auc_a: float
    auc_b: float
    auc_diff: float
    variance: float
    z: float
    p_value: float


def _delong_components(score: np.ndarray, y: np.ndarray):
    pos = score[y]
    neg = score[~y]
    m, nn = len(pos), len(neg)
    tz = rankdata(np.concatenate([pos, neg]))
    tx = rankdata(pos)
    ty = rankdata(neg)
    v10 = (tz[:m] - tx) / nn            # per defaulter
    v01 = 1.0 - (tz[m:] - ty) / m       # per non-defaulter
    auc = float(v10.mean())
    return auc, v10, v01


def delong_test(scores_a: np.ndarray, scores_b: np.ndarray, y: np.ndarray) -> DelongResult:
    """Two-sided DeLong test for the difference of two correlated AUCs.

    Uses the structural-components covariance estimate (sample covariance of
    the per-positive and per-negative placement values). Degenerate variance,
    as with identical score vectors, reports z = 0 and p = 1.
    """
    y = np.asarray(y, dtype=bool)
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    if scores_a.shape != y.shape or scores_b.shape != y.shape:
        raise DataError("paired scores must align with the labels")
    m = int(y.sum())
    nn = len(y) - m
    if m == 0 or nn == 0:
        raise DataError("DeLong test needs both classes")
    auc_a, v10_a, v01_a = _delong_components(scores_a, y)
    auc_b, v10_b, v01_b = _delong_components(scores_b, y)
    s10 = np.cov(np.stack([v10_a, v10_b]), ddof=1)
    s01 = np.cov(np.stack([v01_a, v01_b]), ddof=1)
    s = s10 / m + s01 / nn
    variance = float(s[0, 0] + s[1, 1] - 2 * s[0, 1])
    diff = auc_a - auc_b
    if variance <= 1e-16:
        return DelongResult(auc_a, auc_b, diff, max(variance, 0.0), 0.0, 1.0)
    z = diff / math.sqrt(variance)
    p = float(2 * norm.sf(abs(z)))
    return DelongResult(auc_a, auc_b, diff, variance, z, p)


# ---------------------------------------------------------------------------
# Rank correlations between two importance rankings.
# ---------------------------------------------------------------------------

@dataclass
class RankCorrelations:
    spearman: float
    kendall: float
    goodman_kruskal: float


def rank_correlations(ranking_a: Sequence[float], ranking_b: Sequence[float]) -> RankCorrelations:
    """Spearman rho, Kendall tau-b and Goodman-Kruskal gamma of paired scores."""
    a = np.asarray(ranking_a, dtype=np.float64)
    b = np.asarray(ranking_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError("rankings must be one-dimensional and aligned")
    if len(a) < 2:
        raise DataError("need at least two items to correlate")
    rho = float(spearmanr(a, b).statistic)
    tau = float(kendalltau(a, b).statistic)
    da = np.sign(a[:, None] - a[None, :])
    db = np.sign(b[:, None] - b[None, :])
    upper = np.triu_indices(len(a), k=1)
    prod = da[upper] * db[upper]
    concordant = int(np.sum(prod > 0))
    discordant = int(np.sum(prod < 0))
    if concordant + discordant == 0:
        gamma = float("nan")
    else:
        gamma = (concordant - discordant) / (concordant + discordant)
    return RankCorrelations(spearman=rho, kendall=tau, goodman_kruskal=float(gamma))
