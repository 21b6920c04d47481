"""
Estimation of complier treatment effects from multiple binary instruments.

Every estimand is a ratio lambda'b_Y / lambda'b_D where b_V are the
(possibly ridge-penalized) slopes of V on the intercept-augmented product
regressors Gamma. The intercept is never penalized, so the ratio is exactly
equivariant to affine changes of the outcome. The denominator is the
complier share.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.optimize import minimize_scalar

from . import config
from .combinatorics import all_subsets, format_subset, mask_of, members
from .design import Dataset, InstrumentDesign, build_gamma, cell_index
from .errors import InputError, SingularDesignError, VmivError, WeakIdentificationError

log = logging.getLogger(__name__)

KINDS = ("acl", "slate", "slatt", "slatu", "pte", "custom")


# =========================
# TYPES
# =========================
@dataclass(frozen=True)
class EstimandSpec:
    kind: str = "acl"
    target: Tuple[int, ...] = ()
    instrument: Optional[int] = None
    context: Tuple[Tuple[int, int], ...] = ()
    weights: Tuple[float, ...] = ()
    regularization: str = "none"
    alpha: float = 0.0
    variance: str = "sandwich"
    bootstrap_reps: int = 0
    seed: int = 0

    def label(self) -> str:
        if self.kind in ("slate", "slatt", "slatu"):
            return f"{self.kind}:{','.join(str(j) for j in self.target)}"
        if self.kind == "pte":
            ctx = ",".join(f"z{k}={v}" for k, v in self.context)
            return f"pte:{self.instrument}@{ctx}" if ctx else f"pte:{self.instrument}"
        if self.kind == "custom":
            return "custom:" + ",".join(repr(float(w)) for w in self.weights)
        return self.kind

    def regularization_label(self) -> str:
        if self.regularization == "fixed":
            return f"alpha={self.alpha!r}"
        return self.regularization

    def variance_label(self) -> str:
        if self.variance == "bootstrap":
            return f"bootstrap:{self.bootstrap_reps}"
        return self.variance

    def validate(self, design: InstrumentDesign) -> None:
        J = design.J
        if self.kind not in KINDS:
            raise InputError(f"unknown estimand {self.kind!r}")
        if self.kind in ("slate", "slatt", "slatu"):
            if not self.target:
                raise InputError(f"{self.kind} needs a nonempty instrument set")
            bad = [j for j in self.target if not 1 <= j <= J]
            if bad:
                raise InputError(f"{self.label()} references instruments {bad} outside 1..{J}")
        if self.kind == "pte":
            if self.instrument is None or not 1 <= self.instrument <= J:
                raise InputError(f"{self.label()} references an instrument outside 1..{J}")
            others = [k for k in range(1, J + 1) if k != self.instrument]
            given = sorted(k for k, _ in self.context)
            if given != others:
                raise InputError(f"{self.label()} must set every other instrument {others}")
            if any(v not in (0, 1) for _, v in self.context):
                raise InputError(f"{self.label()} context values must be 0 or 1")
        if self.kind == "custom" and len(self.weights) != design.size:
            raise InputError(f"custom weights need {design.size} entries, got {len(self.weights)}")
        if self.regularization not in ("none", "fixed", "auto"):
            raise InputError(f"unknown regularization {self.regularization!r}")
        if self.regularization == "fixed" and not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise InputError("regularization alpha must be a nonnegative number")
        if self.variance not in ("none", "sandwich", "bootstrap"):
            raise InputError(f"unknown variance option {self.variance!r}")
        if self.variance == "bootstrap" and self.bootstrap_reps < 100:
            raise InputError("bootstrap needs at least 100 replications")

    def to_dict(self) -> dict:
        return {
            "estimand": self.label(),
            "regularize": self.regularization_label(),
            "se": self.variance_label(),
            "seed": self.seed,
        }


@dataclass
class EstimateResult:
    estimand: str
    point: float
    se: Optional[float]
    complier_share: float
    alpha: float
    n: int
    numerator: float = float("nan")
    ci95: Optional[Tuple[float, float]] = None
    h_mean: Optional[float] = None
    h_sd: Optional[float] = None
    warnings: List[str] = field(default_factory=list)
    diagnostics: Dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "point": self.point,
            "se": self.se,
            "ci95": None if self.ci95 is None else list(self.ci95),
            "complier_share": self.complier_share,
            "alpha": self.alpha,
            "n": self.n,
            "warnings": list(self.warnings),
            "diagnostics": dict(self.diagnostics),
        }


# =========================
# LAMBDA
# =========================
def lambda_contributions(spec: EstimandSpec, Z, family: Sequence[int]) -> np.ndarray:
    """Per-observation terms whose column means are the weights lambda-hat.

    For the set-LATE family the term for S is 1(S meets the target set) times
    an instrument product; partial and custom weights are constants.
    """
    Z = np.asarray(Z, dtype=np.int64)
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1)
    n, J = Z.shape
    cells = cell_index(Z)
    cols = []

    if spec.kind == "acl":
        return np.ones((n, len(family)))

    if spec.kind in ("slate", "slatt", "slatu"):
        jm = mask_of(spec.target)
        if jm >> J:
            raise InputError(f"{spec.label()} references instruments outside 1..{J}")
        for S in family:
            if not S & jm:
                cols.append(np.zeros(n))
                continue
            rest = S & ~jm
            on_rest = (cells & rest) == rest
            if spec.kind == "slate":
                cols.append(on_rest.astype(float))
            elif spec.kind == "slatt":
                cols.append(((cells & S) == S).astype(float))
            else:
                hit = S & jm
                cols.append((on_rest & ((cells & hit) != hit)).astype(float))
        return np.column_stack(cols)

    if spec.kind == "pte":
        if spec.instrument is None or not 1 <= spec.instrument <= J:
            raise InputError(f"{spec.label()} references an instrument outside 1..{J}")
        target = mask_of(k for k, v in spec.context if v) | (1 << (spec.instrument - 1))
        lam = np.array([1.0 if S == target else 0.0 for S in family])
        if not lam.any():
            raise InputError(f"{spec.label()} needs {format_subset(target)} in the instrument family")
        return np.tile(lam, (n, 1))

    if spec.kind == "custom":
        lam = np.asarray(spec.weights, dtype=float)
        if lam.shape != (len(family),) or not np.all(np.isfinite(lam)):
            raise InputError(f"custom weights need {len(family)} finite entries")
        return np.tile(lam, (n, 1))

    raise InputError(f"unknown estimand {spec.kind!r}")


def lambda_for(spec: EstimandSpec, Z, family: Sequence[int]) -> np.ndarray:
    return lambda_contributions(spec, Z, family).mean(axis=0)


# =========================
# POINT ESTIMATES
# =========================
def _centered(G: np.ndarray) -> np.ndarray:
    return G - G.mean(axis=0)


def _coefficients(G: np.ndarray, V: np.ndarray, alpha: float) -> np.ndarray:
    """Ridge slopes of the columns of V on [1, G]; penalty alpha on the slopes only."""
    Gc = _centered(G)
    Vc = V - V.mean(axis=0)
    k = Gc.shape[1]
    if alpha > 0:
        Gc = np.vstack([Gc, np.sqrt(alpha) * np.eye(k)])
        Vc = np.vstack([Vc, np.zeros((k, Vc.shape[1]))])
    coef, _, rank, _ = linalg.lstsq(Gc, Vc)
    if rank < k:
        raise SingularDesignError(
            f"product regressors are rank deficient ({rank + 1} < {k + 1}); "
            "use a reduced family or a positive regularization"
        )
    return coef


def estimate_theta(Y, D, G, lam, alpha: float = 0.0) -> Tuple[float, float]:
    """Numerator and denominator of the ratio estimator."""
    G = np.asarray(G, dtype=float)
    lam = np.asarray(lam, dtype=float)
    coef = _coefficients(G, np.column_stack([Y, D]), alpha)
    theta_y, theta_d = lam @ coef
    return float(theta_y), float(theta_d)


def limit_rho(Y, D, G, lam) -> float:
    """Limit of the ratio estimator as alpha grows without bound."""
    w = _centered(np.asarray(G, dtype=float)) @ np.asarray(lam, dtype=float)
    return float((w @ Y) / (w @ D))


def share_standard_error(D, G, contrib, alpha: float = 0.0) -> float:
    """Standard error of the complier share lambda'b_D(alpha).

    Linearizes b_D(alpha) = sum_i w_i D_i at the alpha used, with Var(D|Z)
    taken from the saturated residuals, plus the sampling noise of lambda.
    """
    D = np.asarray(D, dtype=float)
    G = np.asarray(G, dtype=float)
    contrib = np.asarray(contrib, dtype=float)
    n, k = G.shape
    lam = contrib.mean(axis=0)
    Gc = _centered(G)
    M = Gc.T @ Gc + alpha * np.eye(k)
    try:
        w = Gc @ linalg.solve(M, lam, assume_a="sym")
    except linalg.LinAlgError as exc:
        raise SingularDesignError("product regressors are rank deficient at this alpha") from exc
    b = _coefficients(G, D.reshape(-1, 1), alpha)[:, 0]
    try:
        b0 = _coefficients(G, D.reshape(-1, 1), 0.0)[:, 0]
    except SingularDesignError:
        b0 = b
    e = D - D.mean() - Gc @ b0
    infl = n * w * e + (contrib - lam) @ b
    return float(np.sqrt(np.sum(infl ** 2)) / n)


def check_weak_identification(share: float, t_stat: Optional[float] = None) -> None:
    if not np.isfinite(share) or abs(share) < config.WEAK_SHARE_FLOOR:
        raise WeakIdentificationError(share, t_stat)
    if t_stat is not None and abs(t_stat) < config.WEAK_T_FLOOR:
        raise WeakIdentificationError(share, t_stat)


def estimate_h(G, lam) -> np.ndarray:
    """h_i = lambda' Sigma^-1 (Gamma_i - mean Gamma), Sigma the 1/n sample covariance."""
    G = np.asarray(G, dtype=float)
    lam = np.asarray(lam, dtype=float)
    n, k = G.shape
    Gc = G - G.mean(axis=0)
    if np.linalg.matrix_rank(Gc) < k:
        raise SingularDesignError("sample covariance of the product regressors is singular")
    sigma = Gc.T @ Gc / n
    w = linalg.solve(sigma, lam, assume_a="sym")
    return Gc @ w


def estimate_rho(Y, D, G, lam, alpha: float = 0.0, estimand: str = "custom") -> EstimateResult:
    Y = np.asarray(Y, dtype=float)
    D = np.asarray(D, dtype=float)
    G = np.asarray(G, dtype=float)
    if alpha < 0:
        raise InputError("regularization alpha must be nonnegative")
    theta_y, theta_d = estimate_theta(Y, D, G, lam, alpha)
    check_weak_identification(theta_d)

    h_mean = h_sd = None
    try:
        h = estimate_h(G, lam)
        h_mean, h_sd = float(h.mean()), float(h.std())
    except SingularDesignError:
        if alpha == 0:
            raise

    return EstimateResult(
        estimand=estimand,
        point=theta_y / theta_d,
        se=None,
        complier_share=theta_d,
        alpha=float(alpha),
        n=int(Y.shape[0]),
        numerator=theta_y,
        h_mean=h_mean,
        h_sd=h_sd,
    )


def wald_acl(Y, D, Z) -> EstimateResult:
    """Two-cell Wald ratio between all instruments on and all off."""
    Y = np.asarray(Y, dtype=float)
    D = np.asarray(D, dtype=float)
    Z = np.asarray(Z, dtype=np.int64)
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1)
    cells = cell_index(Z)
    top = cells == (1 << Z.shape[1]) - 1
    bottom = cells == 0
    if not top.any() or not bottom.any():
        raise InputError("Wald ratio needs observations with all instruments on and all off")
    den = D[top].mean() - D[bottom].mean()
    check_weak_identification(den)
    num = Y[top].mean() - Y[bottom].mean()
    return EstimateResult(
        estimand="acl",
        point=float(num / den),
        se=None,
        complier_share=float(den),
        alpha=0.0,
        n=int(Y.shape[0]),
        numerator=float(num),
        diagnostics={"equivalent_to": "acl at alpha=0 with the full family"},
    )


# =========================
# REGULARIZATION
# =========================
@dataclass
class AlphaSelection:
    alpha: float
    grid: np.ndarray
    values: np.ndarray
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "grid_points": int(self.grid.shape[0]), "warnings": list(self.warnings)}


def _mse_curve(Y, D, G, lam) -> Optional[Callable[[float], float]]:
    Gc = _centered(G)
    n = Gc.shape[0]
    coef = _coefficients(G, np.column_stack([Y, D]), 0.0)
    by, bd = coef[:, 0], coef[:, 1]
    rho0 = (lam @ by) / (lam @ bd)
    e = (Y - Y.mean() - Gc @ by) - rho0 * (D - D.mean() - Gc @ bd)
    pi = (Gc * (e ** 2)[:, None]).T @ Gc / n
    if np.max(np.abs(e), initial=0.0) <= 1e-10 * (1.0 + np.max(np.abs(Y))):
        return None
    beta = by - rho0 * bd
    evals, Q = linalg.eigh(Gc.T @ Gc)
    ql = Q.T @ lam

    def curve(alpha: float) -> float:
        v = Q @ (ql / (evals + alpha))
        return float(n * v @ pi @ v + alpha ** 2 * (beta @ v) ** 2)

    return curve


def select_alpha_mse(Y, D, G, lam) -> AlphaSelection:
    """Smallest positive local minimizer of the estimated conditional MSE.

    One step: residuals and coefficients come from the alpha=0 fit.
    """
    Y = np.asarray(Y, dtype=float)
    D = np.asarray(D, dtype=float)
    G = np.asarray(G, dtype=float)
    lam = np.asarray(lam, dtype=float)

    scale = float(np.sum(_centered(G) ** 2)) / G.shape[1]
    lo, hi = config.ALPHA_GRID_SPAN
    grid = np.concatenate([[0.0], scale * np.logspace(np.log10(lo), np.log10(hi), config.ALPHA_GRID_POINTS)])

    curve = _mse_curve(Y, D, G, lam)
    if curve is None:
        return AlphaSelection(0.0, grid, np.zeros_like(grid), ["ALPHA_ZERO_RESIDUALS"])

    values = np.array([curve(a) for a in grid])
    idx = None
    for i in range(1, grid.shape[0] - 1):
        if values[i] < values[i - 1] and values[i] <= values[i + 1]:
            idx = i
            break
    if idx is None:
        log.warning("ALPHA_NO_INTERIOR_MIN: estimated MSE has no interior local minimum; using alpha=0")
        return AlphaSelection(0.0, grid, values, ["ALPHA_NO_INTERIOR_MIN"])

    step = np.log(grid[2]) - np.log(grid[1])
    left = np.log(grid[idx - 1]) if idx > 1 else np.log(grid[1]) - step
    bracket = (left, np.log(grid[idx]), np.log(grid[idx + 1]))
    alpha = float(grid[idx])
    try:
        res = minimize_scalar(
            lambda la: curve(float(np.exp(la))),
            bracket=bracket,
            method="golden",
            options={"xtol": config.ALPHA_XTOL},
        )
        if getattr(res, "success", True) and curve(float(np.exp(res.x))) <= values[idx]:
            alpha = float(np.exp(res.x))
    except ValueError:
        log.debug("golden-section bracket rejected; keeping grid alpha %g", alpha)
    return AlphaSelection(alpha, grid, values)


# =========================
# COVARIATES
# =========================
def partial_out_controls(Y, D, G, X) -> Tuple[np.ndarray, np.ndarray, np.ndarray, List[int]]:
    """Residualize Y, D and Gamma on span(1, X).

    Returns the residuals and the indices of control columns dropped as
    collinear.
    """
    Y = np.asarray(Y, dtype=float)
    D = np.asarray(D, dtype=float)
    G = np.asarray(G, dtype=float)
    if X is None or np.size(X) == 0:
        return Y, D, G, []
    X = np.asarray(X, dtype=float)
    X = X.reshape(-1, 1) if X.ndim == 1 else X
    W = np.column_stack([np.ones(X.shape[0]), X])

    _, R, piv = linalg.qr(W, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    keep = diag > config.RANK_RTOL * diag[0]
    kept_cols = sorted(piv[keep])
    dropped = sorted(int(c) - 1 for c in piv[~keep] if c != 0)
    if dropped:
        log.warning("CONTROLS_COLLINEAR_DROPPED: control columns %s", dropped)
    W = W[:, kept_cols]

    stacked = np.column_stack([Y, D, G])
    coef, *_ = linalg.lstsq(W, stacked)
    resid = stacked - W @ coef
    return resid[:, 0], resid[:, 1], resid[:, 2:], dropped


# =========================
# INFERENCE
# =========================
def sandwich_variance(Y, D, Z, family: Sequence[int], spec: EstimandSpec, point: float) -> float:
    """Asymptotic standard error of the ratio estimator.

    Stacks the ratio moments (h U, U) with the moments defining the mean and
    covariance of Gamma and the weights lambda, then forms
    [J^-1 S J^-T]_11 / n with J the moment Jacobian and S the outer product.
    """
    Y = np.asarray(Y, dtype=float)
    D = np.asarray(D, dtype=float)
    G = build_gamma(Z, family)
    n, k = G.shape
    contrib = lambda_contributions(spec, Z, family)
    lam = contrib.mean(axis=0)

    mu = G.mean(axis=0)
    Gc = G - mu
    sigma = Gc.T @ Gc / n
    try:
        a = linalg.solve(sigma, lam, assume_a="sym")
        B = linalg.solve(sigma, Gc.T, assume_a="sym").T
    except linalg.LinAlgError as exc:
        raise SingularDesignError("sample covariance of the product regressors is singular; use the bootstrap") from exc
    g = Gc @ a

    kappa = Y.mean() - point * D.mean()
    U = Y - kappa - point * D

    iu, ju = np.triu_indices(k)
    cross = Gc[:, iu] * Gc[:, ju] - sigma[iu, ju]
    psi = np.column_stack([Gc, cross, contrib - lam])

    # derivative of g wrt (mu, vech Sigma, lambda)
    dg_mu = np.tile(-a, (n, 1))
    dg_sigma = -(a[iu] * B[:, ju] + a[ju] * B[:, iu])
    diag = iu == ju
    dg_sigma[:, diag] = -(a[iu[diag]] * B[:, iu[diag]])
    dg = np.column_stack([dg_mu, dg_sigma, B])

    p = psi.shape[1]
    jac = np.zeros((p + 2, p + 2))
    jac[0, 0] = -np.mean(D * g)
    jac[0, 1] = -np.mean(g)
    jac[0, 2:] = (U[:, None] * dg).mean(axis=0)
    jac[1, 0] = -np.mean(D)
    jac[1, 1] = -1.0
    jac[2:, 2:] = -np.eye(p)

    m = np.column_stack([g * U, U, psi])
    meat = m.T @ m / n
    try:
        inv_jac = linalg.solve(jac, np.eye(p + 2))
    except linalg.LinAlgError as exc:
        raise SingularDesignError("moment Jacobian is singular; use the bootstrap") from exc
    V = (inv_jac @ meat @ inv_jac.T)[0, 0]
    return float(np.sqrt(max(V, 0.0) / n))


@dataclass
class BootstrapResult:
    se: float
    ci95: Tuple[float, float]
    draws: np.ndarray
    share_draws: np.ndarray
    excluded: int

    @property
    def share_sd(self) -> float:
        return float(np.std(self.share_draws, ddof=1))


def replicate_rng(seed: int, rep: int) -> np.random.Generator:
    """Counter-based stream for one replicate, independent of scheduling."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(rep)])))


def bootstrap_se(dataset: Dataset, spec: EstimandSpec, design: InstrumentDesign, B: int, seed: int) -> BootstrapResult:
    """Row-resampling bootstrap of the full point pipeline."""
    if B < 100:
        raise InputError("bootstrap needs at least 100 replications")
    draws = np.full(B, np.nan)
    shares = np.full(B, np.nan)

    def one(b: int) -> None:
        rng = replicate_rng(seed, b)
        rows = rng.integers(0, dataset.n, size=dataset.n)
        try:
            res = _point(spec, dataset.take(rows), design)
        except VmivError as exc:
            log.debug("bootstrap draw %d excluded: %s", b, exc)
            return
        draws[b] = res.point
        shares[b] = res.complier_share

    with ThreadPoolExecutor(max_workers=config.THREADS) as pool:
        list(pool.map(one, range(B)))

    ok = np.isfinite(draws)
    excluded = int(B - ok.sum())
    if excluded:
        log.warning("BOOTSTRAP_DRAWS_EXCLUDED: %d of %d draws", excluded, B)
    if ok.sum() < 2:
        raise WeakIdentificationError(float("nan"))
    kept = draws[ok]
    lo, hi = np.percentile(kept, [2.5, 97.5])
    return BootstrapResult(float(np.std(kept, ddof=1)), (float(lo), float(hi)), kept, shares[ok], excluded)


# =========================
# DISTRIBUTIONAL EFFECTS
# =========================
def potential_outcome_moment(f: Callable[[np.ndarray], np.ndarray], d: int, Y, D, h) -> float:
    """Complier mean of f(Y(d))."""
    Y = np.asarray(Y, dtype=float)
    D = np.asarray(D, dtype=float)
    h = np.asarray(h, dtype=float)
    share = float(np.mean(h * D))
    check_weak_identification(share)
    sign = 1.0 if d == 1 else -1.0
    return sign * float(np.mean(np.asarray(f(Y), dtype=float) * h * (D == d))) / share


def potential_outcome_means(Y, D, h) -> Tuple[float, float]:
    return (
        potential_outcome_moment(lambda y: y, 1, Y, D, h),
        potential_outcome_moment(lambda y: y, 0, Y, D, h),
    )


@dataclass
class CDFResult:
    grid: np.ndarray
    f1_raw: np.ndarray
    f0_raw: np.ndarray
    f1: np.ndarray
    f0: np.ndarray

    @property
    def effect_raw(self) -> np.ndarray:
        return self.f1_raw - self.f0_raw

    @property
    def effect(self) -> np.ndarray:
        return self.f1 - self.f0

    def to_records(self) -> List[dict]:
        return [
            {
                "y": float(y), "f1_raw": float(a), "f0_raw": float(b),
                "f1": float(c), "f0": float(d), "effect": float(c - d),
            }
            for y, a, b, c, d in zip(self.grid, self.f1_raw, self.f0_raw, self.f1, self.f0)
        ]


def _rearrange(F: np.ndarray) -> np.ndarray:
    return np.clip(np.maximum.accumulate(F), 0.0, 1.0)


def cdf_treatment_effects(Y, D, h, grid) -> CDFResult:
    Y = np.asarray(Y, dtype=float)
    D = np.asarray(D, dtype=float)
    h = np.asarray(h, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) < 0):
        raise InputError("CDF grid must be sorted")
    share = float(np.mean(h * D))
    check_weak_identification(share)
    below = (Y[:, None] <= grid[None, :]).astype(float)
    f1 = (h * D) @ below / Y.shape[0] / share
    f0 = -(h * (1.0 - D)) @ below / Y.shape[0] / share
    return CDFResult(grid, f1, f0, _rearrange(f1), _rearrange(f0))


def quantile_treatment_effects(cdf: CDFResult, taus: Sequence[float]) -> List[dict]:
    """Complier quantiles of each potential outcome from the rearranged CDFs."""
    out = []
    for tau in taus:
        q = []
        for F in (cdf.f1, cdf.f0):
            hit = np.flatnonzero(F >= tau)
            q.append(float(cdf.grid[hit[0]]) if hit.size else float("nan"))
        out.append({"tau": float(tau), "q1": q[0], "q0": q[1], "effect": q[0] - q[1]})
    return out


# =========================
# BOUNDS
# =========================
@dataclass
class BoundsResult:
    ate: Tuple[float, float]
    att: Tuple[float, float]
    atu: Tuple[float, float]
    p_always: float
    p_never: float
    acl: float

    def to_dict(self) -> dict:
        return {
            "ate": list(self.ate),
            "att": list(self.att),
            "atu": list(self.atu),
            "p_always_taker": self.p_always,
            "p_never_taker": self.p_never,
            "acl": self.acl,
        }


def ate_bounds(Y, D, Z, ylo: float, yhi: float, family: Optional[Sequence[int]] = None, alpha: float = 0.0) -> BoundsResult:
    """Worst-case bounds for ATE, ATT and ATU given outcome bounds [ylo, yhi]."""
    Y = np.asarray(Y, dtype=float)
    D = np.asarray(D, dtype=float)
    Z = np.asarray(Z, dtype=np.int64)
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1)
    if not ylo <= yhi or ylo > Y.min() or yhi < Y.max():
        raise InputError(f"outcome bounds [{ylo}, {yhi}] do not contain the observed outcomes")
    J = Z.shape[1]
    cells = cell_index(Z)
    top = cells == (1 << J) - 1
    bottom = cells == 0
    if not top.any() or not bottom.any():
        raise InputError("bounds need observations with all instruments on and all off")

    family = tuple(family) if family is not None else all_subsets(J)
    G = build_gamma(Z, family)

    p_a = float(D[bottom].mean())
    p_n = float(1.0 - D[top].mean())
    yd_bottom = float((Y * D)[bottom].mean())
    yu_top = float((Y * (1.0 - D))[top].mean())
    never = (ylo * p_n - yu_top, yhi * p_n - yu_top)
    always = (yd_bottom - p_a * yhi, yd_bottom - p_a * ylo)

    everything = tuple(range(1, J + 1))
    theta = {}
    for kind in ("acl", "slatt", "slatu"):
        spec = EstimandSpec(kind=kind, target=everything if kind != "acl" else ())
        lam = lambda_for(spec, Z, family)
        theta[kind] = estimate_theta(Y, D, G, lam, alpha)

    acl_num, acl_den = theta["acl"]
    check_weak_identification(acl_den)
    p_treated = float(D.mean())
    p_untreated = 1.0 - p_treated

    ate = (acl_num + never[0] + always[0], acl_num + never[1] + always[1])
    att = tuple(float((theta["slatt"][0] + x) / p_treated) if p_treated > 0 else float("nan") for x in always)
    atu = tuple(float((theta["slatu"][0] + x) / p_untreated) if p_untreated > 0 else float("nan") for x in never)
    return BoundsResult((float(ate[0]), float(ate[1])), att, atu, p_a, p_n, float(acl_num / acl_den))


# =========================
# PIPELINE
# =========================
def _point(spec: EstimandSpec, dataset: Dataset, design: InstrumentDesign) -> EstimateResult:
    lam = lambda_for(spec, dataset.Z, design.family)
    G = build_gamma(dataset.Z, design.family)
    Y, D = dataset.Y, dataset.D
    warnings: List[str] = []
    if dataset.X is not None:
        Y, D, G, dropped = partial_out_controls(Y, D, G, dataset.X)
        if dropped:
            warnings.append("CONTROLS_COLLINEAR_DROPPED")

    selection = None
    if spec.regularization == "auto":
        selection = select_alpha_mse(Y, D, G, lam)
        alpha = selection.alpha
        warnings.extend(selection.warnings)
    elif spec.regularization == "fixed":
        alpha = float(spec.alpha)
    else:
        alpha = 0.0

    res = estimate_rho(Y, D, G, lam, alpha, estimand=spec.label())
    res.warnings.extend(warnings)
    res.diagnostics["lambda"] = [float(x) for x in lam]
    if selection is not None:
        res.diagnostics["alpha_selection"] = selection.to_dict()
    return res


def estimate(spec: EstimandSpec, dataset: Dataset, design: InstrumentDesign) -> EstimateResult:
    """Weights, optional partialling, alpha choice, ratio and variance for one estimand."""
    if dataset.J != design.J:
        raise InputError(f"dataset has {dataset.J} instruments but the design expects {design.J}")
    spec.validate(design)
    if spec.variance == "sandwich" and dataset.X is not None:
        raise InputError("sandwich variance is unavailable with controls; use bootstrap")

    res = _point(spec, dataset, design)
    res.diagnostics["family"] = [members(s) for s in design.family]

    if res.h_mean is not None:
        res.diagnostics["h"] = {"mean": res.h_mean, "sd": res.h_sd}

    # asymptotic t-stat of the share at the alpha actually used
    G = build_gamma(dataset.Z, design.family)
    Dv = dataset.D
    if dataset.X is not None:
        _, Dv, G, _ = partial_out_controls(dataset.Y, dataset.D, G, dataset.X)
    sd = share_standard_error(Dv, G, lambda_contributions(spec, dataset.Z, design.family), res.alpha)
    res.diagnostics["share_se"] = sd
    t_share = res.complier_share / sd if sd > 0 else float("inf")

    if spec.variance == "bootstrap":
        boot = bootstrap_se(dataset, spec, design, spec.bootstrap_reps, spec.seed)
        res.se = boot.se
        res.ci95 = boot.ci95
        res.diagnostics["bootstrap"] = {"reps": spec.bootstrap_reps, "excluded": boot.excluded}
        if boot.excluded:
            res.warnings.append("BOOTSTRAP_DRAWS_EXCLUDED")
        sd = boot.share_sd
        t_share = res.complier_share / sd if sd > 0 else float("inf")
    elif spec.variance == "sandwich":
        res.se = sandwich_variance(dataset.Y, dataset.D, dataset.Z, design.family, spec, res.point)
        res.ci95 = (res.point - 1.96 * res.se, res.point + 1.96 * res.se)

    res.diagnostics["share_t_stat"] = t_share
    check_weak_identification(res.complier_share, t_share)
    return res
