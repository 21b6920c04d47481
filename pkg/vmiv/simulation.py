"""
Simulation designs with known compliance groups, exact oracle values and a
Monte Carlo harness comparing the ratio estimator with its unregularized
version and fully saturated 2SLS.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.stats import multivariate_normal, norm

from . import config
from .combinatorics import (
    all_subsets,
    complier_weight_table,
    enumerate_compliance_groups,
    group_index,
    mask_of,
    truth_tables,
)
from .design import Dataset, InstrumentDesign, build_gamma, cell_index
from .errors import InputError, SingularDesignError, VmivError
from .estimation import EstimandSpec, estimate, replicate_rng

log = logging.getLogger(__name__)


# =========================
# INSTRUMENT LAWS
# =========================
@dataclass(frozen=True)
class BernoulliLaw:
    probs: Tuple[float, ...]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return (rng.random((n, len(self.probs))) < np.asarray(self.probs)).astype(np.int64)

    def cell_probabilities(self) -> np.ndarray:
        p = np.asarray(self.probs, dtype=float)
        J = p.shape[0]
        bits = (np.arange(1 << J)[:, None] >> np.arange(J)) & 1
        return np.prod(np.where(bits == 1, p, 1.0 - p), axis=1)


@dataclass(frozen=True)
class ConditionalZeroingLaw:
    """Independent Bernoulli draws, then instrument `target` is set to zero
    with probability `prob` whenever instrument `trigger` is one."""
    probs: Tuple[float, ...]
    trigger: int
    target: int
    prob: float

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        Z = BernoulliLaw(self.probs).sample(n, rng)
        hit = (Z[:, self.trigger - 1] == 1) & (rng.random(n) < self.prob)
        Z[hit, self.target - 1] = 0
        return Z

    def cell_probabilities(self) -> np.ndarray:
        P = BernoulliLaw(self.probs).cell_probabilities()
        trig = 1 << (self.trigger - 1)
        targ = 1 << (self.target - 1)
        out = P.copy()
        for z in range(P.shape[0]):
            if z & trig and z & targ:
                moved = self.prob * P[z]
                out[z] -= moved
                out[z & ~targ] += moved
        return out


@dataclass(frozen=True)
class LatentGaussianLaw:
    """Z_j = 1(Z*_j > threshold_j) with Z* standard normal, correlation `corr`."""
    corr: Tuple[Tuple[float, ...], ...]
    thresholds: Tuple[float, ...]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        R = np.asarray(self.corr, dtype=float)
        latent = rng.multivariate_normal(np.zeros(R.shape[0]), R, size=n, method="cholesky")
        return (latent > np.asarray(self.thresholds)).astype(np.int64)

    def cell_probabilities(self) -> np.ndarray:
        R = np.asarray(self.corr, dtype=float)
        t = np.asarray(self.thresholds, dtype=float)
        J = t.shape[0]
        if J == 1:
            return np.array([norm.cdf(t[0]), norm.sf(t[0])])
        if J == 2 and np.allclose(t, 0.0):
            q = np.arcsin(R[0, 1]) / (2 * np.pi)
            return np.array([0.25 + q, 0.25 - q, 0.25 - q, 0.25 + q])
        out = np.zeros(1 << J)
        for z in range(1 << J):
            s = np.where((z >> np.arange(J)) & 1, -1.0, 1.0)
            out[z] = multivariate_normal(np.zeros(J), R * np.outer(s, s)).cdf(s * t)
        return out / out.sum()


InstrumentLaw = Union[BernoulliLaw, ConditionalZeroingLaw, LatentGaussianLaw]


def cell_probabilities(law: InstrumentLaw, J: int) -> np.ndarray:
    """Exact P(Z=z) for every cell z in bitmask order."""
    p = law.cell_probabilities()
    if p.shape[0] != 1 << J:
        raise InputError(f"instrument law describes {p.shape[0]} cells, expected {1 << J}")
    return p


# =========================
# DGP
# =========================
@dataclass(frozen=True)
class DGPSpec:
    """Y(0) = baseline_g * U + control_effect * sum(X), Y(1) = Y(0) + effect_g + effect_noise * V
    with U, V uniform on [0, 1]; groups indexed in canonical enumeration order."""
    J: int
    group_probs: Tuple[float, ...]
    law: InstrumentLaw
    effects: Tuple[float, ...]
    baselines: Tuple[float, ...]
    effect_noise: float = 1.0
    n_controls: int = 0
    control_effect: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        k = len(enumerate_compliance_groups(self.J))
        for label, arr in (("group_probs", self.group_probs), ("effects", self.effects), ("baselines", self.baselines)):
            if len(arr) != k:
                raise InputError(f"{label} needs {k} entries for J={self.J}")
        p = np.asarray(self.group_probs)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise InputError("group probabilities must be nonnegative and sum to 1")
        if isinstance(self.law, LatentGaussianLaw):
            try:
                np.linalg.cholesky(np.asarray(self.law.corr, dtype=float))
            except np.linalg.LinAlgError as exc:
                raise InputError("latent correlation matrix is not positive definite") from exc
            if len(self.law.thresholds) != self.J:
                raise InputError("latent law needs one threshold per instrument")
        elif len(self.law.probs) != self.J:
            raise InputError("instrument law needs one probability per instrument")

    @property
    def mean_effects(self) -> np.ndarray:
        return np.asarray(self.effects, dtype=float) + 0.5 * self.effect_noise

    def to_dict(self) -> dict:
        return {"name": self.name, "J": self.J}


def simulate(dgp: DGPSpec, n: int, rng: np.random.Generator) -> Tuple[Dataset, np.ndarray]:
    """Draw a sample; labels are 1-based positions in the canonical group order."""
    probs = np.asarray(dgp.group_probs, dtype=float)
    labels = rng.choice(probs.shape[0], size=n, p=probs)
    Z = dgp.law.sample(n, rng)
    U = rng.random(n)
    V = rng.random(n)
    X = rng.standard_normal((n, dgp.n_controls)) if dgp.n_controls else None

    D = truth_tables(dgp.J)[labels, cell_index(Z)].astype(float)
    y0 = np.asarray(dgp.baselines)[labels] * U
    if X is not None:
        y0 = y0 + dgp.control_effect * X.sum(axis=1)
    y1 = y0 + np.asarray(dgp.effects)[labels] + dgp.effect_noise * V
    Y = np.where(D == 1, y1, y0)
    return Dataset(Y, D, Z, X), labels + 1


def three_instrument_spec(variant: int) -> DGPSpec:
    if variant not in (1, 2):
        raise InputError(f"three-instrument design variant must be 1 or 2, got {variant}")
    k = len(enumerate_compliance_groups(3))
    labels = tuple(float(g) for g in range(1, k + 1))
    if variant == 1:
        law: InstrumentLaw = BernoulliLaw((0.5, 0.5, 0.5))
    else:
        law = ConditionalZeroingLaw((0.5, 0.5, 0.5), trigger=2, target=3, prob=0.95)
    return DGPSpec(3, tuple([1.0 / k] * k), law, labels, labels, 1.0, name=f"three:{variant}")


def two_instrument_spec() -> DGPSpec:
    index = group_index(2)
    k = len(index)
    probs = [0.0] * k
    effects = [0.0] * k
    probs[index[(mask_of([1]),)]] = 0.9
    probs[index[(mask_of([2]),)]] = 0.1
    effects[index[(mask_of([1]),)]] = 2.0
    effects[index[(mask_of([2]),)]] = -8.0
    law = LatentGaussianLaw(((1.0, -0.8), (-0.8, 1.0)), (0.0, 0.0))
    return DGPSpec(2, tuple(probs), law, tuple(effects), tuple([1.0] * k), 0.0, name="two")


def dgp_three_instruments(variant: int, n: int, seed: int) -> Tuple[Dataset, np.ndarray]:
    return simulate(three_instrument_spec(variant), n, replicate_rng(seed, 0))


def dgp_two_instruments(n: int, seed: int) -> Tuple[Dataset, np.ndarray]:
    return simulate(two_instrument_spec(), n, replicate_rng(seed, 0))


def _law_from_dict(d: dict, J: int) -> InstrumentLaw:
    kind = d.get("law", "bernoulli")
    if kind == "bernoulli":
        return BernoulliLaw(tuple(float(p) for p in d.get("p", [0.5] * J)))
    if kind == "conditional_zeroing":
        return ConditionalZeroingLaw(
            tuple(float(p) for p in d.get("p", [0.5] * J)),
            int(d["trigger"]), int(d["target"]), float(d["prob"]),
        )
    if kind == "latent_gaussian":
        return LatentGaussianLaw(
            tuple(tuple(float(x) for x in row) for row in d["corr"]),
            tuple(float(t) for t in d.get("thresholds", [0.0] * J)),
        )
    raise InputError(f"unknown instrument law {kind!r}")


def load_dgp_spec(path: str) -> DGPSpec:
    """Read a design from JSON.

    Groups are listed by family, e.g. {"family": [[1], [2]], "prob": 0.2,
    "effect": 1.5, "baseline": 1}; [] is the never-taker and [[]] the
    always-taker. Unlisted groups get probability zero.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read design file {path}: {exc}") from exc

    J = int(raw["J"])
    index = group_index(J)
    k = len(index)
    probs, effects, baselines = [0.0] * k, [0.0] * k, [1.0] * k
    for g in raw.get("groups", []):
        fam = tuple(sorted((mask_of(s) for s in g["family"]), key=lambda m: (bin(m).count("1"), m)))
        if fam not in index:
            raise InputError(f"family {g['family']} is not an antichain over 1..{J}")
        i = index[fam]
        probs[i] = float(g.get("prob", 0.0))
        effects[i] = float(g.get("effect", 0.0))
        baselines[i] = float(g.get("baseline", 1.0))
    return DGPSpec(
        J,
        tuple(probs),
        _law_from_dict(raw.get("instruments", {}), J),
        tuple(effects),
        tuple(baselines),
        float(raw.get("effect_noise", 1.0)),
        int(raw.get("controls", 0)),
        float(raw.get("control_effect", 0.0)),
        name=str(raw.get("name", "file")),
    )


# =========================
# ORACLE
# =========================
@dataclass(frozen=True)
class OracleValues:
    value: float
    share: float
    ate: float
    weights: Tuple[float, ...] = ()


def _weight_table(dgp: DGPSpec, spec: EstimandSpec) -> np.ndarray:
    if spec.kind == "custom":
        raise InputError("oracle values need a named estimand, not custom weights")
    if spec.kind == "pte":
        return complier_weight_table("pte", dgp.J, instrument=spec.instrument, context=dict(spec.context))
    return complier_weight_table(spec.kind, dgp.J, target=spec.target or None)


def oracle_estimand(dgp: DGPSpec, spec: EstimandSpec) -> OracleValues:
    """Exact value by summing over groups and instrument cells."""
    pz = cell_probabilities(dgp.law, dgp.J)
    c = _weight_table(dgp, spec)
    probs = np.asarray(dgp.group_probs, dtype=float)
    w = probs * (c @ pz)
    share = float(w.sum())
    effects = dgp.mean_effects
    value = float(w @ effects / share) if share != 0 else float("nan")
    return OracleValues(value, share, float(probs @ effects), tuple(float(x) for x in w))


def _uniform_sum_cdf(x: np.ndarray, a: float, b: float) -> np.ndarray:
    """CDF of Unif[0,a] + Unif[0,b]."""
    a, b = sorted((abs(a), abs(b)))
    if b == 0:
        return (x >= 0).astype(float)
    if a == 0:
        return np.clip(x / b, 0.0, 1.0)
    out = np.where(
        x < a,
        np.clip(x, 0.0, None) ** 2 / (2 * a * b),
        np.where(x < b, (x - a / 2) / b, 1.0 - np.clip(a + b - x, 0.0, None) ** 2 / (2 * a * b)),
    )
    return np.clip(out, 0.0, 1.0)


def oracle_cdfs(dgp: DGPSpec, spec: EstimandSpec, grid) -> Tuple[np.ndarray, np.ndarray]:
    """Complier CDFs of Y(1) and Y(0) on a grid (designs without controls)."""
    if dgp.n_controls:
        raise InputError("oracle CDFs are available only for designs without controls")
    grid = np.asarray(grid, dtype=float)
    orc = oracle_estimand(dgp, spec)
    w = np.asarray(orc.weights) / orc.share
    f1 = np.zeros_like(grid)
    f0 = np.zeros_like(grid)
    for g in np.flatnonzero(w):
        b = dgp.baselines[g]
        f0 += w[g] * _uniform_sum_cdf(grid, b, 0.0)
        f1 += w[g] * _uniform_sum_cdf(grid - dgp.effects[g], b, dgp.effect_noise)
    return f1, f0


# =========================
# COMPARATORS
# =========================
def saturated_2sls(Y, D, Z) -> float:
    """2SLS of Y on D with the full set of instrument products as excluded instruments."""
    Y = np.asarray(Y, dtype=float)
    D = np.asarray(D, dtype=float)
    Z = np.asarray(Z, dtype=np.int64)
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1)
    X = np.column_stack([np.ones(Y.shape[0]), build_gamma(Z, all_subsets(Z.shape[1]))])
    coef, _, rank, _ = linalg.lstsq(X, D)
    if rank < X.shape[1]:
        raise SingularDesignError("saturated first stage is rank deficient")
    d_hat = X @ coef
    d_hat_c = d_hat - d_hat.mean()
    return float((d_hat_c @ Y) / (d_hat_c @ D))


# =========================
# MONTE CARLO
# =========================
ESTIMATORS = ("vm", "wald", "tsls")


@dataclass
class MCResult:
    dgp: str
    n: int
    reps: int
    seed: int
    oracle: OracleValues
    estimators: Tuple[str, ...]
    points: np.ndarray
    ses: np.ndarray
    shares: np.ndarray
    alphas: np.ndarray
    failures: Dict[str, int] = field(default_factory=dict)

    @property
    def common(self) -> np.ndarray:
        """Replicates on which every estimator returned a point."""
        return np.all(np.isfinite(self.points), axis=0)

    def summary(self) -> Dict[str, Dict[str, float]]:
        """Per-estimator statistics over the common successful replicates."""
        out = {}
        ok = self.common
        for k, name in enumerate(self.estimators):
            p = self.points[k][ok]
            se = self.ses[k][ok]
            m = int(ok.sum())
            stats = {
                "reps": float(m),
                "failures": float(self.failures.get(name, 0)),
                "succeeded": float(np.isfinite(self.points[k]).sum()),
                "mean": float(p.mean()) if m else float("nan"),
                "sd": float(p.std(ddof=1)) if m > 1 else float("nan"),
                "bias": float(p.mean() - self.oracle.value) if m else float("nan"),
                "rmse": float(np.sqrt(np.mean((p - self.oracle.value) ** 2))) if m else float("nan"),
                "mean_se": float(np.mean(se)) if m and np.all(np.isfinite(se)) else float("nan"),
                "coverage": float("nan"),
                "mean_alpha": float(np.mean(self.alphas[k][ok])) if m else float("nan"),
                "mean_share": float(np.mean(self.shares[k][ok])) if m else float("nan"),
                "sd_share": float(np.std(self.shares[k][ok], ddof=1)) if m > 1 else float("nan"),
            }
            if m and np.all(np.isfinite(se)):
                covered = np.abs(p - self.oracle.value) <= 1.96 * se
                stats["coverage"] = float(covered.mean())
            out[name] = stats
        return out

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for name, stats in self.summary().items():
            for metric, value in stats.items():
                rows.append({"estimator": name, "metric": metric, "value": value})
        rows.append({"estimator": "oracle", "metric": "value", "value": self.oracle.value})
        rows.append({"estimator": "oracle", "metric": "share", "value": self.oracle.share})
        return pd.DataFrame(rows, columns=["estimator", "metric", "value"])


def _run_estimator(name: str, spec: EstimandSpec, data: Dataset, design: InstrumentDesign) -> Tuple[float, float, float, float]:
    if name == "tsls":
        return saturated_2sls(data.Y, data.D, data.Z), float("nan"), float("nan"), 0.0
    if name == "wald":
        s = replace(spec, regularization="none")
    elif name == "vm":
        s = replace(spec, regularization="auto")
    else:
        raise InputError(f"unknown estimator {name!r}; choose from {ESTIMATORS}")
    res = estimate(s, data, design)
    return res.point, res.se if res.se is not None else float("nan"), res.complier_share, res.alpha


def run_monte_carlo(
    dgp: DGPSpec,
    estimators: Sequence[str] = ESTIMATORS,
    reps: int = 1000,
    seed: int = 0,
    n: int = 1000,
    spec: Optional[EstimandSpec] = None,
    threads: Optional[int] = None,
) -> MCResult:
    """Replicate the design and collect each estimator's draws.

    Replicate r uses the stream derived from (seed, r), and results land in
    preallocated slots, so the output does not depend on the worker count.
    """
    if reps < 1:
        raise InputError("need at least one replication")
    estimators = tuple(estimators)
    for name in estimators:
        if name not in ESTIMATORS:
            raise InputError(f"unknown estimator {name!r}; choose from {ESTIMATORS}")
    spec = spec or EstimandSpec(kind="acl", variance="sandwich")
    if dgp.n_controls and spec.variance == "sandwich":
        spec = replace(spec, variance="none")
    design = InstrumentDesign.full(dgp.J)
    oracle = oracle_estimand(dgp, spec)

    shape = (len(estimators), reps)
    points = np.full(shape, np.nan)
    ses = np.full(shape, np.nan)
    shares = np.full(shape, np.nan)
    alphas = np.full(shape, np.nan)
    failed = np.zeros(shape, dtype=bool)

    def one(r: int) -> None:
        data, _ = simulate(dgp, n, replicate_rng(seed, r))
        for k, name in enumerate(estimators):
            try:
                points[k, r], ses[k, r], shares[k, r], alphas[k, r] = _run_estimator(name, spec, data, design)
            except VmivError as exc:
                failed[k, r] = True
                log.debug("replicate %d, %s failed: %s", r, name, exc)

    with ThreadPoolExecutor(max_workers=threads or config.THREADS) as pool:
        list(pool.map(one, range(reps)))

    failures = {name: int(failed[k].sum()) for k, name in enumerate(estimators)}
    for name, count in failures.items():
        if count:
            log.warning("MC_REPLICATE_FAILURES: %s failed in %d of %d replicates", name, count, reps)
    return MCResult(dgp.name, n, reps, seed, oracle, estimators, points, ses, shares, alphas, failures)
