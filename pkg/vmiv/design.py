"""
Instrument encoding, the product regressors Gamma, support checks and the
propensity-based monotonicity diagnostics.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import statsmodels.api as sm

from . import config
from .combinatorics import all_subsets, format_subset, is_subset, members, popcount
from .errors import InputError

log = logging.getLogger(__name__)


# =========================
# TYPES
# =========================
@dataclass(frozen=True)
class SourceEntry:
    """Where a binary instrument came from when it is a threshold indicator."""
    source: str
    threshold: float
    direction: int = 1

    def to_dict(self) -> dict:
        return {"source": self.source, "threshold": self.threshold, "direction": self.direction}


@dataclass(frozen=True)
class InstrumentDesign:
    J: int
    family: Tuple[int, ...]
    sources: Tuple[Optional[SourceEntry], ...] = ()
    names: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.J < 1 or self.J > config.MAX_J:
            raise InputError(f"instrument count J={self.J} outside 1..{config.MAX_J}")
        if not self.family:
            raise InputError("instrument family is empty")
        if len(set(self.family)) != len(self.family):
            raise InputError("instrument family has repeated subsets")
        for s in self.family:
            if s <= 0 or s >> self.J:
                raise InputError(f"family member {s} is not a nonempty subset of 1..{self.J}")
        if self.sources and len(self.sources) != self.J:
            raise InputError("source map must have one entry per instrument")
        if self.names and len(self.names) != self.J:
            raise InputError("instrument names must have one entry per instrument")

    @classmethod
    def full(cls, J: int, names: Sequence[str] = ()) -> "InstrumentDesign":
        return cls(J, all_subsets(J), (), tuple(names))

    @classmethod
    def from_sources(cls, J: int, sources: Sequence[Optional[SourceEntry]], names: Sequence[str] = ()) -> "InstrumentDesign":
        sources = tuple(sources)
        return cls(J, default_family(J, sources), sources, tuple(names))

    @property
    def size(self) -> int:
        return len(self.family)

    def with_family(self, family: Sequence[int]) -> "InstrumentDesign":
        return InstrumentDesign(self.J, tuple(family), self.sources, self.names)

    def family_labels(self) -> List[str]:
        return [format_subset(s) for s in self.family]

    def to_dict(self) -> dict:
        return {
            "J": self.J,
            "family": [members(s) for s in self.family],
            "names": list(self.names),
            "sources": [s.to_dict() if s else None for s in self.sources],
        }


@dataclass
class Dataset:
    Y: np.ndarray
    D: np.ndarray
    Z: np.ndarray
    X: Optional[np.ndarray] = None
    instrument_names: Tuple[str, ...] = ()

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float).reshape(-1)
        self.D = np.asarray(self.D, dtype=float).reshape(-1)
        Z = np.asarray(self.Z, dtype=float)
        self.Z = Z.reshape(-1, 1) if Z.ndim == 1 else Z
        n = self.Y.shape[0]
        if self.D.shape[0] != n or self.Z.shape[0] != n:
            raise InputError("outcome, treatment and instruments must have the same number of rows")
        if self.X is not None:
            X = np.asarray(self.X, dtype=float)
            self.X = X.reshape(-1, 1) if X.ndim == 1 else X
            if self.X.shape[0] != n:
                raise InputError("controls must have the same number of rows as the outcome")
            if self.X.shape[1] == 0:
                self.X = None
        for name, arr in (("outcome", self.Y), ("treatment", self.D), ("instruments", self.Z)):
            if not np.all(np.isfinite(arr)):
                raise InputError(f"{name} contain missing or non-finite values")
        if self.X is not None and not np.all(np.isfinite(self.X)):
            raise InputError("controls contain missing or non-finite values")
        if not np.isin(self.D, (0.0, 1.0)).all():
            raise InputError("treatment must be binary 0/1")
        if not np.isin(self.Z, (0.0, 1.0)).all():
            raise InputError("instruments must be binary 0/1")
        self.Z = self.Z.astype(np.int64)
        if self.Z.shape[1] > config.MAX_J:
            raise InputError(f"at most {config.MAX_J} binary instruments are supported")

    @property
    def n(self) -> int:
        return int(self.Y.shape[0])

    @property
    def J(self) -> int:
        return int(self.Z.shape[1])

    def take(self, rows: np.ndarray) -> "Dataset":
        return Dataset(
            self.Y[rows], self.D[rows], self.Z[rows],
            None if self.X is None else self.X[rows],
            self.instrument_names,
        )


# =========================
# ENCODING
# =========================
def discretize_instrument(
    values,
    cuts: Sequence[float],
    direction: int = 1,
    source: str = "",
) -> Tuple[np.ndarray, List[SourceEntry]]:
    """Threshold indicators of a multi-valued instrument.

    Column m is 1(value >= cut_m) for direction +1 and 1(value < cut_m) for
    direction -1, so "1" always points toward treatment.
    """
    v = np.asarray(values, dtype=float).reshape(-1)
    cuts = [float(c) for c in cuts]
    if not cuts:
        raise InputError(f"no cut points given for {source or 'instrument'}")
    if any(b <= a for a, b in zip(cuts, cuts[1:])):
        raise InputError("cut points must be strictly ascending")
    if direction not in (1, -1):
        raise InputError("direction must be +1 or -1")
    if not np.all(np.isfinite(v)):
        raise InputError(f"non-finite values in {source or 'instrument'}")
    c = np.asarray(cuts)
    if direction == 1:
        out = (v[:, None] >= c[None, :]).astype(np.int64)
    else:
        out = (v[:, None] < c[None, :]).astype(np.int64)
    entries = [SourceEntry(source, cut, direction) for cut in cuts]
    return out, entries


def default_family(J: int, sources: Sequence[Optional[SourceEntry]] = ()) -> Tuple[int, ...]:
    """Nonempty subsets holding at most one threshold indicator per source."""
    subsets = all_subsets(J)
    if not sources or all(s is None for s in sources):
        return subsets
    groups: Dict[str, int] = {}
    for j, s in enumerate(sources):
        if s is not None:
            groups[s.source] = groups.get(s.source, 0) | (1 << j)
    return tuple(S for S in subsets if all(popcount(S & m) <= 1 for m in groups.values()))


def cell_index(Z) -> np.ndarray:
    """Integer code of each row's assignment; bit j-1 holds instrument j."""
    Z = np.asarray(Z, dtype=np.int64)
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1)
    return Z @ (1 << np.arange(Z.shape[1], dtype=np.int64))


def build_gamma(Z, family: Sequence[int]) -> np.ndarray:
    """n x |F| matrix whose column for S is the product of the instruments in S."""
    cells = cell_index(Z)
    return np.column_stack([((cells & S) == S) for S in family]).astype(float)


def build_A(J: int) -> np.ndarray:
    """Expansion of each cell indicator 1(Z=z) in instrument products.

    Rows are all subsets S (empty set first, canonical order), columns the
    cells z in bitmask order. A[S, z] = (-1)^|S - z| when z's ones lie in S.
    """
    if J < 1 or J > 5:
        raise InputError(f"instrument count J={J} outside 1..5")
    rows = all_subsets(J, include_empty=True)
    A = np.zeros((len(rows), 1 << J), dtype=np.int64)
    for i, S in enumerate(rows):
        for z in range(1 << J):
            if is_subset(z, S):
                A[i, z] = (-1) ** popcount(S & ~z)
    return A


def auto_orient(Z, D) -> Tuple[np.ndarray, List[int]]:
    """Flip instruments whose marginal first-stage difference is negative."""
    Z = np.asarray(Z, dtype=np.int64).copy()
    D = np.asarray(D, dtype=float)
    flipped = []
    for j in range(Z.shape[1]):
        on = Z[:, j] == 1
        if on.all() or not on.any():
            continue
        if D[on].mean() - D[~on].mean() < 0:
            Z[:, j] = 1 - Z[:, j]
            flipped.append(j + 1)
    if flipped:
        log.warning("INSTRUMENT_AUTO_ORIENTED: flipped instruments %s", flipped)
    return Z, flipped


# =========================
# SUPPORT
# =========================
@dataclass
class SupportReport:
    n: int
    cell_counts: Dict[int, int]
    rank: int
    size: int
    singular_values: List[float]
    min_singular_value: float
    full_rank: bool
    assumption: str
    recommended_family: Optional[Tuple[int, ...]] = None
    warnings: List[str] = field(default_factory=list)

    def to_dict(self, J: int) -> dict:
        return {
            "n": self.n,
            "cell_counts": [
                {"z": [(z >> j) & 1 for j in range(J)], "count": c}
                for z, c in sorted(self.cell_counts.items())
            ],
            "rank": self.rank,
            "size": self.size,
            "min_singular_value": self.min_singular_value,
            "full_rank": self.full_rank,
            "assumption": self.assumption,
            "recommended_family": None if self.recommended_family is None
            else [members(s) for s in self.recommended_family],
            "warnings": list(self.warnings),
        }


def support_report(Z, family: Sequence[int], sources: Sequence[Optional[SourceEntry]] = ()) -> SupportReport:
    Z = np.asarray(Z, dtype=np.int64)
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1)
    n, J = Z.shape
    family = tuple(family)
    warnings: List[str] = []
    if n < len(family) + 1:
        raise InputError(f"need at least {len(family) + 1} rows for a family of {len(family)} subsets")

    counts = np.bincount(cell_index(Z), minlength=1 << J)
    cell_counts = {z: int(c) for z, c in enumerate(counts)}
    empty = [z for z, c in cell_counts.items() if c == 0]
    if empty:
        warnings.append("EMPTY_CELLS")
        log.warning("EMPTY_CELLS: %d of %d instrument cells have no observations", len(empty), 1 << J)

    G = build_gamma(Z, family)
    cov = np.cov(G, rowvar=False, bias=True).reshape(len(family), len(family))
    sv = np.linalg.svd(cov, compute_uv=False)
    top = float(sv[0]) if sv.size else 0.0
    rank = int(np.sum(sv > config.RANK_RTOL * top)) if top > 0 else 0
    full_rank = rank == len(family)

    recommended = None
    if full_rank:
        assumption = "3" if not empty and family == all_subsets(J) else "3*"
    else:
        assumption = "deficient"
        warnings.append("GAMMA_RANK_DEFICIENT")
        log.warning("GAMMA_RANK_DEFICIENT: rank %d < %d", rank, len(family))
        if sources and any(s is not None for s in sources):
            candidate = default_family(J, sources)
            if candidate != family:
                recommended = candidate

    return SupportReport(
        n=n,
        cell_counts=cell_counts,
        rank=rank,
        size=len(family),
        singular_values=[float(s) for s in sv],
        min_singular_value=float(sv[-1]) if sv.size else 0.0,
        full_rank=full_rank,
        assumption=assumption,
        recommended_family=recommended,
        warnings=warnings,
    )


# =========================
# MONOTONICITY DIAGNOSTICS
# =========================
@dataclass(frozen=True)
class VMInequality:
    instrument: int
    context: Tuple[Tuple[int, int], ...]
    delta: float
    se: Optional[float] = None
    t_stat: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "instrument": self.instrument,
            "context": {f"z{k}": v for k, v in self.context},
            "delta": self.delta,
            "se": self.se,
            "t_stat": self.t_stat,
        }


def _contexts(J: int, j: int):
    bit = 1 << (j - 1)
    for z in range(1 << J):
        if z & bit:
            continue
        ctx = tuple((k, (z >> (k - 1)) & 1) for k in range(1, J + 1) if k != j)
        yield z, z | bit, ctx


def propensity_differences(table: Union[Sequence[float], Mapping[Tuple[int, ...], float]]) -> List[VMInequality]:
    """Switch-one-instrument differences of a propensity table.

    The table is either a sequence indexed by cell code or a mapping from
    0/1 tuples (z_1, ..., z_J) to probabilities.
    """
    if isinstance(table, Mapping):
        J = len(next(iter(table)))
        P = np.full(1 << J, np.nan)
        for key, p in table.items():
            P[int(cell_index(np.asarray([key]))[0])] = p
    else:
        P = np.asarray(table, dtype=float)
        J = P.shape[0].bit_length() - 1
    if P.shape[0] != 1 << J:
        raise InputError("propensity table must have 2^J entries")
    out = []
    for j in range(1, J + 1):
        for lo, hi, ctx in _contexts(J, j):
            out.append(VMInequality(j, ctx, float(P[hi] - P[lo])))
    return out


def vm_propensity_test(D, Z, X=None) -> List[VMInequality]:
    """Per-inequality checks that the propensity score rises in each instrument.

    The propensity model is saturated in Z with additive linear controls,
    evaluated at the sample mean of X; standard errors are HC1.
    """
    D = np.asarray(D, dtype=float).reshape(-1)
    Z = np.asarray(Z, dtype=np.int64)
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1)
    J = Z.shape[1]
    cells = cell_index(Z)
    occupied = sorted(set(int(c) for c in np.unique(cells)))
    column = {z: k for k, z in enumerate(occupied)}
    exog = np.column_stack([(cells == z).astype(float) for z in occupied])
    if X is not None:
        X = np.asarray(X, dtype=float)
        X = X.reshape(-1, 1) if X.ndim == 1 else X
        exog = np.column_stack([exog, X - X.mean(axis=0)])

    fit = sm.OLS(D, exog).fit(cov_type="HC1")
    params = np.asarray(fit.params)
    cov = np.asarray(fit.cov_params())

    out = []
    skipped = 0
    for j in range(1, J + 1):
        for lo, hi, ctx in _contexts(J, j):
            if lo not in column or hi not in column:
                skipped += 1
                continue
            c = np.zeros(params.shape[0])
            c[column[hi]] = 1.0
            c[column[lo]] = -1.0
            delta = float(c @ params)
            se = float(np.sqrt(max(c @ cov @ c, 0.0)))
            with np.errstate(divide="ignore", invalid="ignore"):
                t = float(np.divide(delta, se)) if se > 0 else (float(np.sign(delta)) * np.inf if delta else np.nan)
            out.append(VMInequality(j, ctx, delta, se, t))
    if skipped:
        log.warning("VM_TEST_CELL_EMPTY: %d instrument/context pairs have an empty cell", skipped)
    return out


@dataclass(frozen=True)
class GroupBounds:
    p_always: float
    p_never: float
    eager: Tuple[float, float]
    reluctant: Tuple[float, float]
    z1_complier: Tuple[float, float]
    z2_complier: Tuple[float, float]
    consistent_with_vm: bool

    def to_dict(self) -> dict:
        return {
            "p_always_taker": self.p_always,
            "p_never_taker": self.p_never,
            "p_eager": list(self.eager),
            "p_reluctant": list(self.reluctant),
            "p_z1_complier": list(self.z1_complier),
            "p_z2_complier": list(self.z2_complier),
            "consistent_with_vm": self.consistent_with_vm,
        }


def two_instrument_group_bounds(table: Union[Sequence[float], Mapping[Tuple[int, int], float]]) -> GroupBounds:
    """Group shares from a two-instrument propensity table.

    With a = P(1,0)-P(0,0), b = P(0,1)-P(0,0), c = P(1,1)-P(0,1) the eager
    share t satisfies Z1 = a - t, Z2 = b - t, reluctant = c - a + t, and all
    four shares are nonnegative.
    """
    if isinstance(table, Mapping):
        if any(len(k) != 2 for k in table):
            raise InputError("group bounds need exactly two instruments")
        P = np.array([table[(0, 0)], table[(1, 0)], table[(0, 1)], table[(1, 1)]], dtype=float)
    else:
        P = np.asarray(table, dtype=float)
    if P.shape != (4,):
        raise InputError("group bounds need exactly two instruments")
    if np.any(P < 0) or np.any(P > 1):
        raise InputError("propensity values must lie in [0, 1]")

    p00, p10, p01, p11 = P
    a = p10 - p00
    b = p01 - p00
    c = p11 - p01
    lo = max(0.0, a - c)
    hi = min(a, b)
    ok = bool(lo <= hi + 1e-12)
    if not ok:
        log.warning("VM_INCONSISTENT_PROPENSITY: eager share bounds [%g, %g] are empty", lo, hi)
    return GroupBounds(
        p_always=float(p00),
        p_never=float(1.0 - p11),
        eager=(float(lo), float(hi)),
        reluctant=(float(c - a + lo), float(c - a + hi)),
        z1_complier=(float(a - hi), float(a - lo)),
        z2_complier=(float(b - hi), float(b - lo)),
        consistent_with_vm=ok,
    )
