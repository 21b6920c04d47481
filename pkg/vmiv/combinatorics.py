"""
Compliance groups under vector monotonicity.

A subset of instruments is an int bitmask (bit j-1 for instrument j). A
compliance group is an antichain of such subsets: the unit takes treatment
exactly when every instrument in at least one member is switched on. The
empty antichain is the never-taker and the antichain holding only the empty
set is the always-taker.

Subsets are ordered by (cardinality, bitmask); families are ordered
lexicographically in that subset order.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import config
from .errors import InputError, PropertyMError, SingularDesignError

log = logging.getLogger(__name__)


# =========================
# SUBSETS
# =========================
def popcount(mask: int) -> int:
    return bin(mask).count("1")


def subset_key(mask: int) -> Tuple[int, int]:
    return (popcount(mask), mask)


def is_subset(a: int, b: int) -> bool:
    return (a & b) == a


def _check_j(J: int, upper: int) -> None:
    if not isinstance(J, (int, np.integer)) or J < 1 or J > upper:
        raise InputError(f"instrument count J={J} outside 1..{upper}")


@lru_cache(maxsize=None)
def all_subsets(J: int, include_empty: bool = False) -> Tuple[int, ...]:
    """Subsets of {1..J} in canonical order."""
    _check_j(J, config.MAX_J)
    start = 0 if include_empty else 1
    return tuple(sorted(range(start, 1 << J), key=subset_key))


def members(mask: int) -> List[int]:
    """1-based instrument indices contained in a subset."""
    out = []
    j = 1
    while mask:
        if mask & 1:
            out.append(j)
        mask >>= 1
        j += 1
    return out


def mask_of(indices: Iterable[int]) -> int:
    m = 0
    for j in indices:
        m |= 1 << (int(j) - 1)
    return m


def format_subset(mask: int) -> str:
    return "{" + ",".join(str(j) for j in members(mask)) + "}"


# =========================
# COMPLIANCE GROUPS
# =========================
@dataclass(frozen=True)
class ComplianceGroup:
    J: int
    family: Tuple[int, ...]

    @property
    def is_never_taker(self) -> bool:
        return len(self.family) == 0

    @property
    def is_always_taker(self) -> bool:
        return self.family == (0,)

    @property
    def is_complier(self) -> bool:
        return not (self.is_never_taker or self.is_always_taker)

    def sort_key(self) -> Tuple[Tuple[int, int], ...]:
        return tuple(subset_key(s) for s in self.family)

    def label(self) -> str:
        return group_label(self)


def make_group(J: int, family: Iterable[int]) -> ComplianceGroup:
    """Build a group from any iterable of subsets, validating the antichain."""
    fam = sorted(set(int(s) for s in family), key=subset_key)
    for s in fam:
        if s < 0 or s >> J:
            raise InputError(f"subset {s} has bits above J={J}")
    for i, a in enumerate(fam):
        for b in fam[i + 1:]:
            if is_subset(a, b):
                raise InputError(f"{format_subset(a)} is contained in {format_subset(b)}: not an antichain")
    return ComplianceGroup(J, tuple(fam))


def simple_group(J: int, S: int) -> ComplianceGroup:
    return ComplianceGroup(J, (int(S),))


def group_label(g: ComplianceGroup) -> str:
    if g.is_never_taker:
        return "never-taker"
    if g.is_always_taker:
        return "always-taker"
    return "{" + ",".join(format_subset(s) for s in g.family) + "}"


def _antichains(J: int) -> Iterator[Tuple[int, ...]]:
    subsets = all_subsets(J, include_empty=True)
    stack: List[int] = []

    # preorder DFS with increasing choice emits families in lexicographic order
    def extend(start: int) -> Iterator[Tuple[int, ...]]:
        yield tuple(stack)
        for i in range(start, len(subsets)):
            s = subsets[i]
            if any(is_subset(m, s) for m in stack):
                continue
            stack.append(s)
            yield from extend(i + 1)
            stack.pop()

    yield from extend(0)


@lru_cache(maxsize=None)
def enumerate_compliance_groups(J: int) -> Tuple[ComplianceGroup, ...]:
    """All compliance groups for J binary instruments, canonical order."""
    _check_j(J, 5)
    groups = tuple(ComplianceGroup(J, fam) for fam in _antichains(J))
    log.debug("enumerated %d compliance groups for J=%d", len(groups), J)
    return groups


def complier_groups(J: int) -> Tuple[ComplianceGroup, ...]:
    return tuple(g for g in enumerate_compliance_groups(J) if g.is_complier)


@lru_cache(maxsize=None)
def group_index(J: int) -> Dict[Tuple[int, ...], int]:
    return {g.family: i for i, g in enumerate(enumerate_compliance_groups(J))}


def count_compliance_groups(J: int) -> int:
    """Dedekind number for J <= 6 without materializing J=6 families.

    A monotone function on J variables splits on the last variable into a
    pair f0 <= f1 of monotone functions on J-1 variables.
    """
    _check_j(J, 6)
    if J <= 5:
        return len(enumerate_compliance_groups(J))
    tables = truth_tables(J - 1)
    weights = np.uint64(1) << np.arange(tables.shape[1], dtype=np.uint64)
    packed = (tables.astype(np.uint64) * weights).sum(axis=1)
    total = 0
    for a in packed:
        total += int(np.count_nonzero((a & ~packed) == 0))
    return total


# =========================
# SELECTION FUNCTIONS
# =========================
def selection_value(g: ComplianceGroup, z: int) -> int:
    """D_g(z) for an assignment given as the bitmask of instruments set to one."""
    return int(any(is_subset(s, z) for s in g.family))


@lru_cache(maxsize=None)
def _truth_tables(J: int) -> np.ndarray:
    groups = enumerate_compliance_groups(J)
    out = np.zeros((len(groups), 1 << J), dtype=np.int64)
    for i, g in enumerate(groups):
        for z in range(1 << J):
            out[i, z] = selection_value(g, z)
    out.setflags(write=False)
    return out


def truth_tables(J: int) -> np.ndarray:
    """Groups x cells matrix of selection values; cell index is the bitmask z."""
    return _truth_tables(J)


def is_vector_monotone(table: Sequence[int]) -> bool:
    t = np.asarray(table)
    cells = t.shape[0]
    J = cells.bit_length() - 1
    if cells != 1 << J:
        raise InputError("selection table length must be a power of two")
    for z in range(cells):
        for j in range(J):
            bit = 1 << j
            if not z & bit and t[z] > t[z | bit]:
                return False
    return True


def family_of_selection(table: Sequence[int]) -> ComplianceGroup:
    """Inverse of selection_value: the minimal assignments that take treatment."""
    t = np.asarray(table)
    J = t.shape[0].bit_length() - 1
    if not is_vector_monotone(t):
        raise InputError("selection table is not monotone in each instrument")
    minimal = [
        z for z in range(1 << J)
        if t[z] and not any(t[z & ~(1 << j)] for j in range(J) if z & (1 << j))
    ]
    return make_group(J, minimal)


# =========================
# LINEAR DEPENDENCY MATRIX
# =========================
@dataclass(frozen=True)
class MJMatrix:
    J: int
    matrix: np.ndarray
    rows: Tuple[ComplianceGroup, ...]
    columns: Tuple[int, ...]


def _mj_row(family: Sequence[int]) -> Dict[int, int]:
    # signed count over sub-collections f, keyed by the union of f
    weights: Dict[int, int] = {0: -1}
    for s in family:
        nxt = dict(weights)
        for u, w in weights.items():
            nxt[u | s] = nxt.get(u | s, 0) - w
        weights = nxt
    weights[0] += 1
    return weights


@lru_cache(maxsize=None)
def build_MJ(J: int) -> MJMatrix:
    _check_j(J, 5)
    rows = complier_groups(J)
    cols = all_subsets(J)
    col_pos = {s: k for k, s in enumerate(cols)}
    mat = np.zeros((len(rows), len(cols)), dtype=np.int64)
    for i, g in enumerate(rows):
        for u, w in _mj_row(g.family).items():
            if w:
                mat[i, col_pos[u]] = w
    mat.setflags(write=False)
    return MJMatrix(J, mat, rows, cols)


def subset_indicator(J: int) -> np.ndarray:
    """Nonempty subsets x cells matrix of 1(S is contained in z)."""
    cols = all_subsets(J)
    out = np.zeros((len(cols), 1 << J), dtype=np.int64)
    for k, s in enumerate(cols):
        for z in range(1 << J):
            out[k, z] = is_subset(s, z)
    return out


def verify_MJ(J: int) -> bool:
    mj = build_MJ(J)
    index = group_index(J)
    tables = truth_tables(J)
    lhs = tables[[index[g.family] for g in mj.rows]]
    rhs = mj.matrix @ subset_indicator(J)
    return bool(np.array_equal(lhs, rhs))


# =========================
# PROPERTY M
# =========================
@dataclass(frozen=True)
class PropertyMViolation:
    group: ComplianceGroup
    z: int
    value: int
    implied: int

    def describe(self) -> str:
        return f"{group_label(self.group)} at z={self.z}: c={self.value} but M_J implies {self.implied}"


def _as_weight_table(c, J: int) -> np.ndarray:
    groups = enumerate_compliance_groups(J)
    if isinstance(c, dict):
        missing = [g for g in groups if g not in c]
        if missing:
            raise InputError(f"complier weight table missing {len(missing)} groups, e.g. {group_label(missing[0])}")
        c = [c[g] for g in groups]
    arr = np.asarray(c)
    if arr.shape != (len(groups), 1 << J):
        raise InputError(f"complier weight table must have shape {(len(groups), 1 << J)}, got {arr.shape}")
    bad = np.argwhere((arr != 0) & (arr != 1))
    if bad.size:
        i, z = bad[0]
        raise InputError(f"complier weights must be 0 or 1; {group_label(groups[i])} at z={z} is {arr[i, z]}")
    return arr.astype(np.int64)


def check_property_M(c, J: int) -> Tuple[bool, List[PropertyMViolation]]:
    """Check c(g, z) against Property M.

    c is either a groups x cells array in canonical group order or a dict
    from ComplianceGroup to a row of 2^J values.
    """
    table = _as_weight_table(c, J)
    groups = enumerate_compliance_groups(J)
    index = group_index(J)
    mj = build_MJ(J)
    violations: List[PropertyMViolation] = []

    for g in (groups[index[()]], groups[index[(0,)]]):
        for z in np.flatnonzero(table[index[g.family]]):
            violations.append(PropertyMViolation(g, int(z), int(table[index[g.family], z]), 0))

    simple = table[[index[(s,)] for s in mj.columns]]
    implied = mj.matrix @ simple
    for i, g in enumerate(mj.rows):
        row = table[index[g.family]]
        for z in np.flatnonzero(row != implied[i]):
            violations.append(PropertyMViolation(g, int(z), int(row[z]), int(implied[i, z])))

    return (len(violations) == 0, violations)


def sperner_chain_decomposition(c, J: int, z: int) -> List[Tuple[int, int]]:
    """Write c(., z) as a sum of D_g(u_k) - D_g(l_k) over nested assignments.

    Returns [(u_1, l_1), ..., (u_K, l_K)] as bitmasks with
    u_1 >= l_1 >= u_2 >= ... component-wise.
    """
    table = _as_weight_table(c, J)
    ok, violations = check_property_M(table, J)
    at_z = [v for v in violations if v.z == z]
    if at_z:
        raise PropertyMError(f"weights fail Property M at z={z}", at_z)

    index = group_index(J)
    inverse = set()
    for s in all_subsets(J):
        v = table[index[(s,)], z]
        if v not in (0, 1):
            raise PropertyMError(f"weight {v} for {format_subset(s)} at z={z} is not binary")
        if v == 1:
            inverse.add(s)

    def union_of(within: int, member: bool) -> int:
        out = 0
        for s in all_subsets(J):
            if is_subset(s, within) and ((s in inverse) == member):
                out |= s
        return out

    current = 0
    for s in inverse:
        current |= s
    pairs: List[Tuple[int, int]] = []
    while current:
        lower = union_of(current, member=False)
        following = union_of(lower, member=True) if lower else 0
        if lower == current or following == lower:
            raise PropertyMError(f"weights at z={z} do not form a nested chain", [])
        pairs.append((current, lower))
        current = following
    return pairs


# =========================
# TARGET PARAMETERS
# =========================
def complier_weight_table(
    kind: str,
    J: int,
    target: Optional[Iterable[int]] = None,
    instrument: Optional[int] = None,
    context: Optional[Dict[int, int]] = None,
) -> np.ndarray:
    """c(g, z) for the leading parameters, as a groups x cells array.

    kind is one of acl, slate, slatt, slatu, pte. target is the 1-based
    instrument set for the set-LATE family; instrument and context (other
    instrument -> value) define a partial treatment effect.
    """
    tables = truth_tables(J)
    cells = np.arange(1 << J)
    full = (1 << J) - 1
    kind = kind.lower()

    if kind == "acl":
        return np.repeat((tables[:, full] - tables[:, 0])[:, None], 1 << J, axis=1)

    if kind in ("slate", "slatt", "slatu"):
        if not target:
            raise InputError(f"{kind} needs a nonempty instrument set")
        jm = mask_of(target)
        if jm >> J:
            raise InputError(f"instrument set {sorted(target)} outside 1..{J}")
        up = tables[:, cells | jm]
        down = tables[:, cells & ~jm]
        now = tables[:, cells]
        if kind == "slate":
            return up - down
        if kind == "slatt":
            return now - down
        return up - now

    if kind == "pte":
        if instrument is None or not 1 <= instrument <= J:
            raise InputError(f"partial effect instrument {instrument} outside 1..{J}")
        context = dict(context or {})
        others = [k for k in range(1, J + 1) if k != instrument]
        if sorted(context) != others:
            raise InputError(f"partial effect context must assign exactly instruments {others}")
        base = mask_of(k for k, v in context.items() if v)
        bit = 1 << (instrument - 1)
        col = tables[:, base | bit] - tables[:, base]
        return np.repeat(col[:, None], 1 << J, axis=1)

    raise InputError(f"unknown parameter kind {kind!r}")


# =========================
# ROW SPACE
# =========================
def rowspace_projection_check(B, v, atol: float = config.ROWSPACE_ATOL) -> Tuple[np.ndarray, bool]:
    """Project v onto the row space of B; report whether v already lies there."""
    B = np.asarray(B, dtype=float)
    v = np.asarray(v, dtype=float)
    if B.ndim != 2 or v.shape != (B.shape[1],):
        raise InputError("v must have one entry per column of B")
    if np.linalg.matrix_rank(B) < B.shape[0]:
        raise SingularDesignError("matrix does not have full row rank")
    coef, *_ = np.linalg.lstsq(B.T, v, rcond=None)
    proj = B.T @ coef
    return proj, bool(np.max(np.abs(proj - v), initial=0.0) <= atol)
