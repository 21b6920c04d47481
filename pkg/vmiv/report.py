"""
Run configuration, CSV ingestion and the diagnose -> estimate pipeline that
produces a versioned, JSON-serializable run report.
"""

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from . import __version__, config
from .design import (
    Dataset,
    InstrumentDesign,
    SourceEntry,
    SupportReport,
    auto_orient,
    build_gamma,
    discretize_instrument,
    support_report,
    two_instrument_group_bounds,
    vm_propensity_test,
)
from .errors import InputError, SingularDesignError
from .estimation import (
    EstimandSpec,
    ate_bounds,
    cdf_treatment_effects,
    estimate,
    estimate_h,
    lambda_for,
    potential_outcome_means,
    quantile_treatment_effects,
)

log = logging.getLogger(__name__)

QUANTILE_TAUS = (0.1, 0.25, 0.5, 0.75, 0.9)


# =========================
# GRAMMAR
# =========================
@dataclass(frozen=True)
class DiscretizeRule:
    column: str
    cuts: Tuple[float, ...]
    direction: int = -1

    def to_text(self) -> str:
        side = "below" if self.direction == -1 else "above"
        return f"{self.column}:{','.join(repr(c) for c in self.cuts)}:{side}"


def parse_discretize(text: str) -> DiscretizeRule:
    """`col:c1,c2[:below|:above]`; the indicator is 1 below the cut unless `above`."""
    parts = text.strip().split(":")
    if len(parts) not in (2, 3) or not parts[0] or not parts[1]:
        raise InputError(f"bad discretize rule {text!r}; expected col:cut1,cut2[:below|above]")
    try:
        cuts = tuple(float(c) for c in parts[1].split(","))
    except ValueError as exc:
        raise InputError(f"bad cut points in {text!r}") from exc
    direction = -1
    if len(parts) == 3:
        side = parts[2].strip().lower()
        if side not in ("below", "above"):
            raise InputError(f"discretize direction must be below or above, got {parts[2]!r}")
        direction = -1 if side == "below" else 1
    return DiscretizeRule(parts[0].strip(), cuts, direction)


def _int_list(text: str, what: str) -> Tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise InputError(f"bad {what} list {text!r}") from exc


def parse_estimand(text: str, J: Optional[int] = None) -> EstimandSpec:
    """acl | slate:1,3 | slatt:.. | slatu:.. | pte:2@z1=0,z3=1 | custom:w1,w2,..."""
    text = text.strip()
    kind, _, rest = text.partition(":")
    kind = kind.lower()
    if kind == "acl":
        if rest:
            raise InputError("acl takes no arguments")
        spec = EstimandSpec(kind="acl")
    elif kind in ("slate", "slatt", "slatu"):
        spec = EstimandSpec(kind=kind, target=tuple(sorted(set(_int_list(rest, "instrument")))))
        if not spec.target:
            raise InputError(f"{kind} needs a nonempty instrument set, e.g. {kind}:1,2")
    elif kind == "pte":
        head, _, ctx = rest.partition("@")
        try:
            j = int(head)
        except ValueError as exc:
            raise InputError(f"bad instrument in {text!r}") from exc
        context = []
        for item in filter(None, (c.strip() for c in ctx.split(","))):
            name, eq, value = item.partition("=")
            if not eq or not name.lower().startswith("z"):
                raise InputError(f"bad context entry {item!r}; expected zK=0 or zK=1")
            try:
                context.append((int(name[1:]), int(value)))
            except ValueError as exc:
                raise InputError(f"bad context entry {item!r}") from exc
        spec = EstimandSpec(kind="pte", instrument=j, context=tuple(sorted(context)))
    elif kind == "custom":
        try:
            weights = tuple(float(w) for w in rest.split(","))
        except ValueError as exc:
            raise InputError(f"bad custom weights {rest!r}") from exc
        spec = EstimandSpec(kind="custom", weights=weights)
    else:
        raise InputError(f"unknown estimand {text!r}")
    if J is not None:
        spec.validate(InstrumentDesign.full(J))
    return spec


def parse_regularize(text: str) -> Tuple[str, float]:
    text = text.strip().lower()
    if text in ("none", "auto"):
        return text, 0.0
    if text.startswith("alpha="):
        try:
            alpha = float(text[6:])
        except ValueError as exc:
            raise InputError(f"bad regularization {text!r}") from exc
        if not math.isfinite(alpha) or alpha < 0:
            raise InputError("regularization alpha must be a nonnegative number")
        return "fixed", alpha
    raise InputError(f"bad regularization {text!r}; expected none, auto or alpha=<x>")


def parse_se(text: str) -> Tuple[str, int]:
    text = text.strip().lower()
    if text in ("none", "sandwich"):
        return text, 0
    if text.startswith("bootstrap"):
        _, _, reps = text.partition(":")
        try:
            B = int(reps) if reps else 500
        except ValueError as exc:
            raise InputError(f"bad bootstrap count in {text!r}") from exc
        return "bootstrap", B
    raise InputError(f"bad variance option {text!r}; expected none, sandwich or bootstrap:<B>")


# =========================
# CONFIG
# =========================
@dataclass
class RunConfig:
    data: str
    outcome: str
    treatment: str
    instruments: Tuple[str, ...] = ()
    controls: Tuple[str, ...] = ()
    discretize: Tuple[DiscretizeRule, ...] = ()
    estimands: Tuple[str, ...] = ("acl",)
    regularize: str = "auto"
    se: str = "sandwich"
    seed: int = 0
    auto_orient: bool = False
    ylo: Optional[float] = None
    yhi: Optional[float] = None
    cdf_grid: int = 0

    def __post_init__(self):
        self.instruments = tuple(self.instruments)
        self.controls = tuple(self.controls)
        self.discretize = tuple(
            r if isinstance(r, DiscretizeRule) else parse_discretize(r) for r in self.discretize
        )
        self.estimands = tuple(self.estimands)
        if not self.instruments and not self.discretize:
            raise InputError("no instruments given; use --instruments or --discretize")
        if not self.estimands:
            raise InputError("no estimand requested")
        if (self.ylo is None) != (self.yhi is None):
            raise InputError("outcome bounds need both --ylo and --yhi")
        if self.cdf_grid < 0:
            raise InputError("CDF grid size must be nonnegative")
        parse_regularize(self.regularize)
        parse_se(self.se)

    @property
    def instrument_names(self) -> List[str]:
        names = list(self.instruments)
        for rule in self.discretize:
            side = "lt" if rule.direction == -1 else "ge"
            names.extend(f"{rule.column}_{side}_{c:g}" for c in rule.cuts)
        return names

    def specs(self) -> List[EstimandSpec]:
        mode, alpha = parse_regularize(self.regularize)
        variance, reps = parse_se(self.se)
        return [
            replace(
                parse_estimand(text),
                regularization=mode, alpha=alpha, variance=variance,
                bootstrap_reps=reps, seed=self.seed,
            )
            for text in self.estimands
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["instruments"] = list(self.instruments)
        d["controls"] = list(self.controls)
        d["discretize"] = [r.to_text() for r in self.discretize]
        d["estimands"] = list(self.estimands)
        return d

    @classmethod
    def from_report(cls, report: dict) -> "RunConfig":
        try:
            echo = dict(report["config"])
        except (KeyError, TypeError) as exc:
            raise InputError("report has no config echo") from exc
        known = set(cls.__dataclass_fields__)
        unknown = set(echo) - known
        if unknown:
            raise InputError(f"unknown config keys {sorted(unknown)}")
        return cls(**echo)


# =========================
# INGESTION
# =========================
def _bad_rows(mask: np.ndarray, limit: int = 10) -> str:
    rows = np.flatnonzero(mask)[:limit].tolist()
    more = "" if mask.sum() <= limit else f" (+{int(mask.sum()) - limit} more)"
    return f"{rows}{more}"


def ingest_csv(path: str, cfg: RunConfig) -> Tuple[Dataset, InstrumentDesign, List[int]]:
    """Read and validate the data; returns the dataset, its design and any flipped instruments."""
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc

    needed = [cfg.outcome, cfg.treatment, *cfg.instruments, *cfg.controls, *(r.column for r in cfg.discretize)]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise InputError(f"columns not found in {path}: {missing}")
    if cfg.outcome == cfg.treatment:
        raise InputError("outcome and treatment must be different columns")

    for col in dict.fromkeys(needed):
        vals = pd.to_numeric(df[col], errors="coerce")
        bad = vals.isna().to_numpy()
        if bad.any():
            raise InputError(f"column {col!r} has missing or non-numeric values at rows {_bad_rows(bad)}")
        df[col] = vals

    for col in (cfg.treatment, *cfg.instruments):
        bad = ~df[col].isin((0, 1)).to_numpy()
        if bad.any():
            raise InputError(f"column {col!r} must be 0/1; offending rows {_bad_rows(bad)}")

    blocks = [df[list(cfg.instruments)].to_numpy(dtype=np.int64)] if cfg.instruments else []
    sources: List[Optional[SourceEntry]] = [None] * len(cfg.instruments)
    for rule in cfg.discretize:
        Zr, entries = discretize_instrument(df[rule.column].to_numpy(), rule.cuts, rule.direction, rule.column)
        blocks.append(Zr)
        sources.extend(entries)
    Z = np.column_stack(blocks)

    flipped: List[int] = []
    D = df[cfg.treatment].to_numpy(dtype=float)
    if cfg.auto_orient:
        Z, flipped = auto_orient(Z, D)

    X = df[list(cfg.controls)].to_numpy(dtype=float) if cfg.controls else None
    names = tuple(cfg.instrument_names)
    dataset = Dataset(df[cfg.outcome].to_numpy(dtype=float), D, Z, X, names)
    if any(s is not None for s in sources):
        design = InstrumentDesign.from_sources(dataset.J, sources, names)
    else:
        design = InstrumentDesign.full(dataset.J, names)
    return dataset, design, flipped


# =========================
# PIPELINE
# =========================
def _header(command: str, cfg: Optional[RunConfig]) -> dict:
    return {
        "schema": config.REPORT_SCHEMA,
        "tool_version": __version__,
        "created_at": datetime.utcnow().isoformat(timespec="seconds") + "Z",
        "command": command,
        "config": cfg.to_dict() if cfg is not None else None,
    }


def _diagnostics(dataset: Dataset, design: InstrumentDesign) -> Tuple[dict, SupportReport]:
    support = support_report(dataset.Z, design.family, design.sources)
    vm = vm_propensity_test(dataset.D, dataset.Z, dataset.X)
    out = {
        "design": design.to_dict(),
        "support": support.to_dict(design.J),
        "vm_test": [v.to_dict() for v in vm],
    }
    if design.J == 2:
        cells = dataset.Z[:, 0] + 2 * dataset.Z[:, 1]
        if all((cells == z).any() for z in range(4)):
            table = [float(dataset.D[cells == z].mean()) for z in range(4)]
            out["group_bounds"] = two_instrument_group_bounds(table).to_dict()
    return out, support


def diagnose(cfg: RunConfig) -> dict:
    dataset, design, flipped = ingest_csv(cfg.data, cfg)
    report = _header("diagnose", cfg)
    diag, support = _diagnostics(dataset, design)
    report.update({"n": dataset.n, "J": dataset.J, "flipped_instruments": flipped, **diag})
    report["warnings"] = list(support.warnings) + (["INSTRUMENT_AUTO_ORIENTED"] if flipped else [])
    return report


def _distributional(dataset: Dataset, design: InstrumentDesign, spec: EstimandSpec, K: int) -> dict:
    if dataset.X is not None:
        raise InputError("distributional effects are unavailable with controls")
    grid = np.unique(np.quantile(dataset.Y, np.linspace(0.0, 1.0, K)))
    G = build_gamma(dataset.Z, design.family)
    h = estimate_h(G, lambda_for(spec, dataset.Z, design.family))
    cdf = cdf_treatment_effects(dataset.Y, dataset.D, h, grid)
    mu1, mu0 = potential_outcome_means(dataset.Y, dataset.D, h)
    return {
        "estimand": spec.label(),
        "means": {"y1": mu1, "y0": mu0},
        "cdf": cdf.to_records(),
        "quantiles": quantile_treatment_effects(cdf, QUANTILE_TAUS),
    }


def run(cfg: RunConfig) -> dict:
    """Diagnose, then estimate every requested parameter."""
    dataset, design, flipped = ingest_csv(cfg.data, cfg)
    specs = cfg.specs()
    for spec in specs:
        spec.validate(design)

    report = _header("estimate", cfg)
    diag, support = _diagnostics(dataset, design)
    report.update({"n": dataset.n, "J": dataset.J, "flipped_instruments": flipped, **diag})
    warnings = list(support.warnings)
    if flipped:
        warnings.append("INSTRUMENT_AUTO_ORIENTED")
    if not support.full_rank and all(s.regularization == "none" for s in specs):
        raise SingularDesignError(
            f"product regressors have rank {support.rank} < {support.size}",
            support.recommended_family,
        )

    estimates = []
    for spec in specs:
        res = estimate(spec, dataset, design)
        log.info("%s = %.6g (share %.4g)", res.estimand, res.point, res.complier_share)
        estimates.append(res.to_dict())
        warnings.extend(w for w in res.warnings if w not in warnings)
    report["estimates"] = estimates

    if cfg.ylo is not None:
        report["bounds"] = ate_bounds(dataset.Y, dataset.D, dataset.Z, cfg.ylo, cfg.yhi, design.family).to_dict()
    if cfg.cdf_grid:
        report["distributional"] = _distributional(dataset, design, specs[0], cfg.cdf_grid)
    report["warnings"] = warnings
    return report


# =========================
# SERIALIZATION
# =========================
def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def canonical_report(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "created_at"}


_FLOAT_TAG = "\x00"
_TAGGED_FLOAT = re.compile(r'"\\u0000([^"\\]+)\\u0000"')


def format_float(x: float) -> str:
    """17 significant digits, always readable back as a float."""
    text = format(x, ".17g")
    return text if any(c in text for c in ".en") else text + ".0"


def _tag_floats(obj):
    if isinstance(obj, dict):
        return {k: _tag_floats(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_tag_floats(v) for v in obj]
    if isinstance(obj, float):
        return _FLOAT_TAG + format_float(obj) + _FLOAT_TAG
    return obj


def dumps_report(report: dict, canonical: bool = False) -> str:
    """JSON text with 17-significant-digit floats; non-finite values become null."""
    body = canonical_report(report) if canonical else report
    text = json.dumps(_tag_floats(jsonable(body)), indent=2, sort_keys=True)
    return _TAGGED_FLOAT.sub(r"\1", text)


def estimates_frame(report: dict) -> pd.DataFrame:
    rows = []
    for e in report.get("estimates", []):
        ci = e.get("ci95") or [None, None]
        rows.append({
            "estimand": e["estimand"], "point": e["point"], "se": e["se"],
            "ci_low": ci[0], "ci_high": ci[1], "complier_share": e["complier_share"],
            "alpha": e["alpha"], "n": e["n"], "warnings": ";".join(e.get("warnings", [])),
        })
    return pd.DataFrame(rows, columns=["estimand", "point", "se", "ci_low", "ci_high", "complier_share", "alpha", "n", "warnings"])


def write_csv(report: dict, path: str) -> List[str]:
    """Estimate table at `path`; CDF and VM-test tables beside it when present."""
    out = Path(path)
    written = [str(out)]
    estimates_frame(report).to_csv(out, index=False, float_format="%.17g")
    if report.get("vm_test"):
        side = out.with_name(out.stem + "_vm_test.csv")
        pd.DataFrame(report["vm_test"]).assign(context=lambda f: f["context"].map(json.dumps)).to_csv(
            side, index=False, float_format="%.17g")
        written.append(str(side))
    if report.get("distributional"):
        side = out.with_name(out.stem + "_cdf.csv")
        pd.DataFrame(report["distributional"]["cdf"]).to_csv(side, index=False, float_format="%.17g")
        written.append(str(side))
    return written
