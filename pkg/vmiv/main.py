import io
import os
import tempfile
from typing import List, Optional

from fastapi import FastAPI, Request, Depends, Form, UploadFile, File, Query
from fastapi.responses import JSONResponse, PlainTextResponse, StreamingResponse

from sqlalchemy.orm import Session

from . import __version__
from .combinatorics import count_compliance_groups, enumerate_compliance_groups, group_label
from .db import get_db, init_db
from .errors import InputError, SingularDesignError, VmivError, WeakIdentificationError
from .models import RunRecord, save_report, load_report
from .pdf_utils import build_report_pdf
from .report import RunConfig, diagnose, run, jsonable


# =========================
# APP
# =========================
app = FastAPI(title="vmiv", version=__version__)


@app.on_event("startup")
def on_startup():
    init_db()


@app.exception_handler(VmivError)
def vmiv_error_handler(request: Request, exc: VmivError):
    status = 400 if isinstance(exc, InputError) else 422
    body = {"error": type(exc).__name__, "detail": str(exc)}
    if isinstance(exc, SingularDesignError) and exc.suggested_family is not None:
        body["suggested_family"] = exc.suggested_family
    if isinstance(exc, WeakIdentificationError):
        body["share"] = exc.share
        body["t_stat"] = exc.t_stat
    return JSONResponse(jsonable(body), status_code=status)


# =========================
# UTIL
# =========================
def _split(s: str) -> List[str]:
    return [t.strip() for t in (s or "").split(",") if t.strip()]


def _config_from_form(
    path: str,
    outcome: str,
    treatment: str,
    instruments: str,
    controls: str,
    discretize: str,
    estimand: str,
    regularize: str,
    se: str,
    seed: int,
    auto_orient: bool,
    ylo: Optional[float],
    yhi: Optional[float],
    cdf_grid: int,
) -> RunConfig:
    rules = [r.strip() for r in (discretize or "").split(";") if r.strip()]
    estimands = [e.strip() for e in (estimand or "acl").split(";") if e.strip()]
    return RunConfig(
        data=path,
        outcome=outcome.strip(),
        treatment=treatment.strip(),
        instruments=tuple(_split(instruments)),
        controls=tuple(_split(controls)),
        discretize=tuple(rules),
        estimands=tuple(estimands),
        regularize=regularize,
        se=se,
        seed=seed,
        auto_orient=auto_orient,
        ylo=ylo,
        yhi=yhi,
        cdf_grid=cdf_grid,
    )


async def _spool(upload: UploadFile) -> str:
    data = await upload.read()
    if not data:
        raise InputError("uploaded file is empty")
    fd, path = tempfile.mkstemp(suffix=".csv")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    return path


def _run_dict(r: RunRecord) -> dict:
    return {
        "id": r.id,
        "created_at": r.created_at.isoformat() if r.created_at else None,
        "command": r.command,
        "tool_version": r.tool_version,
        "data_path": r.data_path or "",
        "n": r.n,
        "J": r.J,
        "estimates": [
            {"estimand": e.estimand, "point": e.point, "se": e.se, "complier_share": e.complier_share}
            for e in r.estimates
        ],
    }


# =========================
# HEALTH
# =========================
@app.get("/__ping")
def __ping():
    return {"ok": True, "version": __version__}


# =========================
# COMBINATORICS
# =========================
@app.get("/enumerate", response_class=PlainTextResponse)
def enumerate_groups(j: int = Query(..., ge=1), count_only: bool = False):
    if count_only:
        return f"{count_compliance_groups(j)}\n"
    return "".join(f"{group_label(g)}\n" for g in enumerate_compliance_groups(j))


# =========================
# ESTIMATION
# =========================
async def _run_upload(command, file, db, save, **fields):
    path = await _spool(file)
    try:
        cfg = _config_from_form(path, **fields)
        report = diagnose(cfg) if command == "diagnose" else run(cfg)
    finally:
        os.unlink(path)
    report["config"]["data"] = file.filename or "upload.csv"
    if save:
        report["run_id"] = save_report(db, report).id
    return JSONResponse(jsonable(report))


@app.post("/diagnose")
async def diagnose_upload(
    db: Session = Depends(get_db),
    file: UploadFile = File(...),
    outcome: str = Form(...),
    treatment: str = Form(...),
    instruments: str = Form(""),
    controls: str = Form(""),
    discretize: str = Form(""),
    auto_orient: bool = Form(False),
):
    return await _run_upload(
        "diagnose", file, db, False,
        outcome=outcome, treatment=treatment, instruments=instruments, controls=controls,
        discretize=discretize, estimand="acl", regularize="none", se="none", seed=0,
        auto_orient=auto_orient, ylo=None, yhi=None, cdf_grid=0,
    )


@app.post("/estimate")
async def estimate_upload(
    db: Session = Depends(get_db),
    file: UploadFile = File(...),
    outcome: str = Form(...),
    treatment: str = Form(...),
    instruments: str = Form(""),
    controls: str = Form(""),
    discretize: str = Form(""),
    estimand: str = Form("acl"),
    regularize: str = Form("auto"),
    se: str = Form("sandwich"),
    seed: int = Form(0),
    auto_orient: bool = Form(False),
    ylo: Optional[float] = Form(None),
    yhi: Optional[float] = Form(None),
    cdf_grid: int = Form(0),
):
    return await _run_upload(
        "estimate", file, db, True,
        outcome=outcome, treatment=treatment, instruments=instruments, controls=controls,
        discretize=discretize, estimand=estimand, regularize=regularize, se=se, seed=seed,
        auto_orient=auto_orient, ylo=ylo, yhi=yhi, cdf_grid=cdf_grid,
    )


# =========================
# RUN HISTORY
# =========================
@app.get("/runs")
def runs_list(db: Session = Depends(get_db), limit: int = 50):
    runs = db.query(RunRecord).order_by(RunRecord.id.desc()).limit(limit).all()
    return [_run_dict(r) for r in runs]


@app.get("/runs/{run_id}")
def run_view(run_id: int, db: Session = Depends(get_db)):
    report = load_report(db, run_id)
    if report is None:
        return JSONResponse({"error": "NotFound", "detail": f"run {run_id} not found"}, status_code=404)
    return report


@app.get("/runs/{run_id}/pdf")
def run_pdf(run_id: int, db: Session = Depends(get_db)):
    report = load_report(db, run_id)
    if report is None:
        return JSONResponse({"error": "NotFound", "detail": f"run {run_id} not found"}, status_code=404)

    pdf_bytes = build_report_pdf(report)
    filename = f"vmiv_run_{run_id}.pdf"
    return StreamingResponse(io.BytesIO(pdf_bytes), media_type="application/pdf", headers={
        "Content-Disposition": f'inline; filename="{filename}"'
    })
