import json
from datetime import datetime
from typing import Optional

from sqlalchemy import Column, Integer, String, DateTime, Float, Text, ForeignKey
from sqlalchemy.orm import relationship, Session

from .db import Base
from .errors import InputError


class RunRecord(Base):
    """One finished diagnose/estimate run with its full report."""
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    created_at = Column(DateTime, nullable=False, default=datetime.utcnow)

    command = Column(String, index=True, nullable=False)
    tool_version = Column(String, nullable=False)
    data_path = Column(String, nullable=True)
    n = Column(Integer, nullable=True)
    J = Column(Integer, nullable=True)

    config_json = Column(Text, nullable=True)
    report_json = Column(Text, nullable=False)

    estimates = relationship("EstimateRecord", back_populates="run", cascade="all, delete-orphan")


class EstimateRecord(Base):
    __tablename__ = "estimates"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), index=True, nullable=False)

    estimand = Column(String, index=True, nullable=False)
    point = Column(Float, nullable=True)
    se = Column(Float, nullable=True)
    ci_low = Column(Float, nullable=True)
    ci_high = Column(Float, nullable=True)
    complier_share = Column(Float, nullable=True)
    alpha = Column(Float, nullable=True)
    n = Column(Integer, nullable=True)

    run = relationship("RunRecord", back_populates="estimates")


def save_report(db: Session, report: dict) -> RunRecord:
    from .report import dumps_report

    cfg = report.get("config") or {}
    rec = RunRecord(
        command=report.get("command", "estimate"),
        tool_version=report.get("tool_version", ""),
        data_path=cfg.get("data"),
        n=report.get("n"),
        J=report.get("J"),
        config_json=json.dumps(cfg, sort_keys=True) if cfg else None,
        report_json=dumps_report(report),
    )
    for e in report.get("estimates", []):
        ci = e.get("ci95") or [None, None]
        rec.estimates.append(EstimateRecord(
            estimand=e["estimand"],
            point=e.get("point"),
            se=e.get("se"),
            ci_low=ci[0],
            ci_high=ci[1],
            complier_share=e.get("complier_share"),
            alpha=e.get("alpha"),
            n=e.get("n"),
        ))
    db.add(rec)
    db.commit()
    db.refresh(rec)
    return rec


def load_report(db: Session, run_id: int) -> Optional[dict]:
    rec = db.query(RunRecord).filter(RunRecord.id == run_id).first()
    if not rec:
        return None
    try:
        report = json.loads(rec.report_json)
    except json.JSONDecodeError as exc:
        raise InputError(f"stored report {run_id} is not valid JSON") from exc
    report["run_id"] = rec.id
    return report
