import io
import json
import logging
from datetime import datetime
from functools import lru_cache
from pathlib import Path

from reportlab.pdfgen import canvas
from reportlab.lib.pagesizes import A4
from reportlab.pdfbase import pdfmetrics
from reportlab.pdfbase.ttfonts import TTFError, TTFont

from . import config

log = logging.getLogger(__name__)

_DEJAVU = ("truetype/dejavu/DejaVuSans.ttf", "dejavu/DejaVuSans.ttf")


@lru_cache(maxsize=None)
def report_font() -> str:
    """Font name for report text: a configured or system TTF, else Helvetica."""
    paths = [config.PDF_FONT] if config.PDF_FONT else []
    paths += [str(Path("/usr/share/fonts") / rel) for rel in _DEJAVU]
    for path in paths:
        if not Path(path).is_file():
            continue
        try:
            pdfmetrics.registerFont(TTFont("ReportSans", path))
        except TTFError as exc:
            log.warning("PDF font %s unusable: %s", path, exc)
            continue
        return "ReportSans"
    return "Helvetica"


def _fmt_num(v, digits: int = 4) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.{digits}g}"
    return str(v)


def _fmt_ctx(ctx) -> str:
    if isinstance(ctx, dict):
        return ",".join(f"{k}={v}" for k, v in ctx.items())
    return str(ctx)


def build_report_pdf(report: dict) -> bytes:
    """One-document summary of a run report: config echo, estimates, support, VM test."""
    font = report_font()
    buf = io.BytesIO()
    c = canvas.Canvas(buf, pagesize=A4)
    w, h = A4

    c.setTitle("vmiv report")

    x = 40
    y = h - 50

    def need(space: float = 0.0):
        nonlocal y
        if y - space < 70:
            c.showPage()
            c.setFont(font, 9)
            y = h - 60

    def rule():
        nonlocal y
        c.line(x, y, w - x, y)
        y -= 16

    c.setFont(font, 14)
    c.drawString(x, y, f"vmiv {report.get('command', '')} report")
    y -= 18

    c.setFont(font, 9)
    c.drawString(x, y, f"Schema: {report.get('schema', '')}   Version: {report.get('tool_version', '')}")
    y -= 12
    c.drawString(x, y, f"Run: {report.get('created_at', '')}   n = {report.get('n', '')}   J = {report.get('J', '')}")
    y -= 12
    if report.get("run_id") is not None:
        c.drawString(x, y, f"Run id: {report['run_id']}")
        y -= 12

    y -= 6
    c.setLineWidth(0.8)
    rule()

    cfg = report.get("config") or {}
    if cfg:
        c.setFont(font, 11)
        c.drawString(x, y, "CONFIGURATION")
        y -= 16
        c.setFont(font, 8)
        for key in sorted(cfg):
            need()
            text = f"{key}: {json.dumps(cfg[key])}"
            c.drawString(x, y, text[:110])
            y -= 11
        y -= 8

    estimates = report.get("estimates") or []
    if estimates:
        need(40)
        c.setFont(font, 11)
        c.drawString(x, y, "ESTIMATES")
        y -= 10
        rule()
        c.setFont(font, 9)
        c.drawString(x, y, "Estimand")
        c.drawString(x + 150, y, "Point")
        c.drawString(x + 220, y, "SE")
        c.drawString(x + 290, y, "95% CI")
        c.drawString(x + 400, y, "Share")
        c.drawString(x + 460, y, "alpha")
        y -= 12
        rule()
        for e in estimates:
            need()
            ci = e.get("ci95") or [None, None]
            c.drawString(x, y, str(e.get("estimand", ""))[:28])
            c.drawString(x + 150, y, _fmt_num(e.get("point")))
            c.drawString(x + 220, y, _fmt_num(e.get("se")))
            c.drawString(x + 290, y, f"[{_fmt_num(ci[0])}, {_fmt_num(ci[1])}]")
            c.drawString(x + 400, y, _fmt_num(e.get("complier_share")))
            c.drawString(x + 460, y, _fmt_num(e.get("alpha")))
            y -= 12
            if e.get("warnings"):
                c.setFont(font, 8)
                c.drawString(x + 18, y, f"Warnings: {', '.join(e['warnings'])}"[:100])
                c.setFont(font, 9)
                y -= 12
        y -= 8

    bounds = report.get("bounds")
    if bounds:
        need(60)
        c.setFont(font, 11)
        c.drawString(x, y, "BOUNDS")
        y -= 16
        c.setFont(font, 9)
        for key in ("ate", "att", "atu"):
            lo, hi = bounds[key]
            c.drawString(x, y, f"{key.upper()}: [{_fmt_num(lo)}, {_fmt_num(hi)}]")
            y -= 12
        y -= 8

    support = report.get("support")
    if support:
        need(60)
        c.setFont(font, 11)
        c.drawString(x, y, "SUPPORT")
        y -= 16
        c.setFont(font, 9)
        c.drawString(x, y, f"Rank {support.get('rank')} of {support.get('size')}   "
                           f"min singular value {_fmt_num(support.get('min_singular_value'))}   "
                           f"assumption {support.get('assumption')}")
        y -= 12
        empty = [cell for cell in support.get("cell_counts", []) if cell["count"] == 0]
        if empty:
            c.drawString(x, y, f"Empty cells: {len(empty)}")
            y -= 12
        y -= 8

    vm = report.get("vm_test") or []
    if vm:
        need(40)
        c.setFont(font, 11)
        c.drawString(x, y, "MONOTONICITY CHECKS (propensity differences)")
        y -= 10
        rule()
        c.setFont(font, 9)
        c.drawString(x, y, "Instrument")
        c.drawString(x + 70, y, "Context")
        c.drawString(x + 300, y, "Delta")
        c.drawString(x + 370, y, "SE")
        c.drawString(x + 440, y, "t")
        y -= 12
        rule()
        for row in vm:
            need()
            c.drawString(x, y, str(row.get("instrument")))
            c.drawString(x + 70, y, _fmt_ctx(row.get("context"))[:40])
            c.drawString(x + 300, y, _fmt_num(row.get("delta"), 3))
            c.drawString(x + 370, y, _fmt_num(row.get("se"), 3))
            c.drawString(x + 440, y, _fmt_num(row.get("t_stat"), 3))
            y -= 12

    warnings = report.get("warnings") or []
    if warnings:
        need(30)
        y -= 8
        c.setFont(font, 9)
        c.drawString(x, y, f"Warnings: {', '.join(warnings)}"[:110])

    c.setFont(font, 8)
    c.drawString(x, 40, f"Generated: {datetime.now().strftime('%d/%m/%Y %H:%M')}")

    c.save()
    return buf.getvalue()
