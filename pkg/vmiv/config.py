import os

from dotenv import load_dotenv

load_dotenv()


# =========================
# CONFIG
# =========================
def _int_env(name: str, default: int) -> int:
    raw = os.getenv(name, "").strip()
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        return default


THREADS = _int_env("VMIV_THREADS", os.cpu_count() or 1)

DATABASE_URL = os.getenv("DATABASE_URL", "").strip() or "sqlite:///./vmiv.db"

LOG_LEVEL = os.getenv("VMIV_LOG_LEVEL", "").strip().upper() or "WARNING"

# TTF used for PDF reports; system DejaVu or Helvetica when unset
PDF_FONT = os.getenv("VMIV_PDF_FONT", "").strip()


# =========================
# NUMERICS
# =========================
WEAK_SHARE_FLOOR = 1e-3
WEAK_T_FLOOR = 2.0

RANK_RTOL = 1e-8
ROWSPACE_ATOL = 1e-9

ALPHA_GRID_POINTS = 60
ALPHA_GRID_SPAN = (1e-6, 1e4)
ALPHA_XTOL = 1e-4

MAX_J = 16

REPORT_SCHEMA = "vmiv-report/1"
