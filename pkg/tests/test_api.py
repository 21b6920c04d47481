import pytest
from fastapi.testclient import TestClient

from vmiv.db import SessionLocal, init_db
from vmiv.main import app
from vmiv.models import EstimateRecord, RunRecord, load_report, save_report
from vmiv import config
from vmiv.pdf_utils import build_report_pdf, report_font
from vmiv.report import RunConfig, run


@pytest.fixture
def client():
    with TestClient(app) as c:
        yield c


def _post(client, route, path, **form):
    with open(path, "rb") as fh:
        return client.post(route, files={"file": ("sample.csv", fh, "text/csv")}, data=form)


def test_ping(client):
    r = client.get("/__ping")
    assert r.status_code == 200
    assert r.json()["ok"] is True


def test_enumerate(client):
    r = client.get("/enumerate", params={"j": 3, "count_only": True})
    assert r.text.strip() == "20"
    r = client.get("/enumerate", params={"j": 1})
    assert r.text.splitlines() == ["never-taker", "always-taker", "{{1}}"]


def test_estimate_persists_run(client, dgp1_csv):
    r = _post(client, "/estimate", dgp1_csv, outcome="y", treatment="d", instruments="z1,z2,z3",
              estimand="acl;slate:1,2", se="none")
    assert r.status_code == 200
    body = r.json()
    assert [e["estimand"] for e in body["estimates"]] == ["acl", "slate:1,2"]
    assert body["config"]["data"] == "sample.csv"
    run_id = body["run_id"]

    listed = client.get("/runs").json()
    assert any(item["id"] == run_id and len(item["estimates"]) == 2 for item in listed)

    stored = client.get(f"/runs/{run_id}").json()
    assert stored["estimates"][0]["point"] == body["estimates"][0]["point"]

    pdf = client.get(f"/runs/{run_id}/pdf")
    assert pdf.status_code == 200
    assert pdf.headers["content-type"] == "application/pdf"
    assert pdf.content.startswith(b"%PDF")


def test_diagnose(client, dgp1_csv):
    r = _post(client, "/diagnose", dgp1_csv, outcome="y", treatment="d", instruments="z1,z2")
    assert r.status_code == 200
    body = r.json()
    assert body["command"] == "diagnose"
    assert "run_id" not in body
    assert len(body["vm_test"]) == 4


def test_bad_column_is_client_error(client, dgp1_csv):
    r = _post(client, "/estimate", dgp1_csv, outcome="y", treatment="d", instruments="z1,nope")
    assert r.status_code == 400
    assert r.json()["error"] == "InputError"


def test_weak_identification_is_unprocessable(client, weak_csv):
    r = _post(client, "/estimate", weak_csv, outcome="y", treatment="d", instruments="z1,z2", regularize="none")
    assert r.status_code == 422
    assert r.json()["error"] == "WeakIdentificationError"


def test_missing_run(client):
    assert client.get("/runs/999999").status_code == 404
    assert client.get("/runs/999999/pdf").status_code == 404


def test_save_and_load_report(dgp1_csv):
    init_db()
    report = run(RunConfig(data=dgp1_csv, outcome="y", treatment="d", instruments=("z1", "z2", "z3"), se="none"))
    db = SessionLocal()
    try:
        rec = save_report(db, report)
        assert rec.command == "estimate"
        assert rec.J == 3
        rows = db.query(EstimateRecord).filter(EstimateRecord.run_id == rec.id).all()
        assert [e.estimand for e in rows] == ["acl"]
        assert rows[0].se is None

        loaded = load_report(db, rec.id)
        assert loaded["run_id"] == rec.id
        assert loaded["estimates"][0]["point"] == report["estimates"][0]["point"]
        assert load_report(db, rec.id + 1000) is None

        db.delete(db.get(RunRecord, rec.id))
        db.commit()
        assert db.query(EstimateRecord).filter(EstimateRecord.run_id == rec.id).count() == 0
    finally:
        db.close()


def test_pdf_of_report_with_bounds(dgp1_csv):
    cfg = RunConfig(data=dgp1_csv, outcome="y", treatment="d", instruments=("z1", "z2"), ylo=0.0, yhi=41.0)
    pdf = build_report_pdf(run(cfg))
    assert pdf.startswith(b"%PDF")
    assert len(pdf) > 1000


def test_unreadable_font_falls_back(tmp_path, monkeypatch, caplog):
    bogus = tmp_path / "bogus.ttf"
    bogus.write_bytes(b"not a font")
    monkeypatch.setattr(config, "PDF_FONT", str(bogus))
    report_font.cache_clear()
    try:
        assert report_font() in ("ReportSans", "Helvetica")
        assert "unusable" in caplog.text
    finally:
        report_font.cache_clear()
