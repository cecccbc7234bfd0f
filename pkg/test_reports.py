import json
import math

import pandas as pd
import pytest
from pydantic import ValidationError

from backend.metrics import MetricReport
from backend.reports import ExperimentReport, Provenance, ReportRow, ReportWriter, load_report


def row(image_id="img", model_id="m", condition="clean", **kwargs):
    values = dict(bpp=0.5, psnr_db=30.0, ms_ssim=0.95, mse=1e-3)
    values.update(kwargs)
    return ReportRow(image_id=image_id, model_id=model_id, condition=condition, **values)


def sample_report():
    report = ExperimentReport(
        experiment_id="sample",
        provenance=Provenance(spec={"epsilon": 1e-3, "lambda_bkg": math.inf}, seeds={"attack": 0}),
    )
    report.append_row(row(tags={"lmbda": 1024.0}))
    report.append_row(row(condition="attacked", psnr_db=18.0, budget_satisfied=False,
                          tags={"lmbda": 1024.0}, extra={"input_psnr_db": 42.0}))
    report.append_row(row(model_id="other", psnr_db=math.inf, tags={"lmbda": 64.0}))
    return report


def test_psnr_sentinel():
    assert row(psnr_db=math.inf).psnr_db == 100.0
    assert row(psnr_db=25.0).psnr_db == 25.0


def test_non_finite_tags_are_text():
    r = row(tags={"lambda_bkg": math.inf}, extra={"value": math.nan})
    assert r.tags["lambda_bkg"] == "inf"
    assert r.extra["value"] == "nan"


def test_row_rejects_unknown_fields():
    with pytest.raises(ValidationError):
        row(colour="red")


def test_from_metrics():
    metrics = MetricReport(psnr_db=math.inf, ms_ssim=1.0, mse=0.0, bpp=0.25)
    r = ReportRow.from_metrics(metrics, "img", "m", "clean", tags={"lmbda": 1.0})
    assert r.psnr_db == 100.0 and r.bpp == 0.25 and r.budget_satisfied


def test_json_is_stable():
    report = sample_report()
    text = report.to_json()
    assert text.endswith("\n")
    assert ExperimentReport.from_json(text).to_json() == text
    payload = json.loads(text)
    assert list(payload) == sorted(payload)
    assert payload["provenance"]["spec"]["lambda_bkg"] == "inf"


def test_frame_columns():
    frame = sample_report().to_frame()
    assert len(frame) == 3
    assert {"tag_lmbda", "extra_input_psnr_db", "psnr_db", "budget_satisfied"} <= set(frame.columns)


def test_summary_groups():
    summary = sample_report().summary()
    assert len(summary) == 3
    assert set(summary.columns) >= {"model_id", "condition", "bpp", "psnr_db"}
    assert ExperimentReport(experiment_id="empty").summary().empty


def test_select_matches_fields_and_tags():
    report = sample_report()
    assert len(report.select(condition="clean")) == 2
    assert len(report.select(lmbda=64.0)) == 1
    assert len(report.select(model_id="m", condition="attacked")) == 1
    assert report.select(model_id="missing") == []


def test_writer_and_loader(tmp_path):
    report = sample_report()
    paths = ReportWriter(str(tmp_path / "run")).write(report)
    with open(paths["json"], encoding="utf-8") as f:
        assert f.read() == report.to_json()
    frame = pd.read_csv(paths["csv"])
    assert len(frame) == 3
    assert load_report(paths["json"]).to_json() == report.to_json()
