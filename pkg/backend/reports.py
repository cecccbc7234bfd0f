"""
Experiment reports
Rows of per-image metrics plus a provenance block, serialized as sorted JSON
and as a flat CSV
"""

import json
import logging
import math
import os
import threading
from typing import Any, Dict, List, Optional, Union

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator

from . import __version__
from .metrics import PSNR_SENTINEL_DB, MetricReport, report_psnr

logger = logging.getLogger(__name__)

TagValue = Union[bool, int, float, str]


def _finite_or_text(value: Any) -> Any:
    """JSON has no infinities; non-finite floats are stored as text"""
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def _clean_mapping(values: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    return {str(k): _finite_or_text(v) for k, v in (values or {}).items()}


class ReportRow(BaseModel):
    """
    One (image, model, condition) measurement. psnr_db uses the 100 dB
    sentinel for identical images.
    """
    model_config = ConfigDict(extra="forbid")

    image_id: str
    model_id: str
    condition: str
    tags: Dict[str, TagValue] = Field(default_factory=dict)
    bpp: float
    psnr_db: float
    ms_ssim: float
    mse: float
    budget_satisfied: bool = True
    wall_time_s: float = 0.0
    extra: Dict[str, TagValue] = Field(default_factory=dict)

    @field_validator("psnr_db")
    @classmethod
    def _sentinel(cls, value: float) -> float:
        return report_psnr(value)

    @field_validator("tags", "extra", mode="before")
    @classmethod
    def _json_safe(cls, value: Optional[Dict[str, Any]]) -> Dict[str, Any]:
        return _clean_mapping(value)

    @classmethod
    def from_metrics(
        cls,
        report: MetricReport,
        image_id: str,
        model_id: str,
        condition: str,
        tags: Optional[Dict[str, Any]] = None,
        budget_satisfied: bool = True,
        wall_time_s: float = 0.0,
        extra: Optional[Dict[str, Any]] = None,
    ) -> "ReportRow":
        return cls(
            image_id=image_id,
            model_id=model_id,
            condition=condition,
            tags=tags or {},
            bpp=report.bpp,
            psnr_db=report.psnr_db,
            ms_ssim=report.ms_ssim,
            mse=report.mse,
            budget_satisfied=budget_satisfied,
            wall_time_s=wall_time_s,
            extra=extra or {},
        )


class Provenance(BaseModel):
    """Everything needed to re-run an experiment"""
    model_config = ConfigDict(extra="forbid")

    spec: Dict[str, Any] = Field(default_factory=dict)
    seeds: Dict[str, int] = Field(default_factory=dict)
    code_version: str = __version__
    checkpoint_hashes: Dict[str, str] = Field(default_factory=dict)
    notes: Dict[str, str] = Field(default_factory=dict)

    @field_validator("spec", mode="before")
    @classmethod
    def _json_safe_spec(cls, value: Optional[Dict[str, Any]]) -> Dict[str, Any]:
        return json.loads(json.dumps(_clean_mapping(value), default=str))


class ExperimentReport(BaseModel):
    """Append-only list of rows; JSON re-serialization is byte-identical"""
    model_config = ConfigDict(extra="forbid")

    experiment_id: str
    provenance: Provenance = Field(default_factory=Provenance)
    rows: List[ReportRow] = Field(default_factory=list)

    _lock: threading.Lock = PrivateAttr(default_factory=threading.Lock)

    def append_row(self, row: ReportRow) -> None:
        with self._lock:
            self.rows.append(row)

    def extend(self, rows: List[ReportRow]) -> None:
        with self._lock:
            self.rows.extend(rows)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        return cls.model_validate(json.loads(text))

    def to_frame(self) -> pd.DataFrame:
        records = []
        for row in self.rows:
            record = row.model_dump(exclude={"tags", "extra"})
            record.update({f"tag_{k}": v for k, v in row.tags.items()})
            record.update({f"extra_{k}": v for k, v in row.extra.items()})
            records.append(record)
        return pd.DataFrame.from_records(records)

    def summary(self, by=("model_id", "condition")) -> pd.DataFrame:
        """Mean metrics per group"""
        frame = self.to_frame()
        if frame.empty:
            return frame
        columns = ["bpp", "psnr_db", "ms_ssim", "mse"]
        return frame.groupby(list(by), sort=True)[columns].mean().reset_index()

    def select(self, **criteria: Any) -> List[ReportRow]:
        """Rows whose fields (or tags) equal every given value"""
        selected = []
        for row in self.rows:
            values = {**row.tags, **row.model_dump(exclude={"tags", "extra"})}
            if all(values.get(k) == v for k, v in criteria.items()):
                selected.append(row)
        return selected


class ReportWriter:
    """Single writer for report files in one run directory"""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self._lock = threading.Lock()

    def write(self, report: ExperimentReport) -> Dict[str, str]:
        with self._lock:
            os.makedirs(self.out_dir, exist_ok=True)
            json_path = os.path.join(self.out_dir, f"{report.experiment_id}.json")
            csv_path = os.path.join(self.out_dir, f"{report.experiment_id}.csv")
            with open(json_path, "w", encoding="utf-8") as f:
                f.write(report.to_json())
            report.to_frame().to_csv(csv_path, index=False)
        logger.info(f"Wrote report {report.experiment_id} ({len(report.rows)} rows) to {self.out_dir}")
        return {"json": json_path, "csv": csv_path}


def load_report(path: str) -> ExperimentReport:
    with open(path, "r", encoding="utf-8") as f:
        return ExperimentReport.from_json(f.read())


__all__ = [
    "ExperimentReport",
    "PSNR_SENTINEL_DB",
    "Provenance",
    "ReportRow",
    "ReportWriter",
    "load_report",
]
