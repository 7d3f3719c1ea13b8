import hashlib
import logging
from pathlib import Path
from typing import Any, Iterable, List, Mapping, Optional, Sequence, Union

import orjson
import pandas as pd
from pydantic import BaseModel

from models.transformer.weights import atomic_write_bytes
from src.editlab.core.config import RunConfig
from src.editlab.schemas.reports import (
    BenchmarkTable,
    ConcentrationProfile,
    DenominatorReport,
    DenominatorRow,
    EvalReport,
    Provenance,
)

logger = logging.getLogger(__name__)

JSON_OPTIONS = orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY


def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def build_provenance(config: RunConfig, inputs: Iterable[Optional[Path]] = ()) -> Provenance:
    """Resolved configuration plus the hash of every weight or covariance file read."""
    hashes = {str(p): file_sha256(p) for p in inputs if p is not None}
    return Provenance(config=config.report_dict(), inputs=hashes)


def to_json_bytes(payload: Union[BaseModel, Mapping[str, Any]]) -> bytes:
    data = payload.model_dump(mode="json") if isinstance(payload, BaseModel) else payload
    return orjson.dumps(data, option=JSON_OPTIONS) + b"\n"


def write_json(path: Union[str, Path], payload: Union[BaseModel, Mapping[str, Any]]) -> Path:
    out = atomic_write_bytes(path, to_json_bytes(payload))
    logger.info(f"Wrote {out}")
    return out


def write_csv(path: Union[str, Path], frame: pd.DataFrame) -> Path:
    text = frame.to_csv(index=False, lineterminator="\n")
    out = atomic_write_bytes(path, text.encode("utf-8"))
    logger.info(f"Wrote {out}")
    return out


def write_text(path: Union[str, Path], text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


class ReportWriter:
    """Writes a command's outputs into one directory, honoring the json/csv format choice."""

    def __init__(self, directory: Path, formats: str = "both"):
        self.directory = Path(directory)
        self.formats = formats

    @property
    def wants_json(self) -> bool:
        return self.formats in ("json", "both")

    @property
    def wants_csv(self) -> bool:
        return self.formats in ("csv", "both")

    def path(self, name: str) -> Path:
        return self.directory / name

    def json(self, name: str, payload: Union[BaseModel, Mapping[str, Any]]) -> Optional[Path]:
        return write_json(self.path(name), payload) if self.wants_json else None

    def csv(self, name: str, frame: pd.DataFrame) -> Optional[Path]:
        return write_csv(self.path(name), frame) if self.wants_csv else None

    def svg(self, name: str, markup: str) -> Path:
        return write_text(self.path(name), markup)


def loss_curve_frame(losses: Sequence[float]) -> pd.DataFrame:
    return pd.DataFrame({"step": range(len(losses)), "loss": list(losses)})


def denominator_frame(report: DenominatorReport) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in report.rows], columns=list(DenominatorRow.model_fields))


def concentration_frame(profile: ConcentrationProfile) -> pd.DataFrame:
    return pd.DataFrame(
        [l.model_dump() for l in profile.layers],
        columns=["layer", "d_first", "d_subsequent", "n_first", "n_subsequent"],
    )


EVAL_COLUMNS: List[str] = [
    "case_id", "group", "prefix_mode", "prefix_applied", "efficacy", "pre_efficacy",
    "generalization", "locality", "ppl_before", "ppl_after", "ppl_ratio", "abs_denominator",
]


def eval_frame(report: EvalReport) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in report.rows], columns=EVAL_COLUMNS)


BENCHMARK_COLUMNS: List[str] = ["mode", "variant", "case_id", "group", "ppl_before", "ppl_after", "ppl_ratio",
                                "abs_denominator", "error"]


def benchmark_frame(tables: Iterable[BenchmarkTable]) -> pd.DataFrame:
    records = [
        {"mode": t.mode, "variant": t.variant, "ppl_before": t.ppl_before, **case.model_dump()}
        for t in tables
        for case in t.cases
    ]
    return pd.DataFrame(records, columns=BENCHMARK_COLUMNS)
