import logging

import orjson
import pandas as pd
import pytest

from src.editlab.core import plots
from src.editlab.core.config import LoggingSection, load_run_config
from src.editlab.core.logging_setup import configure_logging
from src.editlab.core.reporting import (
    EVAL_COLUMNS,
    ReportWriter,
    build_provenance,
    eval_frame,
    file_sha256,
    loss_curve_frame,
    to_json_bytes,
)
from src.editlab.schemas.reports import EvalReport, EvalRow


@pytest.fixture
def row():
    return EvalRow(
        case_id="a", group="normal", prefix_mode="none", prefix_applied=False, efficacy=True, pre_efficacy=False,
        ppl_before=2.0, ppl_after=3.0, ppl_ratio=1.5,
    )


def test_json_is_sorted_and_stable(row):
    first = to_json_bytes(row)
    assert first == to_json_bytes(EvalRow(**row.model_dump()))
    keys = list(orjson.loads(first))
    assert keys == sorted(keys)
    assert first.endswith(b"\n")


def test_writer_honours_formats(tmp_path, row):
    report = EvalReport(prefix_mode="none", rows=[row])
    json_only = ReportWriter(tmp_path / "j", "json")
    assert json_only.json("eval.json", report) is not None
    assert json_only.csv("eval.csv", eval_frame(report)) is None
    both = ReportWriter(tmp_path / "b", "both")
    both.csv("eval.csv", eval_frame(report))
    frame = pd.read_csv(tmp_path / "b" / "eval.csv")
    assert frame.loc[0, "ppl_ratio"] == 1.5
    assert list(frame.columns)[:2] == ["case_id", "group"]


def test_empty_eval_frame_keeps_its_columns():
    frame = eval_frame(EvalReport(prefix_mode="none"))
    assert frame.empty and "efficacy" in frame.columns


def test_eval_columns_are_exactly_the_row_fields(row):
    assert set(EVAL_COLUMNS) == set(EvalRow.model_fields)
    assert list(eval_frame(EvalReport(prefix_mode="none", rows=[row])).columns) == EVAL_COLUMNS


def test_provenance_hashes_inputs(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    path = tmp_path / "weights.bin"
    path.write_bytes(b"abc")
    provenance = build_provenance(load_run_config(), [path, None])
    assert provenance.inputs == {str(path): file_sha256(path)}
    assert file_sha256(path) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert provenance.config["edit"]["mode"] == "c_rome"


def test_loss_curve_frame():
    frame = loss_curve_frame([3.0, 2.0])
    assert frame.to_dict("list") == {"step": [0, 1], "loss": [3.0, 2.0]}


def test_svgs_contain_every_series():
    scatter = plots.scatter_svg({"prefixed k": [[0.0, 1.0], [1.0, 0.0]], "unprefixed k": [[0.5, 0.5]]}, "keys")
    assert "<svg" in scatter and "prefixed k" in scatter and "unprefixed k" in scatter
    line = plots.line_svg({"first token": [(0, 1.0), (1, 0.5)]}, "D", "layer", "D")
    assert "first token" in line and "layer" in line


def test_json_logging(capsys):
    handler = configure_logging(LoggingSection(level="INFO", json=True))
    try:
        logging.getLogger("editlab.test").info("hello")
        record = orjson.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert record["message"] == "hello"
        assert record["levelname"] == "INFO"
        again = configure_logging(LoggingSection(level="WARNING"))
        assert handler not in logging.getLogger().handlers
        handler = again
    finally:
        logging.getLogger().removeHandler(handler)
