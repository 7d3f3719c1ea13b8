import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

import orjson

from models.editing.keyspace import PrefixSet
from models.editing.requests import SUBJECT_MARKER, EditMode, EditRequest, EvalCase
from models.errors import IoError, SuiteFormatError
from data_pipeline.ingestion.corpus import encode_text

logger = logging.getLogger(__name__)

PrefixFactory = Callable[[int], PrefixSet]
REQUIRED_FIELDS = ("id", "subject", "prompt", "old_object", "new_object")


def _fill(template: str, subject: str, where: str) -> str:
    if SUBJECT_MARKER not in template:
        raise SuiteFormatError(f"{where}: template {template!r} has no {SUBJECT_MARKER!r} subject marker")
    return template.replace(SUBJECT_MARKER, subject)


def parse_case(
    record: Dict[str, Any],
    index: int,
    mode: EditMode = "c_rome",
    prefix_factory: Optional[PrefixFactory] = None,
) -> EvalCase:
    """
    Turn one suite record into an EvalCase.

    Args:
        record: Decoded JSON object
        index: Position of the case in the suite, passed to prefix_factory
        mode: Edit mode stored on the request
        prefix_factory: Builds prefixes for records without a `prefixes` list

    Returns:
        EvalCase
    """
    missing = [f for f in REQUIRED_FIELDS if f not in record]
    if missing:
        raise SuiteFormatError(f"case #{index} is missing fields: {', '.join(missing)}")
    case_id = str(record["id"])
    subject = record["subject"]

    if record.get("prefixes"):
        prefixes = PrefixSet.from_texts(record["prefixes"])
    elif prefix_factory is not None:
        prefixes = prefix_factory(index)
    else:
        prefixes = PrefixSet.empty()

    try:
        request = EditRequest.from_template(
            subject, record["prompt"], record["old_object"], record["new_object"], prefixes, mode
        )
    except ValueError as e:
        raise SuiteFormatError(f"case {case_id}: {e}") from e

    paraphrases = tuple(
        encode_text(_fill(p, subject, f"case {case_id} paraphrase")) for p in record.get("paraphrases", [])
    )
    locality = []
    for probe in record.get("locality", []):
        if "prompt" not in probe or "expected" not in probe:
            raise SuiteFormatError(f"case {case_id}: locality entries need prompt and expected")
        expected = probe["expected"].encode("utf-8")
        if len(expected) != 1:
            raise SuiteFormatError(f"case {case_id}: locality expectation must be one byte")
        locality.append((encode_text(probe["prompt"]), expected[0]))
    try:
        return EvalCase(case_id, request, paraphrases, tuple(locality))
    except ValueError as e:
        raise SuiteFormatError(str(e)) from e


def load_suite(
    path: Union[str, Path],
    mode: EditMode = "c_rome",
    prefix_factory: Optional[PrefixFactory] = None,
) -> List[EvalCase]:
    """Read a JSON-lines suite; blank lines and `#` comments are skipped."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IoError(f"could not read suite {path}: {e}") from e

    cases: List[EvalCase] = []
    seen = set()
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            record = orjson.loads(line)
        except orjson.JSONDecodeError as e:
            raise SuiteFormatError(f"{path}:{lineno}: invalid JSON: {e}") from e
        case = parse_case(record, len(cases), mode, prefix_factory)
        if case.case_id in seen:
            raise SuiteFormatError(f"{path}:{lineno}: duplicate case id {case.case_id!r}")
        seen.add(case.case_id)
        cases.append(case)

    logger.info(f"Loaded {len(cases)} cases from {path}")
    return cases
