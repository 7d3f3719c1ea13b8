"""
End-to-end collapse study on a real text corpus.

Needs EDITLAB_CORPUS pointing at a UTF-8 text file of at least 256 KiB and
takes minutes on one CPU; run with `pytest -m slow`.
"""

import os
from pathlib import Path

import pytest

from data_pipeline.ingestion.corpus import CorpusLoader
from models.editing.editor import ValueSearchConfig
from models.editing.keyspace import estimate_second_moment, sample_prefixes
from models.editing.requests import EditRequest, EvalCase
from models.transformer.config import ModelConfig
from models.transformer.tiny_lm import TinyLM
from models.transformer.training import TrainingHyper, train
from src.editlab.core.eval_harness import collapse_benchmark, evaluate_suite

pytestmark = pytest.mark.slow

CORPUS = os.environ.get("EDITLAB_CORPUS")
INITIAL_SUBJECTS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
MID_SUBJECTS = [
    "river", "garden", "lantern", "kitchen", "window", "captain", "forest", "market", "doctor", "village",
    "engine", "letter", "bridge", "mirror", "summer", "candle", "silver", "planet", "winter", "harbor",
]


@pytest.fixture(scope="module")
def study():
    if not CORPUS or not Path(CORPUS).is_file():
        pytest.skip("set EDITLAB_CORPUS to a text corpus of at least 256 KiB")
    corpus = CorpusLoader(heldout_bytes=4096).load(CORPUS)
    if corpus.train.size < 256 * 1024:
        pytest.skip("corpus is smaller than 256 KiB")

    config = ModelConfig(n_layers=4, d_model=64, n_heads=4, max_seq=64, edited_layer=1)
    result = train(TinyLM.initialize(config, seed=0), corpus.train, 3000, TrainingHyper(seq_len=64, batch_size=16))
    model = result.model
    moment = estimate_second_moment(model, corpus.train, max_samples=20_000)

    cases = []
    for i, letter in enumerate(INITIAL_SUBJECTS[:20]):
        prefixes = sample_prefixes(model, 10, 2, seed=i, max_length=10)
        cases.append(EvalCase(f"first_{letter}", EditRequest.from_template(letter, "{} is in", "x", "q", prefixes),
                              locality_prompts=((tuple(b"the sea is"), 32),)))
    for i, word in enumerate(MID_SUBJECTS):
        prefixes = sample_prefixes(model, 10, 2, seed=100 + i, max_length=10)
        cases.append(EvalCase(f"mid_{word}", EditRequest.from_template(word, "The {} is in", "x", "q", prefixes),
                              locality_prompts=((tuple(b"the sea is"), 32),)))
    return model, moment, cases, corpus.probe_text(1024)


def _groups(table):
    return {g.group: g for g in table.groups}


def _efficacy_rate(report):
    return sum(r.efficacy for r in report.rows) / len(report.rows)


def test_first_token_edits_collapse_without_consistent_keys(study):
    model, moment, cases, ppl_text = study
    table = collapse_benchmark(model, cases, "rome_inconsistent", moment, ValueSearchConfig(), ppl_text)
    groups = _groups(table)
    assert groups["collapse_pattern"].mean_abs_denominator < groups["normal"].mean_abs_denominator
    assert groups["collapse_pattern"].max_ratio > groups["normal"].max_ratio


def test_consistent_keys_keep_perplexity_bounded(study):
    model, moment, cases, ppl_text = study
    table = collapse_benchmark(model, cases, "c_rome", moment, ValueSearchConfig(), ppl_text)
    assert all(row.error is None for row in table.cases)
    assert all(row.ppl_ratio <= 2.0 for row in table.cases)


def test_prefixing_the_test_prompt_does_not_hurt(study):
    model, moment, cases, ppl_text = study
    first = [c for c in cases if c.group == "collapse_pattern"]
    search = ValueSearchConfig()
    plain = evaluate_suite(model, first, moment, search, "c_rome", "none", ppl_text, 0, 0.0)
    prefixed = evaluate_suite(model, first, moment, search, "c_rome", "random_prefix", ppl_text, 0, 0.0)
    assert _efficacy_rate(prefixed) >= _efficacy_rate(plain)
    for report in (plain, prefixed):
        assert sum(r.locality for r in report.rows) / len(report.rows) >= 0.9
