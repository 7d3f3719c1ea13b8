import logging
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from models.editing.editor import ValueSearchConfig, edit
from models.editing.keyspace import SecondMoment
from models.editing.requests import EditMode, EditRequest, EvalCase
from models.errors import EditLabError, SequenceTooShort
from models.transformer.tiny_lm import TinyLM, apply_pos_swap, forward, log_softmax
from src.editlab.schemas.reports import (
    AblationReport,
    BenchmarkCase,
    BenchmarkGroup,
    BenchmarkTable,
    EvalGroup,
    EvalReport,
    EvalRow,
)

logger = logging.getLogger(__name__)

PrefixMode = Literal["none", "random_prefix"]
ABLATION_VARIANTS = ("baseline", "bos_removed", "second_to_first", "first_to_second")


def perplexity(model: TinyLM, text: Sequence[int]) -> float:
    """
    exp of the mean next-token NLL over positions 1..end of `text`.

    Texts longer than the model's capacity are scored in windows that overlap
    by one token, so every position is predicted exactly once.
    """
    tokens = np.asarray(list(text), dtype=np.int64)
    if tokens.size < 2:
        raise SequenceTooShort("perplexity needs at least 2 tokens")
    capacity = model.config.capacity
    if capacity < 2:
        raise ValueError("model capacity is too small to score any position")

    total = 0.0
    count = 0
    start = 0
    while start < tokens.size - 1:
        window = tokens[start:start + capacity]
        logp = log_softmax(forward(model, window).logits)
        total -= float(np.sum(logp[np.arange(window.size - 1), window[1:]]))
        count += window.size - 1
        start += capacity - 1
    return float(np.exp(total / count))


def _prefers_new(model: TinyLM, tokens: Sequence[int], new_object: int, old_object: int) -> bool:
    logp = log_softmax(forward(model, tokens).logits[-1])
    return bool(logp[new_object] > logp[old_object])


def efficacy(model: TinyLM, request: EditRequest, prefix: Optional[Sequence[int]] = None) -> bool:
    """P(o*) > P(o) at the target position; ties count as failure."""
    tokens = tuple(prefix or ()) + request.prompt_tokens
    return _prefers_new(model, tokens, request.new_object, request.old_object)


def _argmax_next(model: TinyLM, tokens: Sequence[int]) -> int:
    return int(np.argmax(forward(model, tokens).logits[-1]))


def choose_test_prefix(case: EvalCase, prefix_mode: PrefixMode, seed: int) -> Tuple[int, ...]:
    """A prefix from the case's own set when the subject starts the prompt, else none."""
    if prefix_mode != "random_prefix" or not case.edit.subject_is_initial:
        return ()
    prefixes = case.edit.prefixes
    index = int(np.random.default_rng(seed).integers(len(prefixes)))
    return prefixes[index]


def evaluate_case(
    pre_model: TinyLM,
    post_model: TinyLM,
    case: EvalCase,
    prefix_mode: PrefixMode,
    ppl_text: Sequence[int],
    seed: int,
    ppl_before: Optional[float] = None,
) -> EvalRow:
    """
    Score one edit against its unedited model.

    Args:
        pre_model: Model before the edit
        post_model: Model after the edit
        case: Edit and its paraphrase/locality prompts
        prefix_mode: none or random_prefix
        ppl_text: Perplexity probe
        seed: Selects the test prefix
        ppl_before: Precomputed pre-edit perplexity, recomputed when None

    Returns:
        EvalRow
    """
    if pre_model.config != post_model.config:
        raise ValueError("pre and post models must share a configuration")
    if prefix_mode not in ("none", "random_prefix"):
        raise ValueError(f"unknown prefix mode {prefix_mode!r}")
    request = case.edit
    prefix = choose_test_prefix(case, prefix_mode, seed)

    generalization = None
    if case.paraphrase_prompts:
        hits = [_prefers_new(post_model, p, request.new_object, request.old_object) for p in case.paraphrase_prompts]
        generalization = float(np.mean(hits))

    locality = None
    if case.locality_prompts:
        kept = [_argmax_next(pre_model, p) == _argmax_next(post_model, p) for p, _ in case.locality_prompts]
        locality = float(np.mean(kept))

    before = perplexity(pre_model, ppl_text) if ppl_before is None else ppl_before
    after = perplexity(post_model, ppl_text)
    return EvalRow(
        case_id=case.case_id,
        group=case.group,
        prefix_mode=prefix_mode,
        prefix_applied=len(prefix) > 0,
        efficacy=efficacy(post_model, request, prefix),
        pre_efficacy=efficacy(pre_model, request, prefix),
        generalization=generalization,
        locality=locality,
        ppl_before=before,
        ppl_after=after,
        ppl_ratio=after / before,
    )


def _eval_groups(rows: List[EvalRow]) -> List[EvalGroup]:
    if not rows:
        return []
    df = pd.DataFrame([r.model_dump() for r in rows])
    groups = []
    for name, part in df.groupby("group", sort=True):
        groups.append(
            EvalGroup(
                group=str(name),
                n_cases=int(len(part)),
                efficacy_rate=float(part["efficacy"].mean()),
                generalization_mean=_mean_or_none(part["generalization"]),
                locality_mean=_mean_or_none(part["locality"]),
                ppl_after_mean=float(part["ppl_after"].mean()),
                ppl_after_max=float(part["ppl_after"].max()),
            )
        )
    return groups


def _mean_or_none(column: pd.Series) -> Optional[float]:
    values = column.dropna()
    return float(values.mean()) if len(values) else None


def evaluate_suite(
    model: TinyLM,
    cases: Sequence[EvalCase],
    C: SecondMoment,
    cfg: ValueSearchConfig,
    mode: EditMode,
    prefix_mode: PrefixMode,
    ppl_text: Sequence[int],
    seed: int,
    denom_floor: float,
) -> EvalReport:
    """Edit the base model once per case and score every edit; failed edits are listed, not raised."""
    rows: List[EvalRow] = []
    failures = []
    ppl_before = perplexity(model, ppl_text) if cases else 0.0
    for case in cases:
        try:
            edited, outcome = edit(model, case.edit.with_mode(mode), C, cfg, denom_floor)
        except EditLabError as e:
            logger.warning(f"Edit for case {case.case_id} failed: {e}")
            failures.append({"case_id": case.case_id, "error": type(e).__name__, "message": str(e)})
            continue
        row = evaluate_case(model, edited, case, prefix_mode, ppl_text, seed, ppl_before)
        rows.append(row.model_copy(update={"abs_denominator": abs(outcome.denominator)}))
    return EvalReport(prefix_mode=prefix_mode, rows=rows, groups=_eval_groups(rows), failures=failures)


def collapse_benchmark(
    model: TinyLM,
    cases: Sequence[EvalCase],
    mode: EditMode,
    C: SecondMoment,
    cfg: ValueSearchConfig,
    ppl_text: Sequence[int],
    variant: str = "baseline",
) -> BenchmarkTable:
    """
    Post-edit perplexity per case group with the denominator floor disabled.

    Args:
        model: Base model
        cases: Suite; each case is grouped by `EvalCase.group`
        mode: Edit mode applied to every case
        C: Second moment at the edited layer
        cfg: Value search settings
        ppl_text: Perplexity probe
        variant: Label stored on the table

    Returns:
        BenchmarkTable with per-case rows and min/mean/max statistics per non-empty group
    """
    ppl_before = perplexity(model, ppl_text)
    rows: List[BenchmarkCase] = []
    for case in cases:
        try:
            edited, outcome = edit(model, case.edit.with_mode(mode), C, cfg, denom_floor=0.0)
            after = perplexity(edited, ppl_text)
        except EditLabError as e:
            logger.warning(f"[{variant}] case {case.case_id} failed: {e}")
            rows.append(BenchmarkCase(case_id=case.case_id, group=case.group, error=f"{type(e).__name__}: {e}"))
            continue
        rows.append(
            BenchmarkCase(
                case_id=case.case_id,
                group=case.group,
                ppl_after=after,
                ppl_ratio=after / ppl_before,
                abs_denominator=abs(outcome.denominator),
            )
        )
    logger.info(f"[{variant}] {mode} benchmark over {len(rows)} cases, unedited perplexity {ppl_before:.3f}")
    return BenchmarkTable(mode=mode, variant=variant, ppl_before=ppl_before, cases=rows, groups=_benchmark_groups(rows))


def _benchmark_groups(rows: List[BenchmarkCase]) -> List[BenchmarkGroup]:
    if not rows:
        return []
    df = pd.DataFrame([r.model_dump() for r in rows])
    groups = []
    for name, part in df.groupby("group", sort=True):
        ok = part[part["error"].isna()]
        stats = {}
        if len(ok):
            stats = {
                "ppl_min": float(ok["ppl_after"].min()),
                "ppl_mean": float(ok["ppl_after"].mean()),
                "ppl_max": float(ok["ppl_after"].max()),
                "max_ratio": float(ok["ppl_ratio"].max()),
                "mean_abs_denominator": float(ok["abs_denominator"].mean()),
            }
        groups.append(BenchmarkGroup(group=str(name), n_cases=int(len(part)), n_failed=int(len(part) - len(ok)), **stats))
    return groups


def ablation_variants(model: TinyLM) -> Tuple[List[Tuple[str, TinyLM]], List[str]]:
    """The baseline model and its BOS-removed and position-swapped copies; returns (variants, skipped)."""
    variants = [("baseline", model)]
    skipped: List[str] = []
    if model.config.bos_mode == "prepend":
        variants.append(("bos_removed", model.with_config(bos_mode="none")))
    else:
        logger.warning("Model was not trained with a prepended BOS; skipping the bos_removed variant")
        skipped.append("bos_removed")
    variants.append(("second_to_first", apply_pos_swap(model, "second_to_first")))
    variants.append(("first_to_second", apply_pos_swap(model, "first_to_second")))
    return variants, skipped


def ablation_suite(
    model: TinyLM,
    cases: Sequence[EvalCase],
    C: SecondMoment,
    cfg: ValueSearchConfig,
    mode: EditMode,
    ppl_text: Sequence[int],
) -> AblationReport:
    """Run collapse_benchmark on every ablation variant with the same second moment."""
    variants, skipped = ablation_variants(model)
    tables = [collapse_benchmark(m, cases, mode, C, cfg, ppl_text, variant=name) for name, m in variants]
    return AblationReport(variants=tables, skipped=skipped)
