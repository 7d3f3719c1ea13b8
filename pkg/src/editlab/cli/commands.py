import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import orjson
from pydantic import ValidationError

from data_pipeline.ingestion.corpus import ByteCorpus, CorpusLoader
from data_pipeline.ingestion.suite_loader import load_suite
from models.editing.editor import EditOutcome, edit
from models.editing.keyspace import SecondMoment, estimate_second_moment, load_second_moment, sample_prefixes, save_second_moment
from models.editing.requests import EDIT_MODES, EvalCase
from models.errors import ConfigInvalid, EditLabError, IoError
from models.transformer.config import ModelConfig
from models.transformer.tiny_lm import TinyLM
from models.transformer.training import train
from models.transformer.weights import load_weights, save_weights
from src.editlab.core import plots
from src.editlab.core.config import RunConfig, load_run_config
from src.editlab.core.diagnostics import (
    baseline_denominator,
    collapse_risk,
    denominator_stats,
    key_divergence,
    layer_profile,
)
from src.editlab.core.eval_harness import ablation_suite, evaluate_suite, perplexity
from src.editlab.core.logging_setup import configure_logging
from src.editlab.core.reporting import (
    ReportWriter,
    benchmark_frame,
    build_provenance,
    concentration_frame,
    denominator_frame,
    eval_frame,
    loss_curve_frame,
)
from src.editlab.schemas.reports import (
    CovarianceReport,
    DiagnoseReport,
    EditReport,
    EvalRunReport,
    SweepCell,
    SweepReport,
    TrainReport,
)

logger = logging.getLogger(__name__)

PROFILE_WINDOW = 32


# --- shared loading steps ----------------------------------------------------

def _require_file(path: Optional[Path], what: str) -> Path:
    if path is None:
        raise ConfigInvalid(f"no {what} path configured")
    if not Path(path).is_file():
        raise IoError(f"{what} file not found: {path}")
    return Path(path)


def _model_config(config: RunConfig) -> ModelConfig:
    try:
        return config.model.to_model_config()
    except ValidationError as e:
        raise ConfigInvalid(str(e)) from e


def _writer(config: RunConfig) -> ReportWriter:
    return ReportWriter(config.output.directory, config.output.formats)


def _weights_path(config: RunConfig) -> Path:
    return config.model.weights_path or config.output.directory / "model.tlmw"


def _covariance_path(config: RunConfig) -> Path:
    return config.covariance.path or config.output.directory / "second_moment.tlmw"


def _load_model(config: RunConfig) -> Tuple[TinyLM, Path]:
    path = _require_file(_weights_path(config), "weights")
    return load_weights(path), path


def _load_corpus(config: RunConfig) -> Tuple[ByteCorpus, Path]:
    path = _require_file(config.training.corpus_path, "corpus")
    return CorpusLoader(config.training.heldout_bytes).load(path), path


def _ppl_text(config: RunConfig, corpus: ByteCorpus) -> Tuple[int, ...]:
    return corpus.probe_text(config.evaluation.ppl_probe_bytes)


def _load_moment(config: RunConfig, model: TinyLM) -> Tuple[SecondMoment, Path]:
    path = _require_file(_covariance_path(config), "covariance")
    moment = load_second_moment(path)
    if moment.layer != model.config.edited_layer:
        raise ConfigInvalid(f"{path} was estimated at layer {moment.layer}, model edits layer {model.config.edited_layer}")
    return moment, path


def _load_cases(config: RunConfig, model: TinyLM) -> List[EvalCase]:
    path = _require_file(config.edit.suite_path, "suite")
    p = config.prefixes

    def prefix_factory(index: int):
        return sample_prefixes(
            model,
            n=p.count,
            length=p.min_length,
            seed=p.seed + index,
            source=p.source,
            max_length=p.max_length,
            temperature=p.temperature,
        )

    return load_suite(path, config.edit.mode, prefix_factory)


def _edit_all(
    config: RunConfig, model: TinyLM, cases: Sequence[EvalCase], moment: SecondMoment, denom_floor: float
) -> Tuple[List[Tuple[EvalCase, EditOutcome]], List[Dict[str, str]]]:
    done, failures = [], []
    for case in cases:
        try:
            _, outcome = edit(model, case.edit, moment, config.value_search, denom_floor)
        except EditLabError as e:
            logger.warning(f"Edit for case {case.case_id} failed: {e}")
            failures.append({"case_id": case.case_id, "error": type(e).__name__, "message": str(e)})
            continue
        done.append((case, outcome))
    return done, failures


# --- commands ----------------------------------------------------------------

def cmd_train(config: RunConfig) -> Path:
    """Train a fresh model on the corpus, skipping its held-out head."""
    model_config = _model_config(config)
    corpus, corpus_path = _load_corpus(config)
    model = TinyLM.initialize(model_config, config.model.init_seed)
    hyper = config.training.hyper(model_config)
    result = train(model, corpus.train, config.training.steps, hyper)

    writer = _writer(config)
    weights = save_weights(result.model, _weights_path(config), {"steps": config.training.steps})
    writer.csv("train_loss.csv", loss_curve_frame(result.losses))
    report = TrainReport(
        steps=config.training.steps,
        n_parameters=result.model.n_parameters(),
        final_loss=result.losses[-1] if result.losses else None,
        heldout_perplexity=perplexity(result.model, _ppl_text(config, corpus)),
        weights_file=str(weights),
        provenance=build_provenance(config, [corpus_path]),
    )
    writer.json("train_report.json", report)
    return weights


def cmd_estimate_cov(config: RunConfig) -> Path:
    model, weights = _load_model(config)
    corpus, _ = _load_corpus(config)
    cov = config.covariance
    moment = estimate_second_moment(
        model,
        corpus.train,
        ridge=cov.ridge,
        max_samples=cov.max_samples,
        window=cov.window,
        relative_ridge=cov.relative_ridge,
    )
    out = save_second_moment(moment, _covariance_path(config), model.config.model_dump())
    eigenvalues = np.linalg.eigvalsh(moment.C)
    report = CovarianceReport(
        layer=moment.layer,
        sample_count=moment.sample_count,
        ridge=moment.ridge,
        trace=float(np.trace(moment.C)),
        min_eigenvalue=float(eigenvalues[0]),
        max_eigenvalue=float(eigenvalues[-1]),
        covariance_file=str(out),
        provenance=build_provenance(config, [weights]),
    )
    _writer(config).json("covariance_report.json", report)
    return out


def cmd_edit(config: RunConfig, case_id: Optional[str]) -> Path:
    """Apply one suite case to the model and store the edited weights."""
    if not case_id:
        raise ConfigInvalid("the edit command needs --case")
    model, weights = _load_model(config)
    moment, moment_path = _load_moment(config, model)
    corpus, _ = _load_corpus(config)
    cases = {c.case_id: c for c in _load_cases(config, model)}
    if case_id not in cases:
        raise ConfigInvalid(f"case {case_id!r} is not in the suite")
    case = cases[case_id]

    edited, outcome = edit(model, case.edit, moment, config.value_search, config.edit.denom_floor)
    ppl_text = _ppl_text(config, corpus)
    risk = None
    if config.edit.baseline_denominator is not None:
        risk = collapse_risk(outcome, config.edit.baseline_denominator, config.edit.collapse_threshold)

    writer = _writer(config)
    out = save_weights(edited, writer.path(f"edited_{case_id}.tlmw"), {"case_id": case_id, "mode": outcome.mode})
    writer.csv(f"value_loss_{case_id}.csv", loss_curve_frame(outcome.value_loss_curve))
    report = EditReport(
        case_id=case_id,
        group=case.group,
        outcome=outcome.to_report(),
        collapse_risk=risk,
        ppl_before=perplexity(model, ppl_text),
        ppl_after=perplexity(edited, ppl_text),
        weights_file=str(out),
        provenance=build_provenance(config, [weights, moment_path]),
    )
    writer.json(f"edit_{case_id}.json", report)
    return out


def _profile_prompts(cases: Sequence[EvalCase], corpus: ByteCorpus, capacity: int) -> List[Tuple[int, ...]]:
    prompts = [c.edit.prompt_tokens for c in cases if len(c.edit.prompt_tokens) >= 2]
    if prompts:
        return prompts
    width = min(PROFILE_WINDOW, capacity)
    text = corpus.heldout
    return [tuple(int(t) for t in text[i:i + width]) for i in range(0, text.size - width + 1, width)]


def cmd_diagnose(config: RunConfig) -> Path:
    """Denominator statistics, key divergence and first-token concentration over the suite."""
    model, weights = _load_model(config)
    moment, moment_path = _load_moment(config, model)
    corpus, _ = _load_corpus(config)
    cases = _load_cases(config, model)
    # The floor is disabled so that collapse-pattern cases are measured too.
    done, failures = _edit_all(config, model, cases, moment, denom_floor=0.0)

    denominators = denominator_stats([(o, c.group) for c, o in done], [c.case_id for c, _ in done])
    baseline = baseline_denominator(denominators, config.edit.baseline_denominator)
    risks = {}
    if baseline is not None:
        risks = {c.case_id: collapse_risk(o, baseline, config.edit.collapse_threshold) for c, o in done}

    groups: Dict[str, list] = {}
    for case, outcome in done:
        groups.setdefault(case.group, []).append(outcome.key_bundle)
    groups["all"] = [o.key_bundle for _, o in done]
    divergence = [key_divergence(bundles, moment, group) for group, bundles in sorted(groups.items()) if len(bundles) >= 2]

    profile = layer_profile(model, _profile_prompts(cases, corpus, model.config.capacity))
    report = DiagnoseReport(
        mode=config.edit.mode,
        denominators=denominators,
        divergence=divergence,
        concentration=profile,
        collapse_risk=risks,
        failures=failures,
        provenance=build_provenance(config, [weights, moment_path]),
    )

    writer = _writer(config)
    out = writer.path("diagnose.json")
    writer.json("diagnose.json", report)
    writer.csv("denominators.csv", denominator_frame(denominators))
    writer.csv("concentration.csv", concentration_frame(profile))
    for record in divergence:
        if record.projection is None:
            continue
        proj = record.projection
        writer.svg(f"keys_{record.group}.svg", plots.scatter_svg(
            {"prefixed k": proj["k_bar"], "unprefixed k": proj["k_u"]}, f"keys ({record.group})"))
        writer.svg(f"whitened_{record.group}.svg", plots.scatter_svg(
            {"C^-1 prefixed k": proj["whitened_k_bar"], "unprefixed k": proj["k_u_whitened_frame"]},
            f"whitened keys ({record.group})"))
    writer.svg("concentration.svg", plots.line_svg(
        {
            "first token": [(l.layer, l.d_first) for l in profile.layers],
            "subsequent tokens": [(l.layer, l.d_subsequent) for l in profile.layers if l.d_subsequent is not None],
        },
        "distance to cluster center",
        "layer",
        "D",
    ))
    return out


def cmd_eval(config: RunConfig) -> Path:
    model, weights = _load_model(config)
    moment, moment_path = _load_moment(config, model)
    corpus, _ = _load_corpus(config)
    cases = _load_cases(config, model)
    prefix_mode = "random_prefix" if config.evaluation.prefix_test else "none"
    result = evaluate_suite(
        model,
        cases,
        moment,
        config.value_search,
        config.edit.mode,
        prefix_mode,
        _ppl_text(config, corpus),
        config.evaluation.seed,
        config.edit.denom_floor,
    )
    writer = _writer(config)
    writer.json("eval.json", EvalRunReport(
        mode=config.edit.mode, report=result, provenance=build_provenance(config, [weights, moment_path])))
    writer.csv("eval.csv", eval_frame(result))
    return writer.path("eval.json")


def cmd_sweep(config: RunConfig, modes: Sequence[str] = EDIT_MODES) -> Path:
    """Collapse benchmark over every edit mode and ablation variant."""
    model, weights = _load_model(config)
    moment, moment_path = _load_moment(config, model)
    corpus, _ = _load_corpus(config)
    cases = _load_cases(config, model)
    ppl_text = _ppl_text(config, corpus)

    cells: List[SweepCell] = []
    skipped: List[str] = []
    for mode in modes:
        ablation = ablation_suite(model, cases, moment, config.value_search, mode, ppl_text)
        cells.extend(SweepCell(mode=mode, variant=t.variant, table=t) for t in ablation.variants)
        skipped.extend(f"{mode}:{name}" for name in ablation.skipped)

    writer = _writer(config)
    writer.json("sweep.json", SweepReport(
        cells=cells, skipped=skipped, provenance=build_provenance(config, [weights, moment_path])))
    writer.csv("sweep.csv", benchmark_frame(c.table for c in cells))
    return writer.path("sweep.json")


# --- argument handling -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--case", type=str, help="suite case id (edit)")
    common.add_argument("--mode", choices=["rome", "c-rome"], help="edit mode")
    common.add_argument("--prefix-test", choices=["on", "off"], help="prefix the prompt at test time")
    common.add_argument("--seed", type=int, help="overrides every seed of the run")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--format", choices=["json", "csv", "both"], help="report formats")

    parser = argparse.ArgumentParser(prog="editlab", description="Rank-one knowledge editing lab for small byte-level models")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Dict[str, Any]] = {}
    if args.mode:
        overrides.setdefault("edit", {})["mode"] = args.mode
    if args.prefix_test:
        overrides.setdefault("evaluation", {})["prefix_test"] = args.prefix_test == "on"
    if args.out:
        overrides.setdefault("output", {})["directory"] = str(args.out.resolve())
    if args.format:
        overrides.setdefault("output", {})["formats"] = args.format
    return overrides


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], Path]] = {
    "train": lambda cfg, args: cmd_train(cfg),
    "estimate-cov": lambda cfg, args: cmd_estimate_cov(cfg),
    "edit": lambda cfg, args: cmd_edit(cfg, args.case),
    "diagnose": lambda cfg, args: cmd_diagnose(cfg),
    "eval": lambda cfg, args: cmd_eval(cfg),
    "sweep": lambda cfg, args: cmd_sweep(cfg, [cfg.edit.mode] if args.mode else EDIT_MODES),
}


def _error_record(command: Optional[str], error: BaseException) -> str:
    record = {"command": command, "error": type(error).__name__, "message": str(error)}
    return orjson.dumps(record, option=orjson.OPT_SORT_KEYS).decode("utf-8")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handler = None
    try:
        config = load_run_config(args.config, overrides_from_args(args))
        if args.seed is not None:
            config = config.with_seed(args.seed)
        handler = configure_logging(config.logging)
        logger.info(f"Running {args.command}")
        out = COMMANDS[args.command](config, args)
        logger.info(f"{args.command} finished: {out}")
        return 0
    except ConfigInvalid as e:
        print(_error_record(args.command, e), file=sys.stderr)
        return 2
    except (EditLabError, ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        print(_error_record(args.command, e), file=sys.stderr)
        return 1
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
