import logging
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from models.editing.editor import EditOutcome
from models.editing.keyspace import KeyBundle, SecondMoment
from models.errors import DegenerateSpread, DimensionMismatch, EmptyInput, SequenceTooShort
from models.linalg.tensor_core import cosine, pca_project, solve_spd
from models.transformer.tiny_lm import TinyLM, forward
from src.editlab.schemas.reports import (
    CollapseRisk,
    ConcentrationProfile,
    DenominatorGroup,
    DenominatorReport,
    DenominatorRow,
    DivergenceRecord,
    LayerConcentration,
    PopulationComparison,
)

logger = logging.getLogger(__name__)

DEFAULT_COLLAPSE_THRESHOLD = 0.02


def cluster_distance(embeddings: Sequence[np.ndarray]) -> float:
    """Mean Euclidean distance of the vectors to their centroid."""
    if len(embeddings) == 0:
        raise EmptyInput("cluster_distance needs at least one vector")
    dims = {np.shape(e) for e in embeddings}
    if len(dims) != 1:
        raise DimensionMismatch(f"vectors have differing shapes: {sorted(dims)}")
    X = np.asarray(embeddings, dtype=np.float64).reshape(len(embeddings), -1)
    centroid = X.mean(axis=0)
    return float(np.mean(np.linalg.norm(X - centroid, axis=1)))


def layer_profile(
    model: TinyLM,
    prompts: Sequence[Sequence[int]],
    through_layer: Optional[int] = None,
    all_layers: bool = False,
) -> ConcentrationProfile:
    """
    First-token versus subsequent-token key concentration per layer.

    Args:
        model: The model
        prompts: Token sequences of length >= 2
        through_layer: Last layer profiled, the edited layer by default
        all_layers: Profile every layer instead

    Returns:
        ConcentrationProfile with D over position-0 keys and D over the pooled remaining keys
    """
    cfg = model.config
    if all_layers:
        last = cfg.n_layers - 1
    else:
        last = cfg.edited_layer if through_layer is None else through_layer
    if not 0 <= last < cfg.n_layers:
        raise ValueError(f"through_layer={last} outside [0, {cfg.n_layers})")

    traces = []
    for tokens in prompts:
        if len(tokens) < 2:
            raise SequenceTooShort("profiled prompts need at least 2 tokens")
        traces.append(forward(model, tokens).layer_keys)
    if not traces:
        raise EmptyInput("layer_profile needs at least one prompt")

    layers: List[LayerConcentration] = []
    for layer in range(last + 1):
        first = [keys[layer][0] for keys in traces]
        rest = np.concatenate([keys[layer][1:] for keys in traces], axis=0)
        layers.append(
            LayerConcentration(
                layer=layer,
                d_first=cluster_distance(first),
                d_subsequent=cluster_distance(list(rest)),
                n_first=len(first),
                n_subsequent=int(rest.shape[0]),
            )
        )
    return ConcentrationProfile(layers=layers)


def compare_populations(a: np.ndarray, b: np.ndarray) -> PopulationComparison:
    """Centroid distance and paired cosines of two equally sized key populations."""
    cosines = [cosine(x, y) for x, y in zip(a, b)]
    return PopulationComparison(
        centroid_distance=float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0))),
        cosines=cosines,
        mean_cosine=float(np.mean(cosines)),
    )


def _unit_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(norms == 0.0, 1.0, norms)


def _joint_projection(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    coords = pca_project(np.vstack([_unit_rows(a), _unit_rows(b)]), 2)
    return coords[: len(a)], coords[len(a):]


def key_divergence(bundles: Sequence[KeyBundle], C: SecondMoment, group: str = "all") -> DivergenceRecord:
    """
    How far the keys used by the update sit from the unprefixed keys.

    The projection places k̄ with k^u in one PCA frame and C⁻¹k̄ with k^u in
    another; rows are scaled to unit length first so only directions are drawn.

    Args:
        bundles: One KeyBundle per case
        C: Second moment used to whiten k̄
        group: Label stored on the record

    Returns:
        DivergenceRecord
    """
    if len(bundles) < 2:
        raise EmptyInput("key_divergence needs at least two key bundles")
    k_bar = np.array([b.k_bar for b in bundles])
    k_u = np.array([b.k_u for b in bundles])
    whitened = solve_spd(C.C, k_bar.T).T

    try:
        raw_bar, raw_u = _joint_projection(k_bar, k_u)
        white_bar, white_u = _joint_projection(whitened, k_u)
        projection = {
            "k_bar": raw_bar.tolist(),
            "k_u": raw_u.tolist(),
            "whitened_k_bar": white_bar.tolist(),
            "k_u_whitened_frame": white_u.tolist(),
        }
    except DegenerateSpread:
        logger.warning(f"Keys of group {group} do not spread; skipping the projection")
        projection = None

    return DivergenceRecord(
        group=group,
        n_cases=len(bundles),
        prefixed_vs_unprefixed=compare_populations(k_bar, k_u),
        whitened_vs_unprefixed=compare_populations(whitened, k_u),
        projection=projection,
    )


def denominator_stats(
    outcomes: Iterable[Tuple[EditOutcome, str]],
    case_ids: Optional[Sequence[str]] = None,
) -> DenominatorReport:
    """
    Per-case update statistics and their per-group means.

    Args:
        outcomes: (EditOutcome, group label) pairs
        case_ids: Optional ids; positions are used when omitted

    Returns:
        DenominatorReport whose group rows are means of the case rows
    """
    outcomes = list(outcomes)
    ids = list(case_ids) if case_ids is not None else [str(i) for i in range(len(outcomes))]
    if len(ids) != len(outcomes):
        raise ValueError("case_ids and outcomes differ in length")
    rows = [
        DenominatorRow(
            case_id=case_id,
            group=group,
            mode=outcome.mode,
            denominator=outcome.denominator,
            abs_denominator=abs(outcome.denominator),
            numerator_norm=outcome.numerator_norm,
            delta_norm=outcome.delta_norm,
        )
        for case_id, (outcome, group) in zip(ids, outcomes)
    ]
    if not rows:
        return DenominatorReport(rows=[], groups=[])

    df = pd.DataFrame([r.model_dump() for r in rows])
    means = df.groupby("group", sort=True).agg(
        n_cases=("case_id", "size"),
        mean_abs_denominator=("abs_denominator", "mean"),
        mean_numerator_norm=("numerator_norm", "mean"),
        mean_delta_norm=("delta_norm", "mean"),
    )
    groups = [
        DenominatorGroup(
            group=str(name),
            n_cases=int(row.n_cases),
            mean_abs_denominator=float(row.mean_abs_denominator),
            mean_numerator_norm=float(row.mean_numerator_norm),
            mean_delta_norm=float(row.mean_delta_norm),
        )
        for name, row in means.iterrows()
    ]
    return DenominatorReport(rows=rows, groups=groups)


def baseline_denominator(report: DenominatorReport, configured: Optional[float] = None) -> Optional[float]:
    """Median |denominator| of the normal group, else the configured value."""
    normal = [r.abs_denominator for r in report.rows if r.group == "normal"]
    if normal:
        median = float(np.median(normal))
        if median > 0:
            return median
    return configured


def collapse_risk(
    outcome: EditOutcome | float,
    baseline: float,
    threshold: float = DEFAULT_COLLAPSE_THRESHOLD,
) -> CollapseRisk:
    """High iff |denominator| / baseline < threshold."""
    if not baseline > 0:
        raise ValueError(f"baseline denominator must be positive, got {baseline}")
    denominator = outcome.denominator if isinstance(outcome, EditOutcome) else float(outcome)
    ratio = abs(denominator) / baseline
    level = "high" if ratio < threshold else "low"
    if level == "high":
        logger.warning(f"Predicted collapse: |denominator| is {ratio:.2e} of the baseline")
    return CollapseRisk(level=level, ratio=ratio, baseline=baseline, threshold=threshold)
