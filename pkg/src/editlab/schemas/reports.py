from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field


class Provenance(BaseModel):
    config: Dict[str, Any]
    inputs: Dict[str, str] = Field(default_factory=dict)  # path -> sha256


class DenominatorRow(BaseModel):
    case_id: str
    group: str
    mode: str
    denominator: float
    abs_denominator: float
    numerator_norm: float
    delta_norm: float


class DenominatorGroup(BaseModel):
    group: str
    n_cases: int
    mean_abs_denominator: float
    mean_numerator_norm: float
    mean_delta_norm: float


class DenominatorReport(BaseModel):
    rows: List[DenominatorRow]
    groups: List[DenominatorGroup]


class LayerConcentration(BaseModel):
    layer: int
    d_first: float = Field(ge=0)
    d_subsequent: Optional[float] = Field(None, ge=0)
    n_first: int
    n_subsequent: int


class ConcentrationProfile(BaseModel):
    layers: List[LayerConcentration]
    first_tokens: str = "key at position 0 of every prompt"
    subsequent_tokens: str = "keys at positions 1.. of every prompt, pooled"


class PopulationComparison(BaseModel):
    centroid_distance: float
    cosines: List[float]
    mean_cosine: float


class DivergenceRecord(BaseModel):
    group: str
    n_cases: int
    prefixed_vs_unprefixed: PopulationComparison
    whitened_vs_unprefixed: PopulationComparison
    # population name -> (n_cases, 2) coordinates; None when the keys do not spread
    projection: Optional[Dict[str, List[List[float]]]] = None


class CollapseRisk(BaseModel):
    level: Literal["low", "high"]
    ratio: float
    baseline: float
    threshold: float


class EvalRow(BaseModel):
    case_id: str
    group: str
    prefix_mode: Literal["none", "random_prefix"]
    prefix_applied: bool
    efficacy: bool
    pre_efficacy: bool
    generalization: Optional[float] = Field(None, ge=0, le=1)
    locality: Optional[float] = Field(None, ge=0, le=1)
    ppl_before: float
    ppl_after: float
    ppl_ratio: float
    abs_denominator: Optional[float] = None


class EvalGroup(BaseModel):
    group: str
    n_cases: int
    efficacy_rate: float
    generalization_mean: Optional[float] = None
    locality_mean: Optional[float] = None
    ppl_after_mean: float
    ppl_after_max: float


class EvalReport(BaseModel):
    prefix_mode: Literal["none", "random_prefix"]
    rows: List[EvalRow] = Field(default_factory=list)
    groups: List[EvalGroup] = Field(default_factory=list)
    failures: List[Dict[str, str]] = Field(default_factory=list)


class BenchmarkCase(BaseModel):
    case_id: str
    group: str
    ppl_after: Optional[float] = None
    ppl_ratio: Optional[float] = None
    abs_denominator: Optional[float] = None
    error: Optional[str] = None


class BenchmarkGroup(BaseModel):
    group: str
    n_cases: int
    n_failed: int
    ppl_min: Optional[float] = None
    ppl_mean: Optional[float] = None
    ppl_max: Optional[float] = None
    max_ratio: Optional[float] = None
    mean_abs_denominator: Optional[float] = None


class BenchmarkTable(BaseModel):
    mode: str
    variant: str = "baseline"
    ppl_before: float
    cases: List[BenchmarkCase] = Field(default_factory=list)
    groups: List[BenchmarkGroup] = Field(default_factory=list)


class AblationReport(BaseModel):
    variants: List[BenchmarkTable] = Field(default_factory=list)
    skipped: List[str] = Field(default_factory=list)


class TrainReport(BaseModel):
    steps: int
    n_parameters: int
    final_loss: Optional[float]
    heldout_perplexity: float
    weights_file: str
    provenance: Provenance


class CovarianceReport(BaseModel):
    layer: int
    sample_count: int
    ridge: float
    trace: float
    min_eigenvalue: float
    max_eigenvalue: float
    covariance_file: str
    provenance: Provenance


class EditReport(BaseModel):
    case_id: str
    group: str
    outcome: Dict[str, Any]
    collapse_risk: Optional[CollapseRisk] = None
    ppl_before: float
    ppl_after: float
    weights_file: str
    provenance: Provenance


class DiagnoseReport(BaseModel):
    mode: str
    denominators: DenominatorReport
    divergence: List[DivergenceRecord] = Field(default_factory=list)
    concentration: ConcentrationProfile
    collapse_risk: Dict[str, CollapseRisk] = Field(default_factory=dict)
    failures: List[Dict[str, str]] = Field(default_factory=list)
    provenance: Provenance


class EvalRunReport(BaseModel):
    mode: str
    report: EvalReport
    provenance: Provenance


class SweepCell(BaseModel):
    mode: str
    variant: str
    table: BenchmarkTable


class SweepReport(BaseModel):
    cells: List[SweepCell] = Field(default_factory=list)
    skipped: List[str] = Field(default_factory=list)
    provenance: Provenance
