import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from models.editing.keyspace import KeyBundle, SecondMoment, prefixed_key
from models.editing.requests import EditMode, EditRequest
from models.errors import ConfigInvalid, DenominatorBelowFloor, DimensionMismatch, NonFiniteLoss
from models.linalg.tensor_core import Matrix, Vector, as_matrix, as_vector, cosine, frobenius_norm, outer, solve_spd
from models.transformer.tiny_lm import TinyLM, forward, injection_loss_and_grad

logger = logging.getLogger(__name__)

DEFAULT_DENOM_FLOOR = 1e-4


class ValueSearchConfig(BaseModel):
    """Gradient descent settings for the target value v*."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    steps: int = Field(100, ge=0)
    learning_rate: float = Field(0.5, gt=0)
    weight_decay: float = Field(0.05, ge=0)
    grad_clip: float = Field(5.0, ge=0)
    seed: int = 0
    use_prefixed_prompts: bool = False
    # Upper bound on prefixed prompts per step; the seed picks which ones.
    max_prefixed_prompts: Optional[int] = Field(None, ge=1)


@dataclass(frozen=True)
class ValueSearchResult:
    v_star: Vector
    v_zero: Vector
    losses: List[float]


@dataclass(frozen=True)
class RankOneUpdate:
    w_hat: Matrix
    delta: Matrix
    numerator: Matrix
    denominator: float
    q: Vector


@dataclass(frozen=True)
class EditOutcome:
    """Everything one edit produced; `w_hat = W + delta` and `delta = numerator / denominator`."""

    w_hat: Matrix
    delta: Matrix
    numerator: Matrix
    denominator: float
    v_star: Vector
    v_zero: Vector
    key_bundle: KeyBundle
    mode: EditMode
    q: Vector
    k_right: Vector
    value_loss_curve: List[float] = field(default_factory=list)

    @property
    def numerator_norm(self) -> float:
        return frobenius_norm(self.numerator)

    @property
    def delta_norm(self) -> float:
        return frobenius_norm(self.delta)

    def to_report(self) -> Dict[str, Any]:
        bundle = self.key_bundle
        curve = self.value_loss_curve
        return {
            "mode": self.mode,
            "denominator": self.denominator,
            "abs_denominator": abs(self.denominator),
            "numerator_norm": self.numerator_norm,
            "delta_norm": self.delta_norm,
            "value_loss_curve": list(curve),
            "value_loss_initial": curve[0] if curve else None,
            "value_loss_final": curve[-1] if curve else None,
            "n_prefixes": bundle.n_prefixes,
            "key_norms": {
                "k_bar": float(np.linalg.norm(bundle.k_bar)),
                "k_u": float(np.linalg.norm(bundle.k_u)),
                "whitened_k_bar": float(np.linalg.norm(self.q)),
                "k_right": float(np.linalg.norm(self.k_right)),
            },
            "cosines": {
                "k_bar_vs_k_u": cosine(bundle.k_bar, bundle.k_u),
                "whitened_k_bar_vs_k_u": cosine(self.q, bundle.k_u),
            },
            "v_star_shift": float(np.linalg.norm(self.v_star - self.v_zero)),
        }


def _value_prompts(request: EditRequest, cfg: ValueSearchConfig) -> List[Tuple[Tuple[int, ...], int]]:
    prompts = [(request.prompt_tokens, request.subject_last)]
    if not cfg.use_prefixed_prompts:
        return prompts
    chosen = list(request.prefixes)
    if cfg.max_prefixed_prompts is not None and len(chosen) > cfg.max_prefixed_prompts:
        rng = np.random.default_rng(cfg.seed)
        picks = np.sort(rng.choice(len(chosen), size=cfg.max_prefixed_prompts, replace=False))
        chosen = [chosen[i] for i in picks]
    prompts.extend(request.prefixed_prompt(p) for p in chosen if len(p) > 0)
    return prompts


def optimize_value(model: TinyLM, request: EditRequest, cfg: ValueSearchConfig) -> ValueSearchResult:
    """
    Find v* by gradient descent on NLL(o*) + λ‖v − v₀‖².

    v is injected as the edited-layer MLP output at the subject-last position;
    v₀ is the value the model itself produces there on the bare prompt. With
    use_prefixed_prompts the NLL is averaged over the prompt and every
    prefixed copy of it.

    Args:
        model: Unedited model
        request: The fact to write
        cfg: Step count, learning rate, weight decay and clipping

    Returns:
        ValueSearchResult holding v*, v₀ and the loss at every iterate
    """
    v_zero = forward(model, request.prompt_tokens).tapped_values[request.subject_last].copy()
    prompts = _value_prompts(request, cfg)
    v = v_zero.copy()
    losses: List[float] = []

    def objective(vec: Vector) -> Tuple[float, Vector]:
        total, grad = 0.0, np.zeros_like(vec)
        for tokens, pos in prompts:
            target = (request.new_object, len(tokens) - 1)
            loss, g = injection_loss_and_grad(model, tokens, pos, vec, [target])
            total += loss
            grad += g
        diff = vec - v_zero
        total = total / len(prompts) + cfg.weight_decay * float(diff @ diff)
        grad = grad / len(prompts) + 2.0 * cfg.weight_decay * diff
        return total, grad

    for step in range(cfg.steps + 1):
        loss, grad = objective(v)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NonFiniteLoss(f"value search loss became {loss} at step {step}")
        losses.append(loss)
        if step == cfg.steps:
            break
        norm = float(np.linalg.norm(grad))
        if cfg.grad_clip > 0 and norm > cfg.grad_clip:
            grad = grad * (cfg.grad_clip / norm)
        v = v - cfg.learning_rate * grad
        logger.debug(f"value search step {step} loss {loss:.5f}")

    return ValueSearchResult(v_star=v, v_zero=v_zero, losses=losses)


def _second_moment_matrix(C: Union[SecondMoment, Matrix]) -> Matrix:
    return C.C if isinstance(C, SecondMoment) else as_matrix(C, "C")


def rank_one_update(
    W: Matrix,
    C: Union[SecondMoment, Matrix],
    k_bar: Vector,
    k_right: Vector,
    v_star: Vector,
    denom_floor: float = DEFAULT_DENOM_FLOOR,
) -> RankOneUpdate:
    """
    Closed-form rank-one update Ŵ = W + (v* − W k_right)(C⁻¹k̄)ᵀ / ((C⁻¹k̄)ᵀ k_right).

    Args:
        W: Down-projection, shape (d_model, d_mlp)
        C: Key second moment, shape (d_mlp, d_mlp)
        k_bar: Key whose whitened form sets the update direction
        k_right: Key the constraint Ŵ k_right = v* is imposed at
        v_star: Target value
        denom_floor: Relative floor; the denominator must reach floor·‖q‖·‖k_right‖

    Returns:
        RankOneUpdate with Ŵ, Δ, its numerator and denominator, and q = C⁻¹k̄
    """
    W = as_matrix(W, "W")
    d_model, d_mlp = W.shape
    k_bar = as_vector(k_bar, "k_bar")
    k_right = as_vector(k_right, "k_right")
    v_star = as_vector(v_star, "v_star")
    C = _second_moment_matrix(C)
    if k_bar.shape != (d_mlp,) or k_right.shape != (d_mlp,):
        raise DimensionMismatch(f"keys must have length {d_mlp}")
    if v_star.shape != (d_model,):
        raise DimensionMismatch(f"v_star must have length {d_model}")
    if C.shape != (d_mlp, d_mlp):
        raise DimensionMismatch(f"C has shape {C.shape}, expected ({d_mlp}, {d_mlp})")
    if denom_floor < 0:
        raise ValueError("denom_floor must be non-negative")

    q = solve_spd(C, k_bar)
    denominator = float(q @ k_right)
    threshold = denom_floor * float(np.linalg.norm(q)) * float(np.linalg.norm(k_right))
    if denominator == 0.0 or abs(denominator) < threshold:
        raise DenominatorBelowFloor(denominator, threshold)

    numerator = outer(v_star - W @ k_right, q)
    delta = numerator / denominator
    return RankOneUpdate(w_hat=W + delta, delta=delta, numerator=numerator, denominator=denominator, q=q)


def edit(
    model: TinyLM,
    request: EditRequest,
    C: SecondMoment,
    cfg: ValueSearchConfig,
    denom_floor: float = DEFAULT_DENOM_FLOOR,
) -> Tuple[TinyLM, EditOutcome]:
    """
    Write one fact into a copy of the model.

    Args:
        model: Base model, left untouched
        request: Subject, prompt, objects, prefixes and mode
        C: Second moment estimated at the model's edited layer
        cfg: Value search settings
        denom_floor: Relative denominator floor; 0 disables the check except for an exact zero

    Returns:
        (edited model, EditOutcome)
    """
    mc = model.config
    if C.layer != mc.edited_layer:
        raise ConfigInvalid(f"second moment was estimated at layer {C.layer}, model edits layer {mc.edited_layer}")
    if mc.key_tap != "post_activation":
        raise ConfigInvalid("editing requires key_tap=post_activation")
    if C.dim != mc.d_mlp:
        raise DimensionMismatch(f"second moment has dimension {C.dim}, model d_mlp is {mc.d_mlp}")

    bundle = prefixed_key(model, request.subject_tokens, request.prefixes)
    search = optimize_value(model, request, cfg)
    k_right = bundle.k_bar if request.mode == "c_rome" else bundle.k_u
    update = rank_one_update(model.down_proj(), C, bundle.k_bar, k_right, search.v_star, denom_floor)

    outcome = EditOutcome(
        w_hat=update.w_hat,
        delta=update.delta,
        numerator=update.numerator,
        denominator=update.denominator,
        v_star=search.v_star,
        v_zero=search.v_zero,
        key_bundle=bundle,
        mode=request.mode,
        q=update.q,
        k_right=k_right,
        value_loss_curve=search.losses,
    )
    logger.info(
        f"Applied {request.mode} edit at layer {mc.edited_layer}: "
        f"denominator {update.denominator:.4e}, |delta| {outcome.delta_norm:.4e}"
    )
    return model.with_down_proj(update.w_hat), outcome


def revert(model: TinyLM, original_W: Matrix) -> TinyLM:
    """Reinstall the original edited-layer down-projection."""
    return model.with_down_proj(as_matrix(original_W, "original_W"))
