import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from models.errors import CorpusTooSmall, NonFiniteLoss
from models.transformer.tiny_lm import TinyLM, _backward, _forward, apply_pos_swap, cross_entropy_and_grad

logger = logging.getLogger(__name__)


class TrainingHyper(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    learning_rate: float = Field(3e-3, gt=0)
    batch_size: int = Field(16, ge=1)
    seq_len: int = Field(64, ge=1)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    grad_clip: float = Field(1.0, ge=0)
    log_every: int = Field(100, ge=1)


@dataclass
class TrainingResult:
    model: TinyLM
    losses: List[float] = field(default_factory=list)


class AdamState:
    """First/second moment buffers for Adam with bias correction."""

    def __init__(self, params: Dict[str, np.ndarray], beta1: float, beta2: float, eps: float):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in params:
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            params[name] -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] *= scale
    return total


def loss_and_grads(model: TinyLM, batch: np.ndarray):
    """
    Next-token cross-entropy of a (B, seq_len + 1) batch and its parameter gradients.

    When bos_mode=prepend each window is prefixed by the BOS id, so training
    sees the same layout the model is queried with, and the first window
    token is scored as a prediction from BOS.
    """
    cfg = model.config
    inputs, targets = batch[:, :-1], batch[:, 1:]
    if cfg.bos_mode == "prepend":
        bos = np.full((batch.shape[0], 1), cfg.bos_id, dtype=batch.dtype)
        inputs = np.concatenate([bos, inputs], axis=1)
        targets = np.concatenate([batch[:, :1], targets], axis=1)
    logits, _, _, cache = _forward(model, inputs, keep_cache=True)
    loss, dlogits = cross_entropy_and_grad(logits, targets)
    grads, _ = _backward(model, cache, dlogits, down_to=0, need_params=True)
    return loss, grads


def train(model: TinyLM, corpus: Sequence[int], steps: int, hyper: TrainingHyper) -> TrainingResult:
    """
    Train a copy of the model with Adam on random corpus windows.

    Args:
        model: Starting weights (left untouched)
        corpus: Token ids of the training text
        steps: Number of optimizer steps
        hyper: Learning rate, batch shape, seed and Adam settings

    Returns:
        TrainingResult with the new model and per-step losses
    """
    data = np.asarray(corpus, dtype=np.int64)
    cfg = model.config
    if data.size < hyper.seq_len + 1:
        raise CorpusTooSmall(f"corpus has {data.size} tokens, need at least {hyper.seq_len + 1}")
    if hyper.seq_len + cfg.offset > cfg.max_seq:
        raise ValueError(f"seq_len={hyper.seq_len} does not fit max_seq={cfg.max_seq}")
    if steps <= 0:
        return TrainingResult(model=model.with_params({}), losses=[])

    rng = np.random.default_rng(hyper.seed)
    params = {k: np.array(v) for k, v in model.params.items()}
    adam = AdamState(params, hyper.beta1, hyper.beta2, hyper.adam_eps)
    window = hyper.seq_len + 1
    offsets = np.arange(window)
    losses: List[float] = []

    logger.info(f"Training {model.n_parameters()} parameters for {steps} steps on {data.size} tokens")
    for step in range(steps):
        starts = rng.integers(0, data.size - window + 1, size=hyper.batch_size)
        batch = data[starts[:, None] + offsets[None, :]]
        loss, grads = loss_and_grads(TinyLM.wrap_unchecked(cfg, params), batch)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"training loss became {loss} at step {step}")
        clip_global_norm(grads, hyper.grad_clip)
        adam.step(params, grads, hyper.learning_rate)
        losses.append(loss)
        if (step + 1) % hyper.log_every == 0 or step == steps - 1:
            logger.info(f"step {step + 1}/{steps} loss {loss:.4f}")

    trained = TinyLM(cfg, params)
    if cfg.pos_swap != "off":
        # keep the swapped position rows tied
        trained = apply_pos_swap(trained, cfg.pos_swap)
    return TrainingResult(model=trained, losses=losses)
