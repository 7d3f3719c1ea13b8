import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from models.errors import DimensionMismatch, SequenceTooLong, SequenceTooShort, TokenOutOfRange
from models.linalg.tensor_core import Matrix, Vector, as_vector
from models.transformer.config import ModelConfig, PosSwap

logger = logging.getLogger(__name__)

GELU_C = np.sqrt(2.0 / np.pi)
GELU_A = 0.044715
INIT_STD = 0.02

Params = Dict[str, np.ndarray]


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered parameter names and shapes. Linear maps are stored as (out, in)."""
    d, m = config.d_model, config.d_mlp
    shapes: Dict[str, Tuple[int, ...]] = {
        "wte": (config.vocab_size, d),
        "wpe": (config.max_seq, d),
    }
    for i in range(config.n_layers):
        shapes[f"h{i}.ln_1.g"] = (d,)
        shapes[f"h{i}.ln_1.b"] = (d,)
        shapes[f"h{i}.attn.w_q"] = (d, d)
        shapes[f"h{i}.attn.w_k"] = (d, d)
        shapes[f"h{i}.attn.w_v"] = (d, d)
        shapes[f"h{i}.attn.w_o"] = (d, d)
        shapes[f"h{i}.ln_2.g"] = (d,)
        shapes[f"h{i}.ln_2.b"] = (d,)
        shapes[f"h{i}.mlp.w_up"] = (m, d)
        shapes[f"h{i}.mlp.w_down"] = (d, m)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    return shapes


def down_proj_name(layer: int) -> str:
    return f"h{layer}.mlp.w_down"


class TinyLM:
    """
    Decoder-only pre-LayerNorm transformer over byte tokens.

    Weights are read-only numpy arrays; every modification goes through
    `with_params`, which returns a new model sharing the untouched tensors.
    The output head is tied to the token embedding table.
    """

    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray]):
        shapes = param_shapes(config)
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        if missing or extra:
            raise DimensionMismatch(
                f"parameter set mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}"
            )
        frozen: Params = {}
        for name, shape in shapes.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise DimensionMismatch(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            if arr.flags.writeable:
                arr = arr.copy()
                arr.flags.writeable = False
            frozen[name] = arr
        self.config = config
        self.params = frozen

    @classmethod
    def wrap_unchecked(cls, config: ModelConfig, params: Params) -> "TinyLM":
        """Wrap mutable arrays without copying or validation; used inside the training loop."""
        model = cls.__new__(cls)
        model.config = config
        model.params = params
        return model

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "TinyLM":
        """
        Build a randomly initialised model.

        Args:
            config: Model shape
            seed: Seed for the normal initialiser

        Returns:
            Fresh TinyLM; residual output projections are scaled by 1/sqrt(2 * n_layers)
        """
        rng = np.random.default_rng(seed)
        residual_std = INIT_STD / np.sqrt(2.0 * config.n_layers)
        params: Params = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".g"):
                params[name] = np.ones(shape)
            elif name.endswith(".b"):
                params[name] = np.zeros(shape)
            elif name.endswith("w_o") or name.endswith("w_down"):
                params[name] = rng.normal(0.0, residual_std, size=shape)
            else:
                params[name] = rng.normal(0.0, INIT_STD, size=shape)
        model = cls(config, params)
        if config.pos_swap != "off":
            model = apply_pos_swap(model, config.pos_swap)
        return model

    def param_names(self) -> List[str]:
        return list(self.params)

    def down_proj(self, layer: Optional[int] = None) -> Matrix:
        """The MLP down-projection W (d_model x d_mlp) of a layer, edited layer by default."""
        layer = self.config.edited_layer if layer is None else layer
        return self.params[down_proj_name(layer)]

    def with_params(self, updates: Mapping[str, np.ndarray], **config_changes) -> "TinyLM":
        config = self.config
        if config_changes:
            config = ModelConfig(**{**config.model_dump(), **config_changes})
        merged = dict(self.params)
        merged.update(updates)
        return TinyLM(config, merged)

    def with_config(self, **changes) -> "TinyLM":
        return self.with_params({}, **changes)

    def with_down_proj(self, W: Matrix, layer: Optional[int] = None) -> "TinyLM":
        layer = self.config.edited_layer if layer is None else layer
        name = down_proj_name(layer)
        W = np.asarray(W, dtype=np.float64)
        if W.shape != self.params[name].shape:
            raise DimensionMismatch(f"W has shape {W.shape}, expected {self.params[name].shape}")
        return self.with_params({name: W})

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


@dataclass(frozen=True)
class ForwardTrace:
    """
    Per-position outputs of one forward pass.

    Arrays are indexed by caller positions; when a BOS token was prepended
    internally, its position is dropped and `offset` is 1.
    """

    logits: np.ndarray
    tapped_keys: np.ndarray
    tapped_values: np.ndarray
    layer_keys: Tuple[np.ndarray, ...]
    offset: int

    def internal_position(self, pos: int) -> int:
        return pos + self.offset

    def __len__(self) -> int:
        return self.logits.shape[0]


# --- elementary blocks -------------------------------------------------------

def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_backward(dy: np.ndarray, cache, g: np.ndarray):
    xhat, rstd = cache
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dg, db


def gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + np.tanh(GELU_C * (u + GELU_A * u ** 3)))


def _gelu_grad(u: np.ndarray) -> np.ndarray:
    t = np.tanh(GELU_C * (u + GELU_A * u ** 3))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


# --- batched forward / backward ----------------------------------------------

Injection = Tuple[int, int, np.ndarray]


def _forward(
    model: TinyLM,
    ids: np.ndarray,
    injection: Optional[Injection] = None,
    keep_cache: bool = False,
):
    """
    Batched forward over internal token ids of shape (B, T).

    `injection` is (layer, internal position, vector) and replaces the MLP
    output at that slot before the residual add.
    """
    cfg, P = model.config, model.params
    B, T = ids.shape
    H = cfg.n_heads
    scale = 1.0 / np.sqrt(cfg.head_dim)
    causal = np.tril(np.ones((T, T), dtype=bool))

    x = P["wte"][ids] + P["wpe"][:T][None, :, :]
    layers = []
    keys = []
    values = []
    for i in range(cfg.n_layers):
        a1, ln1 = _layer_norm(x, P[f"h{i}.ln_1.g"], P[f"h{i}.ln_1.b"], cfg.ln_epsilon)
        q = _split_heads(a1 @ P[f"h{i}.attn.w_q"].T, H)
        k = _split_heads(a1 @ P[f"h{i}.attn.w_k"].T, H)
        v = _split_heads(a1 @ P[f"h{i}.attn.w_v"].T, H)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = np.where(causal, scores, -np.inf)
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        p = e / e.sum(axis=-1, keepdims=True)
        o = _merge_heads(p @ v)
        x_mid = x + o @ P[f"h{i}.attn.w_o"].T

        a2, ln2 = _layer_norm(x_mid, P[f"h{i}.ln_2.g"], P[f"h{i}.ln_2.b"], cfg.ln_epsilon)
        u = a2 @ P[f"h{i}.mlp.w_up"].T
        kact = gelu(u)
        mlp_out = kact @ P[f"h{i}.mlp.w_down"].T
        if injection is not None and injection[0] == i:
            mlp_out = mlp_out.copy()
            mlp_out[:, injection[1], :] = injection[2]
        keys.append(kact if cfg.key_tap == "post_activation" else u)
        values.append(mlp_out)

        if keep_cache:
            layers.append(dict(x=x, ln1=ln1, a1=a1, q=q, k=k, v=v, p=p, o=o,
                               ln2=ln2, a2=a2, u=u, kact=kact))
        x = x_mid + mlp_out

    xf, lnf = _layer_norm(x, P["ln_f.g"], P["ln_f.b"], cfg.ln_epsilon)
    logits = xf @ P["wte"].T
    cache = dict(ids=ids, layers=layers, xf=xf, lnf=lnf, injection=injection) if keep_cache else None
    return logits, keys, values, cache


def _backward(
    model: TinyLM,
    cache,
    dlogits: np.ndarray,
    down_to: int = 0,
    need_params: bool = True,
):
    """
    Reverse-mode pass from d(loss)/d(logits).

    Processes blocks n_layers-1 .. down_to and returns (grads, dx) where dx is
    the gradient at the input of block `down_to`. Embedding gradients are only
    produced when down_to == 0.
    """
    cfg, P = model.config, model.params
    H = cfg.n_heads
    scale = 1.0 / np.sqrt(cfg.head_dim)
    d = cfg.d_model
    grads: Params = {}

    xf = cache["xf"]
    if need_params:
        grads["wte"] = dlogits.reshape(-1, dlogits.shape[-1]).T @ xf.reshape(-1, d)
    dxf = dlogits @ P["wte"]
    dx, dg, db = _layer_norm_backward(dxf, cache["lnf"], P["ln_f.g"])
    if need_params:
        grads["ln_f.g"], grads["ln_f.b"] = dg, db

    injection = cache["injection"]
    for i in range(cfg.n_layers - 1, down_to - 1, -1):
        c = cache["layers"][i]
        d_mlp_out = dx
        if injection is not None and injection[0] == i:
            d_mlp_out = dx.copy()
            d_mlp_out[:, injection[1], :] = 0.0
        dkact = d_mlp_out @ P[f"h{i}.mlp.w_down"]
        du = dkact * _gelu_grad(c["u"])
        da2 = du @ P[f"h{i}.mlp.w_up"]
        dln2, dg2, db2 = _layer_norm_backward(da2, c["ln2"], P[f"h{i}.ln_2.g"])
        dx_mid = dx + dln2

        do = dx_mid @ P[f"h{i}.attn.w_o"]
        do_h = _split_heads(do, H)
        p, q, k, v = c["p"], c["q"], c["k"], c["v"]
        dp = do_h @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ do_h
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = (ds @ k) * scale
        dk = (ds.transpose(0, 1, 3, 2) @ q) * scale
        dq_m, dk_m, dv_m = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
        da1 = (dq_m @ P[f"h{i}.attn.w_q"] + dk_m @ P[f"h{i}.attn.w_k"]
               + dv_m @ P[f"h{i}.attn.w_v"])
        dln1, dg1, db1 = _layer_norm_backward(da1, c["ln1"], P[f"h{i}.ln_1.g"])

        if need_params:
            a1 = c["a1"].reshape(-1, d)
            grads[f"h{i}.mlp.w_down"] = d_mlp_out.reshape(-1, d).T @ c["kact"].reshape(-1, cfg.d_mlp)
            grads[f"h{i}.mlp.w_up"] = du.reshape(-1, cfg.d_mlp).T @ c["a2"].reshape(-1, d)
            grads[f"h{i}.ln_2.g"], grads[f"h{i}.ln_2.b"] = dg2, db2
            grads[f"h{i}.attn.w_o"] = dx_mid.reshape(-1, d).T @ c["o"].reshape(-1, d)
            grads[f"h{i}.attn.w_q"] = dq_m.reshape(-1, d).T @ a1
            grads[f"h{i}.attn.w_k"] = dk_m.reshape(-1, d).T @ a1
            grads[f"h{i}.attn.w_v"] = dv_m.reshape(-1, d).T @ a1
            grads[f"h{i}.ln_1.g"], grads[f"h{i}.ln_1.b"] = dg1, db1
        dx = dx_mid + dln1

    if down_to == 0 and need_params:
        ids = cache["ids"]
        np.add.at(grads["wte"], ids.reshape(-1), dx.reshape(-1, d))
        dwpe = np.zeros_like(P["wpe"])
        dwpe[: ids.shape[1]] = dx.sum(axis=0)
        grads["wpe"] = dwpe
    return grads, dx


def cross_entropy_and_grad(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean next-token cross-entropy over all (batch, position) slots and its logit gradient."""
    logp = log_softmax(logits)
    B, T, V = logits.shape
    flat = logp.reshape(-1, V)
    idx = targets.reshape(-1)
    loss = -float(flat[np.arange(idx.size), idx].mean())
    dlogits = np.exp(flat)
    dlogits[np.arange(idx.size), idx] -= 1.0
    return loss, (dlogits / idx.size).reshape(B, T, V)


# --- public single-sequence API ----------------------------------------------

def encode_input(model: TinyLM, tokens: Iterable[int]) -> np.ndarray:
    """Validate a caller sequence and return internal ids of shape (1, T)."""
    cfg = model.config
    seq = np.asarray(list(tokens), dtype=np.int64)
    if seq.ndim != 1 or seq.size < 1:
        raise SequenceTooShort("token sequence must contain at least one token")
    if seq.size > cfg.capacity:
        raise SequenceTooLong(
            f"sequence of {seq.size} tokens exceeds capacity {cfg.capacity} (max_seq={cfg.max_seq})"
        )
    if seq.min() < 0 or seq.max() >= cfg.vocab_size:
        raise TokenOutOfRange(f"token ids must lie in [0, {cfg.vocab_size})")
    if cfg.bos_mode == "prepend":
        seq = np.concatenate([[cfg.bos_id], seq])
    return seq[None, :]


def _to_trace(model: TinyLM, logits, keys, values) -> ForwardTrace:
    off = model.config.offset
    edited = model.config.edited_layer
    return ForwardTrace(
        logits=logits[0, off:],
        tapped_keys=keys[edited][0, off:],
        tapped_values=values[edited][0, off:],
        layer_keys=tuple(k[0, off:] for k in keys),
        offset=off,
    )


def _check_pos(trace_len: int, pos: int, what: str = "pos") -> None:
    if not 0 <= pos < trace_len:
        raise ValueError(f"{what}={pos} outside sequence of length {trace_len}")


def forward(model: TinyLM, tokens: Sequence[int]) -> ForwardTrace:
    """
    Run the model on one token sequence.

    Args:
        model: The model
        tokens: Caller token ids; a BOS is prepended internally when bos_mode=prepend

    Returns:
        ForwardTrace with logits, edited-layer keys/values and keys of every layer
    """
    ids = encode_input(model, tokens)
    logits, keys, values, _ = _forward(model, ids)
    return _to_trace(model, logits, keys, values)


def forward_with_injection(model: TinyLM, tokens: Sequence[int], pos: int, v: Vector) -> ForwardTrace:
    """Forward pass with the edited-layer MLP output at caller position `pos` replaced by v."""
    ids = encode_input(model, tokens)
    _check_pos(ids.shape[1] - model.config.offset, pos)
    v = as_vector(v, "v")
    if v.shape != (model.config.d_model,):
        raise DimensionMismatch(f"v has shape {v.shape}, expected ({model.config.d_model},)")
    injection = (model.config.edited_layer, pos + model.config.offset, v)
    logits, keys, values, _ = _forward(model, ids, injection)
    return _to_trace(model, logits, keys, values)


def injection_loss_and_grad(
    model: TinyLM,
    tokens: Sequence[int],
    pos: int,
    v: Vector,
    targets: Sequence[Tuple[int, int]],
) -> Tuple[float, Vector]:
    """
    Summed negative log-likelihood of (token, position) targets under injection of v.

    Args:
        model: The model
        tokens: Caller token ids
        pos: Caller position whose edited-layer MLP output is replaced
        v: Injected vector in R^{d_model}
        targets: (token id, caller position) pairs whose NLL is summed

    Returns:
        (loss, exact gradient of the loss with respect to v)
    """
    cfg = model.config
    ids = encode_input(model, tokens)
    n = ids.shape[1] - cfg.offset
    _check_pos(n, pos)
    v = as_vector(v, "v")
    if v.shape != (cfg.d_model,):
        raise DimensionMismatch(f"v has shape {v.shape}, expected ({cfg.d_model},)")
    ipos = pos + cfg.offset
    logits, _, _, cache = _forward(model, ids, (cfg.edited_layer, ipos, v), keep_cache=True)

    logp = log_softmax(logits[0])
    dlogits = np.zeros_like(logits)
    loss = 0.0
    for token, tpos in targets:
        _check_pos(n, tpos, "target_pos")
        if not 0 <= token < cfg.vocab_size:
            raise TokenOutOfRange(f"target token {token} outside vocabulary")
        it = tpos + cfg.offset
        loss -= float(logp[it, token])
        dlogits[0, it] += np.exp(logp[it])
        dlogits[0, it, token] -= 1.0

    _, dx = _backward(model, cache, dlogits, down_to=cfg.edited_layer + 1, need_params=False)
    return loss, dx[0, ipos].copy()


def grad_wrt_injection(
    model: TinyLM,
    tokens: Sequence[int],
    pos: int,
    v: Vector,
    target: int,
    target_pos: int,
) -> Vector:
    """Gradient of -log P(target at target_pos) with respect to the injected vector."""
    _, grad = injection_loss_and_grad(model, tokens, pos, v, [(target, target_pos)])
    return grad


def apply_pos_swap(model: TinyLM, mode: PosSwap) -> TinyLM:
    """
    Copy one of the first two position-embedding rows onto the other.

    second_to_first writes row 1 into row 0; first_to_second writes row 0
    into row 1; off returns an unchanged copy.
    """
    if mode == "off":
        return model.with_params({})
    wpe = np.array(model.params["wpe"])
    if mode == "second_to_first":
        wpe[0] = wpe[1]
    elif mode == "first_to_second":
        wpe[1] = wpe[0]
    else:
        raise ValueError(f"unknown position swap mode: {mode}")
    logger.debug(f"Applied position-embedding swap {mode}")
    return model.with_params({"wpe": wpe}, pos_swap=mode)
