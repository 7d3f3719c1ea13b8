import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from models.errors import CorpusTooSmall, EmptyInput
from models.linalg.tensor_core import Matrix, Vector, check_symmetric
from models.transformer.config import BYTE_VOCAB
from models.transformer.tiny_lm import TinyLM, forward, log_softmax
from models.transformer.weights import read_container, write_container

logger = logging.getLogger(__name__)

PrefixSource = Literal["model_generated", "random_bytes", "user_supplied"]
Tokens = Tuple[int, ...]

KIND_SECOND_MOMENT = "second_moment"
DEFAULT_RELATIVE_RIDGE = 1e-4


@dataclass(frozen=True)
class PrefixSet:
    """The N contexts x_1..x_N prepended to a subject when averaging its key."""

    prefixes: Tuple[Tokens, ...]
    seed: int = 0
    source: PrefixSource = "user_supplied"

    def __post_init__(self):
        if len(self.prefixes) < 1:
            raise EmptyInput("a prefix set needs at least one prefix")
        object.__setattr__(self, "prefixes", tuple(tuple(int(t) for t in p) for p in self.prefixes))

    @classmethod
    def from_texts(cls, texts: Iterable[str], seed: int = 0) -> "PrefixSet":
        return cls(tuple(tuple(t.encode("utf-8")) for t in texts), seed=seed, source="user_supplied")

    @classmethod
    def empty(cls) -> "PrefixSet":
        """A single empty prefix; the prefixed key then equals the unprefixed one."""
        return cls(((),), seed=0, source="user_supplied")

    def __len__(self) -> int:
        return len(self.prefixes)

    def __iter__(self) -> Iterator[Tokens]:
        return iter(self.prefixes)

    def __getitem__(self, i: int) -> Tokens:
        return self.prefixes[i]


@dataclass(frozen=True)
class KeyBundle:
    """Prefixed key k̄, unprefixed key k^u and the per-prefix keys averaged into k̄."""

    k_bar: Vector
    k_u: Vector
    per_prefix_keys: Matrix
    subject_tokens: Tokens
    subject_last_index: int

    @property
    def n_prefixes(self) -> int:
        return self.per_prefix_keys.shape[0]


@dataclass(frozen=True)
class SecondMoment:
    """C = mean(k kᵀ) + ridge·I over corpus keys of one layer."""

    C: Matrix
    sample_count: int
    ridge: float
    layer: int

    def __post_init__(self):
        check_symmetric(self.C, rtol=1e-12)

    @property
    def dim(self) -> int:
        return self.C.shape[0]


class SecondMomentAccumulator:
    """Running sum of key outer products, reduced in a fixed order."""

    def __init__(self, dim: int):
        self._n = 0
        self._sum = np.zeros((dim, dim))
        self._dim = dim

    @property
    def count(self) -> int:
        return self._n

    def update(self, keys: np.ndarray) -> None:
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        if keys.shape[0] == 0:
            return
        self._sum += keys.T @ keys
        self._n += keys.shape[0]

    def mean_outer(self) -> Matrix:
        if self._n == 0:
            raise CorpusTooSmall("no key samples were accumulated")
        return self._sum / self._n


def second_moment_from_accumulator(
    acc: SecondMomentAccumulator,
    layer: int,
    ridge: Optional[float] = None,
    relative_ridge: float = DEFAULT_RELATIVE_RIDGE,
) -> SecondMoment:
    """
    Finalize an accumulator into a positive-definite SecondMoment.

    Args:
        acc: Accumulated keys
        layer: Layer the keys were read from
        ridge: Absolute ridge ε; when None, relative_ridge times the mean diagonal

    Returns:
        SecondMoment with C symmetrized exactly
    """
    mean = acc.mean_outer()
    eps = float(ridge) if ridge is not None else relative_ridge * float(np.mean(np.diag(mean)))
    if not eps > 0:
        raise ValueError(f"ridge must be positive, got {eps}")
    C = mean + eps * np.eye(mean.shape[0])
    C = 0.5 * (C + C.T)
    return SecondMoment(C=C, sample_count=acc.count, ridge=eps, layer=layer)


def unprefixed_key(model: TinyLM, subject: Sequence[int]) -> Vector:
    """Key of the bare subject at its last token (BOS handling follows the model config)."""
    trace = forward(model, subject)
    return trace.tapped_keys[len(subject) - 1].copy()


def prefixed_key(model: TinyLM, subject: Sequence[int], prefixes: PrefixSet) -> KeyBundle:
    """
    Average the subject's key over its prefixed contexts.

    Args:
        model: The model
        subject: Subject token span
        prefixes: Contexts x_i; each forward runs on x_i followed by the subject

    Returns:
        KeyBundle holding k̄ (mean over prefixes), k^u and every per-prefix key
    """
    subject = tuple(int(t) for t in subject)
    if not subject:
        raise EmptyInput("subject must contain at least one token")
    keys = []
    for prefix in prefixes:
        trace = forward(model, prefix + subject)
        keys.append(trace.tapped_keys[len(prefix) + len(subject) - 1])
    per_prefix = np.array(keys)
    return KeyBundle(
        k_bar=per_prefix.mean(axis=0),
        k_u=unprefixed_key(model, subject),
        per_prefix_keys=per_prefix,
        subject_tokens=subject,
        subject_last_index=len(subject) - 1,
    )


def _next_byte(model: TinyLM, seq: Sequence[int], rng: np.random.Generator, temperature: float) -> int:
    logits = forward(model, seq).logits[-1][:BYTE_VOCAB]
    logp = log_softmax(logits / temperature)
    probs = np.exp(logp)
    return int(rng.choice(BYTE_VOCAB, p=probs / probs.sum()))


def sample_prefixes(
    model: TinyLM,
    n: int,
    length: int,
    seed: int,
    source: PrefixSource = "model_generated",
    max_length: Optional[int] = None,
    temperature: float = 1.0,
) -> PrefixSet:
    """
    Draw N prefixes deterministically from a seed.

    model_generated starts each prefix at a random printable byte and extends
    it by sampling the model; random_bytes draws uniform bytes. With
    max_length set, each prefix length is drawn uniformly from
    [length, max_length] before its tokens.

    Args:
        model: Model used for model_generated sampling
        n: Number of prefixes
        length: Prefix length (minimum length when max_length is given)
        seed: Generator seed
        source: model_generated or random_bytes
        max_length: Optional upper bound for variable lengths
        temperature: Sampling temperature for model_generated

    Returns:
        PrefixSet tagged with its seed and source
    """
    if n < 1 or length < 1:
        raise ValueError("n and length must both be at least 1")
    if max_length is not None and max_length < length:
        raise ValueError(f"max_length={max_length} is below length={length}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    rng = np.random.default_rng(seed)

    if source == "random_bytes":
        if max_length is None:
            rows = rng.integers(0, BYTE_VOCAB, size=(n, length))
            return PrefixSet(tuple(tuple(r) for r in rows.tolist()), seed=seed, source=source)
        sizes = rng.integers(length, max_length + 1, size=n)
        rows = [tuple(rng.integers(0, BYTE_VOCAB, size=int(s)).tolist()) for s in sizes]
        return PrefixSet(tuple(rows), seed=seed, source=source)

    if source != "model_generated":
        raise ValueError(f"cannot sample prefixes from source {source!r}")
    prefixes = []
    for _ in range(n):
        size = length if max_length is None else int(rng.integers(length, max_length + 1))
        seq = [int(rng.integers(32, 127))]
        while len(seq) < size:
            seq.append(_next_byte(model, seq, rng, temperature))
        prefixes.append(tuple(seq))
    logger.debug(f"Sampled {n} model-generated prefixes with seed {seed}")
    return PrefixSet(tuple(prefixes), seed=seed, source=source)


def estimate_second_moment(
    model: TinyLM,
    corpus: Sequence[int],
    layer: Optional[int] = None,
    ridge: Optional[float] = None,
    max_samples: int = 100_000,
    window: Optional[int] = None,
    relative_ridge: float = DEFAULT_RELATIVE_RIDGE,
) -> SecondMoment:
    """
    Estimate C over keys from consecutive corpus windows.

    Windows are taken from the start of the corpus with stride `window`;
    every position of a window contributes one key until max_samples keys
    are collected.

    Windows are cut at fixed offsets, so self-concatenating the corpus
    leaves C unchanged only when max_samples is reached inside the first
    copy, or when the corpus length is a multiple of the window and
    max_samples covers both copies.

    Args:
        model: The model
        corpus: Token ids
        layer: Layer whose keys are read, edited layer by default
        ridge: Absolute ridge ε; None selects relative_ridge · mean diagonal
        max_samples: Upper bound on the number of keys M
        window: Window length, the model capacity by default
        relative_ridge: Ridge scale used when ridge is None

    Returns:
        SecondMoment for the layer
    """
    cfg = model.config
    layer = cfg.edited_layer if layer is None else layer
    if not 0 <= layer < cfg.n_layers:
        raise ValueError(f"layer={layer} outside [0, {cfg.n_layers})")
    data = np.asarray(corpus, dtype=np.int64)
    if data.size == 0:
        raise CorpusTooSmall("cannot estimate a second moment from an empty corpus")
    if max_samples < 1:
        raise ValueError("max_samples must be at least 1")
    window = min(window or cfg.capacity, cfg.capacity)

    acc = SecondMomentAccumulator(cfg.d_mlp)
    for start in range(0, data.size, window):
        keys = forward(model, data[start:start + window]).layer_keys[layer]
        acc.update(keys[: max_samples - acc.count])
        if acc.count >= max_samples:
            break
    moment = second_moment_from_accumulator(acc, layer, ridge, relative_ridge)
    logger.info(f"Estimated second moment at layer {layer} from {moment.sample_count} keys (ridge {moment.ridge:.3e})")
    return moment


def save_second_moment(moment: SecondMoment, path: Union[str, Path], config: Optional[dict] = None) -> Path:
    return write_container(
        path,
        KIND_SECOND_MOMENT,
        {"C": moment.C},
        config or {},
        {"sample_count": moment.sample_count, "ridge": moment.ridge, "layer": moment.layer},
    )


def load_second_moment(path: Union[str, Path]) -> SecondMoment:
    container = read_container(path, KIND_SECOND_MOMENT)
    meta = container.metadata
    return SecondMoment(
        C=container.tensors["C"],
        sample_count=int(meta["sample_count"]),
        ridge=float(meta["ridge"]),
        layer=int(meta["layer"]),
    )
