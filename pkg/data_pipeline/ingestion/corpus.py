import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Tuple, Union

import numpy as np

from models.errors import CorpusTooSmall, IoError

logger = logging.getLogger(__name__)

DEFAULT_HELDOUT_BYTES = 4096


def encode_text(text: str) -> Tuple[int, ...]:
    """UTF-8 bytes of `text` as token ids 0..255."""
    return tuple(text.encode("utf-8"))


def decode_tokens(tokens: Iterable[int]) -> str:
    return bytes(int(t) for t in tokens if 0 <= int(t) < 256).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class ByteCorpus:
    """A byte-level corpus split into a held-out head and the training tail."""

    heldout: np.ndarray
    train: np.ndarray
    source: Optional[str] = None

    @property
    def n_tokens(self) -> int:
        return int(self.heldout.size + self.train.size)

    def probe_text(self, n_bytes: int) -> Tuple[int, ...]:
        """First n_bytes of the held-out slice, the fixed perplexity probe."""
        if n_bytes < 2:
            raise ValueError("a perplexity probe needs at least 2 bytes")
        if self.heldout.size < 2:
            raise CorpusTooSmall("held-out slice is too short for a perplexity probe")
        return tuple(int(t) for t in self.heldout[:n_bytes])


def split_heldout(tokens: Union[np.ndarray, Iterable[int]], heldout_bytes: int = DEFAULT_HELDOUT_BYTES,
                  source: Optional[str] = None) -> ByteCorpus:
    """
    Reserve the first `heldout_bytes` tokens; training only ever sees the rest.

    Args:
        tokens: Byte token ids
        heldout_bytes: Size of the held-out head

    Returns:
        ByteCorpus with both slices
    """
    data = np.asarray(list(tokens) if not isinstance(tokens, np.ndarray) else tokens, dtype=np.int64)
    if heldout_bytes < 0:
        raise ValueError("heldout_bytes must be non-negative")
    if data.size <= heldout_bytes:
        raise CorpusTooSmall(f"corpus has {data.size} bytes, need more than the {heldout_bytes} held-out bytes")
    return ByteCorpus(heldout=data[:heldout_bytes], train=data[heldout_bytes:], source=source)


class CorpusLoader:
    """Reads UTF-8 text files into byte corpora."""

    def __init__(self, heldout_bytes: int = DEFAULT_HELDOUT_BYTES):
        self.heldout_bytes = heldout_bytes

    def read_tokens(self, path: Union[str, Path]) -> np.ndarray:
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as e:
            raise IoError(f"could not read corpus {path}: {e}") from e
        # Bytes are the vocabulary; no decoding step is needed.
        return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    def load(self, path: Union[str, Path]) -> ByteCorpus:
        tokens = self.read_tokens(path)
        corpus = split_heldout(tokens, self.heldout_bytes, source=str(path))
        logger.info(f"Loaded corpus {path}: {corpus.train.size} training bytes, {corpus.heldout.size} held out")
        return corpus
