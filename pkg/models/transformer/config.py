from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, model_validator

BYTE_VOCAB = 256
BOS_ID = 256

BosMode = Literal["none", "prepend"]
PosSwap = Literal["off", "second_to_first", "first_to_second"]
KeyTap = Literal["post_activation", "pre_activation"]


class ModelConfig(BaseModel):
    """Shape and behaviour of a TinyLM.

    `edited_layer` is the block whose MLP down-projection is the editable W.
    `bos_mode` and `pos_swap` drive the BOS-removal and position-embedding
    ablations; `key_tap` chooses where the key is read inside the MLP.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 4
    d_mlp: int = 128
    vocab_size: int = BYTE_VOCAB + 1
    max_seq: int = 64
    edited_layer: int = 0
    bos_mode: BosMode = "none"
    bos_id: int = BOS_ID
    pos_swap: PosSwap = "off"
    key_tap: KeyTap = "post_activation"
    ln_epsilon: float = 1e-5

    @model_validator(mode="before")
    @classmethod
    def _default_mlp_width(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("d_mlp") is None:
            data = {**data, "d_mlp": 4 * data.get("d_model", 32)}
        return data

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelConfig":
        if self.n_layers < 1 or self.d_model < 1 or self.n_heads < 1 or self.d_mlp < 1:
            raise ValueError("layer, width and head counts must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0 <= self.edited_layer < self.n_layers:
            raise ValueError(f"edited_layer={self.edited_layer} outside [0, {self.n_layers})")
        if self.max_seq < 2:
            raise ValueError("max_seq must be at least 2")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.bos_mode == "prepend" and not 0 <= self.bos_id < self.vocab_size:
            raise ValueError(f"bos_id={self.bos_id} outside vocabulary of size {self.vocab_size}")
        if self.ln_epsilon <= 0:
            raise ValueError("ln_epsilon must be positive")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def offset(self) -> int:
        """Internal position of the first caller-supplied token."""
        return 1 if self.bos_mode == "prepend" else 0

    @property
    def capacity(self) -> int:
        """Longest caller sequence that fits after the optional BOS."""
        return self.max_seq - self.offset
