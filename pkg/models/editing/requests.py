from dataclasses import dataclass, field, replace
from typing import Literal, Sequence, Tuple

from models.errors import EmptyInput
from models.editing.keyspace import PrefixSet, Tokens

EditMode = Literal["rome_inconsistent", "c_rome"]
EDIT_MODES: Tuple[str, ...] = ("rome_inconsistent", "c_rome")
SUBJECT_MARKER = "{}"


@dataclass(frozen=True)
class EditRequest:
    """
    A new fact (s, r, o*) to write into the model.

    The relation is implicit in the prompt: `prompt_tokens` holds p(s, r) with the
    subject span starting at `subject_start`, and the object is predicted at the
    last prompt position.
    """

    subject_tokens: Tokens
    prompt_tokens: Tokens
    subject_start: int
    old_object: int
    new_object: int
    prefixes: PrefixSet = field(default_factory=PrefixSet.empty)
    mode: EditMode = "c_rome"

    def __post_init__(self):
        subject = tuple(int(t) for t in self.subject_tokens)
        prompt = tuple(int(t) for t in self.prompt_tokens)
        object.__setattr__(self, "subject_tokens", subject)
        object.__setattr__(self, "prompt_tokens", prompt)
        if not subject:
            raise EmptyInput("subject must contain at least one token")
        end = self.subject_start + len(subject)
        if self.subject_start < 0 or prompt[self.subject_start:end] != subject:
            raise ValueError(f"subject span does not occur in the prompt at position {self.subject_start}")
        if self.old_object == self.new_object:
            raise ValueError("old and new object must differ")
        if self.old_object < 0 or self.new_object < 0:
            raise ValueError("object token ids must be non-negative")
        if self.mode not in EDIT_MODES:
            raise ValueError(f"unknown edit mode {self.mode!r}")

    @classmethod
    def from_template(
        cls,
        subject: str,
        template: str,
        old_object: str,
        new_object: str,
        prefixes: PrefixSet | None = None,
        mode: EditMode = "c_rome",
    ) -> "EditRequest":
        """Build a request from text; `{}` in the template marks the subject."""
        if template.count(SUBJECT_MARKER) != 1:
            raise ValueError(f"prompt template must contain exactly one {SUBJECT_MARKER!r} marker: {template!r}")
        head, tail = template.split(SUBJECT_MARKER)
        subject_tokens = tuple(subject.encode("utf-8"))
        head_tokens = tuple(head.encode("utf-8"))
        prompt = head_tokens + subject_tokens + tuple(tail.encode("utf-8"))
        return cls(
            subject_tokens=subject_tokens,
            prompt_tokens=prompt,
            subject_start=len(head_tokens),
            old_object=_single_byte(old_object, "old_object"),
            new_object=_single_byte(new_object, "new_object"),
            prefixes=prefixes or PrefixSet.empty(),
            mode=mode,
        )

    @property
    def target_position(self) -> int:
        return len(self.prompt_tokens) - 1

    @property
    def subject_last(self) -> int:
        return self.subject_start + len(self.subject_tokens) - 1

    @property
    def subject_is_initial(self) -> bool:
        return self.subject_start == 0

    def prefixed_prompt(self, prefix: Sequence[int]) -> Tuple[Tokens, int]:
        """Prompt with `prefix` prepended and the shifted subject-last position."""
        prefix = tuple(int(t) for t in prefix)
        return prefix + self.prompt_tokens, len(prefix) + self.subject_last

    def with_mode(self, mode: EditMode) -> "EditRequest":
        return replace(self, mode=mode)

    def with_prefixes(self, prefixes: PrefixSet) -> "EditRequest":
        return replace(self, prefixes=prefixes)


def _single_byte(text: str, name: str) -> int:
    raw = text.encode("utf-8")
    if len(raw) != 1:
        raise ValueError(f"{name} must encode to exactly one byte, got {text!r}")
    return raw[0]


CASE_GROUPS: Tuple[str, ...] = ("collapse_pattern", "normal")


def _contains(seq: Tokens, sub: Tokens) -> bool:
    n = len(sub)
    return any(seq[i:i + n] == sub for i in range(len(seq) - n + 1))


@dataclass(frozen=True)
class EvalCase:
    """An edit plus the prompts used to score it."""

    case_id: str
    edit: EditRequest
    paraphrase_prompts: Tuple[Tokens, ...] = ()
    locality_prompts: Tuple[Tuple[Tokens, int], ...] = ()

    def __post_init__(self):
        paraphrases = tuple(tuple(int(t) for t in p) for p in self.paraphrase_prompts)
        locality = tuple((tuple(int(t) for t in p), int(e)) for p, e in self.locality_prompts)
        object.__setattr__(self, "paraphrase_prompts", paraphrases)
        object.__setattr__(self, "locality_prompts", locality)
        subject = self.edit.subject_tokens
        for p in paraphrases:
            if not _contains(p, subject):
                raise ValueError(f"case {self.case_id}: paraphrase does not contain the subject")
        for p, _ in locality:
            if not p:
                raise EmptyInput(f"case {self.case_id}: empty locality prompt")
            if _contains(p, subject):
                raise ValueError(f"case {self.case_id}: locality prompt contains the subject")

    @property
    def group(self) -> str:
        """collapse_pattern when the subject is a single sequence-initial token."""
        edit = self.edit
        return "collapse_pattern" if edit.subject_is_initial and len(edit.subject_tokens) == 1 else "normal"

    def with_edit(self, edit: EditRequest) -> "EvalCase":
        return replace(self, edit=edit)
