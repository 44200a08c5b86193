from __future__ import annotations

import abc
import enum
from dataclasses import dataclass, field
from typing import List, Optional

from ..confidence import TokenObservation

STEP_SEPARATOR = "\n\n"


def split_at_separator(text: str, separator: str = STEP_SEPARATOR):
    """Return ``(prefix before the first separator, whether one was found)``."""
    idx = text.find(separator)
    if idx < 0:
        return text, False
    return text[:idx], True


class GeneratorError(RuntimeError):
    """A generator could not produce a step for one trace."""


class Backend(str, enum.Enum):
    SCRIPTED = "scripted"
    HTTP = "http"


@dataclass(frozen=True)
class GeneratorSpec:
    name: str
    param_count: int
    backend: Backend = Backend.SCRIPTED
    endpoint: Optional[str] = None
    temperature: float = 0.7
    stop_sequence: str = STEP_SEPARATOR
    max_tokens_per_step: int = 256

    def __post_init__(self):
        object.__setattr__(self, "backend", Backend(self.backend))
        if self.param_count <= 0:
            raise ValueError(f"param_count must be positive, got {self.param_count}")
        if (self.backend is Backend.HTTP) != (self.endpoint is not None):
            raise ValueError("endpoint must be set iff backend is http")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_tokens_per_step <= 0:
            raise ValueError("max_tokens_per_step must be positive")
        if not self.stop_sequence:
            raise ValueError("stop_sequence must be non-empty")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "param_count": self.param_count,
            "backend": self.backend.value,
            "endpoint": self.endpoint,
            "temperature": self.temperature,
            "stop_sequence": self.stop_sequence,
            "max_tokens_per_step": self.max_tokens_per_step,
        }


@dataclass
class StepOutput:
    text: str
    tokens: List[TokenObservation]
    eos: bool
    prompt_tokens: int = 0
    hit_separator: bool = field(default=False)


class Generator(abc.ABC):
    """Produces one reasoning step at a time.

    ``question_id`` and ``step_index`` let offline backends look up their
    script; network backends only need ``prompt``.
    """

    spec: GeneratorSpec

    @abc.abstractmethod
    def generate_step(self, prompt: str, question_id: str, step_index: int) -> StepOutput:
        ...

    def check(self) -> None:
        """Raise :class:`GeneratorError` if the backend is unreachable."""
