"""Snippet sampling (training) and snippet partitioning (inference) over a clip sequence."""

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from trailersmith.errors import ArgumentError


@dataclass(frozen=True)
class Snippet:
    """c clip indices into T, consecutive from `start` and cycle-padded when T runs out."""
    start: int
    clip_indices: Tuple[int, ...]

    @property
    def c(self) -> int:
        return len(self.clip_indices)


@dataclass(frozen=True)
class SnippetPlan:
    snippets: Tuple[Snippet, ...]

    @property
    def q(self) -> int:
        return len(self.snippets)

    def __iter__(self):
        return iter(self.snippets)

    def __len__(self) -> int:
        return len(self.snippets)


def _cycled(start: int, available: int, c: int) -> Tuple[int, ...]:
    """c indices start, start+1, ..., wrapping back to start after `available` clips."""
    return tuple(start + (k % available) for k in range(c))


def sample_training_snippet(t_len: int, c: int, rng: np.random.Generator) -> Snippet:
    """One snippet with a start drawn uniformly over every full window of T."""
    if c < 1:
        raise ArgumentError("Clips per snippet must be at least 1", {"c": c})
    if t_len < 1:
        raise ArgumentError("Clip sequence is empty")
    if t_len < c:
        return Snippet(start=0, clip_indices=_cycled(0, t_len, c))
    start = int(rng.integers(0, t_len - c + 1))
    return Snippet(start=start, clip_indices=tuple(range(start, start + c)))


def enumerate_inference_snippets(t_len: int, c: int) -> SnippetPlan:
    """Partition T into ceil(|T| / c) snippets; a short last snippet cycles its own clips."""
    if c < 1:
        raise ArgumentError("Clips per snippet must be at least 1", {"c": c})
    if t_len < 1:
        raise ArgumentError("Clip sequence is empty")
    snippets = []
    for k in range(math.ceil(t_len / c)):
        start = k * c
        snippets.append(Snippet(start=start, clip_indices=_cycled(start, min(c, t_len - start), c)))
    return SnippetPlan(tuple(snippets))


def gather_snippet(rows: np.ndarray, snippet: Snippet) -> np.ndarray:
    """The c x b feature block of a snippet."""
    return rows[list(snippet.clip_indices)]


def training_start_range(t_len: int, c: int) -> List[int]:
    """Every start position sample_training_snippet can return."""
    return list(range(0, max(t_len - c, 0) + 1))
