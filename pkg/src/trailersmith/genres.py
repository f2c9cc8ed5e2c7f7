"""Genre vocabulary and label sets"""

from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from trailersmith.errors import ValidationError

# Bit i of a GenreSet is GENRES[i]; the order is frozen.
GENRES: Tuple[str, ...] = (
    "action",
    "adventure",
    "comedy",
    "crime",
    "drama",
    "fantasy",
    "horror",
    "romance",
    "science-fiction",
    "thriller",
)
NUM_GENRES = len(GENRES)
GENRE_INDEX = {name: i for i, name in enumerate(GENRES)}


@dataclass(frozen=True, order=True)
class GenreSet:
    """Bitmask over the fixed genre vocabulary."""
    mask: int = 0

    def __post_init__(self):
        if not 0 <= self.mask < (1 << NUM_GENRES):
            raise ValidationError("Genre mask out of range", {"mask": self.mask})

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "GenreSet":
        mask = 0
        for name in names:
            key = str(name).strip().lower()
            if key not in GENRE_INDEX:
                raise ValidationError(f"Unknown genre '{name}'", {"vocabulary": ",".join(GENRES)})
            mask |= 1 << GENRE_INDEX[key]
        return cls(mask)

    @classmethod
    def from_indices(cls, indices: Iterable[int]) -> "GenreSet":
        mask = 0
        for i in indices:
            if not 0 <= int(i) < NUM_GENRES:
                raise ValidationError("Genre index out of range", {"index": i})
            mask |= 1 << int(i)
        return cls(mask)

    @classmethod
    def from_vector(cls, vector: Sequence[float]) -> "GenreSet":
        if len(vector) != NUM_GENRES:
            raise ValidationError("Label vector has wrong width", {"width": len(vector)})
        return cls.from_indices(i for i, v in enumerate(vector) if v >= 0.5)

    @property
    def indices(self) -> List[int]:
        return [i for i in range(NUM_GENRES) if self.mask >> i & 1]

    @property
    def names(self) -> List[str]:
        return [GENRES[i] for i in self.indices]

    def to_vector(self) -> np.ndarray:
        """0/1 float vector of width g."""
        vector = np.zeros(NUM_GENRES, dtype=np.float64)
        vector[self.indices] = 1.0
        return vector

    def __len__(self) -> int:
        return bin(self.mask).count("1")

    def __contains__(self, name: str) -> bool:
        index = GENRE_INDEX.get(name)
        return index is not None and bool(self.mask >> index & 1)

    def __str__(self) -> str:
        return "|".join(self.names)


def label_matrix(labelsets: Sequence[GenreSet]) -> np.ndarray:
    """Stack label sets into an n x g 0/1 matrix."""
    matrix = np.zeros((len(labelsets), NUM_GENRES), dtype=np.float64)
    for row, labels in enumerate(labelsets):
        matrix[row, labels.indices] = 1.0
    return matrix
