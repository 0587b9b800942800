from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class BBoxPrompt:
    """Box prompt in pixel-edge coordinates: ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def validate(self, img_size: int) -> "BBoxPrompt":
        if not (0 <= self.x0 < self.x1 <= img_size and 0 <= self.y0 < self.y1 <= img_size):
            raise ValidationError(f"degenerate or out-of-bounds box {self} for image size {img_size}")
        return self

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.int64)

    def to_list(self) -> list[int]:
        return [int(self.x0), int(self.y0), int(self.x1), int(self.y1)]

    @classmethod
    def from_seq(cls, seq) -> "BBoxPrompt":
        x0, y0, x1, y1 = (int(v) for v in seq)
        return cls(x0, y0, x1, y1)

    @classmethod
    def tight(cls, mask: np.ndarray) -> "BBoxPrompt":
        ys, xs = np.nonzero(mask)
        if ys.size == 0:
            raise ValidationError("cannot box an empty mask")
        return cls(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)

    def contains(self, mask: np.ndarray) -> bool:
        ys, xs = np.nonzero(mask)
        return bool(ys.size == 0 or (xs.min() >= self.x0 and xs.max() < self.x1
                                     and ys.min() >= self.y0 and ys.max() < self.y1))
