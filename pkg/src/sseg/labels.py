"""Class vocabularies and predicted segmentation maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InputError

BACKGROUND = "background"


@dataclass
class ClassVocabulary:
    names: list[str]
    prompt_template: str = "{}"

    def __post_init__(self):
        self.names = list(self.names)
        if not self.names:
            raise InputError("class vocabulary is empty")
        if len(set(self.names)) != len(self.names):
            dupes = sorted({n for n in self.names if self.names.count(n) > 1})
            raise InputError(f"duplicate class names: {dupes}")
        if self.prompt_template.count("{}") != 1:
            raise InputError("prompt_template needs exactly one '{}' placeholder")

    def __len__(self):
        return len(self.names)

    def prompts(self) -> list[str]:
        return [self.prompt_template.format(n) for n in self.names]


@dataclass
class SegmentationMap:
    labels: np.ndarray
    legend: ClassVocabulary
    background_index: Optional[int] = None
    scores: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        valid = (self.labels >= 0) & (self.labels < len(self.legend))
        if self.background_index is not None:
            if 0 <= self.background_index < len(self.legend):
                raise InputError("background_index collides with a class index")
            valid |= self.labels == self.background_index
        if not np.all(valid):
            raise InputError("segmentation map holds labels outside its legend")

    def names_with_background(self) -> dict[int, str]:
        out = dict(enumerate(self.legend.names))
        if self.background_index is not None:
            out[self.background_index] = BACKGROUND
        return out
