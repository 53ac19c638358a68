from dataclasses import dataclass, field
from typing import List, Optional, TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from app.schemas import CooccurrenceSpec

QUADRANTS = ("TL", "TR", "BL", "BR")


@dataclass
class GlyphAtlas:
    """Per-class sprites (q, G, G) in [0, 1] and per-class contrast in (0, 1]."""

    sprites: np.ndarray
    contrast: np.ndarray
    seed: int

    @property
    def num_classes(self) -> int:
        return self.sprites.shape[0]

    @property
    def glyph_side(self) -> int:
        return self.sprites.shape[1]


@dataclass(frozen=True)
class Placement:
    class_index: int
    quadrant: int
    row_offset: int
    col_offset: int


@dataclass
class SceneExample:
    image: np.ndarray
    labels: np.ndarray
    placements: List[Placement] = field(default_factory=list)


@dataclass
class Dataset:
    """
    Examples stored column-wise: images (n, S, S) float32, labels (n, q) uint8.

    Placements are kept when the dataset was generated in-process; datasets
    read back from disk carry an empty placement list.
    """

    images: np.ndarray
    labels: np.ndarray
    split: str
    seed: int
    spec: Optional["CooccurrenceSpec"] = None
    placements: List[List[Placement]] = field(default_factory=list)
    noise_sd: float = 0.0

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, index: int) -> SceneExample:
        placements = self.placements[index] if self.placements else []
        return SceneExample(self.images[index], self.labels[index], placements)

    @property
    def image_side(self) -> int:
        return self.images.shape[1]

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    def flat_images(self, index=slice(None)) -> np.ndarray:
        """Flattened float64 pixels for the selected examples."""
        images = self.images[index]
        return images.reshape(images.shape[0], -1).astype(np.float64)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            images=self.images[index],
            labels=self.labels[index],
            split=self.split,
            seed=self.seed,
            spec=self.spec,
            placements=[self.placements[i] for i in index] if self.placements else [],
            noise_sd=self.noise_sd,
        )
