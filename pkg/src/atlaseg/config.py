"""Global slice-grid configuration.

Every stage that touches 2D slices (slicing, prompting, the network,
inference) reads the same canonical grid: square slices of ``size`` pixels at
``pixel_spacing`` mm. The production default is 1024 x 1024 at 0.5 mm; tests
and desk-scale runs shrink it through :func:`set_slice_grid` or the
:func:`slice_grid` context manager so the whole pipeline stays consistent.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

# Embeddings and dense prompts live at 1/16 of the slice resolution.
EMBED_FACTOR = 16


@dataclass(frozen=True)
class SliceGrid:
    """Canonical 2D slice grid: ``size`` x ``size`` pixels at ``pixel_spacing`` mm."""

    size: int = 1024
    pixel_spacing: float = 0.5

    def __post_init__(self) -> None:
        if self.size <= 0 or self.size % EMBED_FACTOR != 0:
            raise ValueError(
                f"slice grid size must be a positive multiple of {EMBED_FACTOR}, got {self.size}"
            )
        if self.pixel_spacing <= 0:
            raise ValueError(f"pixel spacing must be positive, got {self.pixel_spacing}")

    @property
    def embed_size(self) -> int:
        """Spatial side length of embeddings / dense prompts (size / 16)."""
        return self.size // EMBED_FACTOR

    @property
    def extent_mm(self) -> float:
        return self.size * self.pixel_spacing


DEFAULT_GRID = SliceGrid()

_active_grid: SliceGrid = DEFAULT_GRID


def get_slice_grid() -> SliceGrid:
    """Return the slice grid currently in effect."""
    return _active_grid


def set_slice_grid(grid: SliceGrid) -> None:
    """Install ``grid`` as the process-wide canonical slice grid."""
    global _active_grid
    _active_grid = grid


@contextlib.contextmanager
def slice_grid(size: int, pixel_spacing: float):
    """Temporarily override the canonical slice grid (used by tests)."""
    previous = get_slice_grid()
    set_slice_grid(SliceGrid(size=size, pixel_spacing=pixel_spacing))
    try:
        yield get_slice_grid()
    finally:
        set_slice_grid(previous)
