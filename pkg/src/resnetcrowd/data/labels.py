"""Density level labels inferred from person counts."""

from __future__ import annotations

# Inclusive upper count bound of levels 1-4; anything above is level 5.
LEVEL_UPPER_BOUNDS = (20, 50, 100, 200)
NUM_LEVELS = len(LEVEL_UPPER_BOUNDS) + 1


def density_level_from_count(count: int) -> int:
    """Map a person count to its density level 1..5.

    0-20 -> 1, 21-50 -> 2, 51-100 -> 3, 101-200 -> 4, 201+ -> 5.
    """
    if count < 0:
        raise ValueError(f"count must be nonnegative, got {count}")
    for level, upper in enumerate(LEVEL_UPPER_BOUNDS, start=1):
        if count <= upper:
            return level
    return NUM_LEVELS


def level_count_range(level: int) -> tuple[int, int | None]:
    """Inclusive ``(min, max)`` count of a level; max is None for the open top level."""
    if not 1 <= level <= NUM_LEVELS:
        raise ValueError(f"density level must be in 1..{NUM_LEVELS}, got {level}")
    lo = 0 if level == 1 else LEVEL_UPPER_BOUNDS[level - 2] + 1
    hi = LEVEL_UPPER_BOUNDS[level - 1] if level < NUM_LEVELS else None
    return lo, hi
