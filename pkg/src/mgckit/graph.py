"""Static graph construction for token grids.

A grid of ``height x width`` tokens is connected by a fixed, vertex-transitive
pattern realized as cyclic shift offsets:

* ``svga`` with hop ``k``: every k-th token to the right in the row and every
  k-th token down in the column (unidirectional).
* ``mgc`` with distance ``l``: one link left, right, up, and down at distance
  ``l`` (bidirectional on both axes), five connections per token including the
  self-loop.

Shifts wrap at the borders, so every token has the same degree. On tiny grids
wrap-around can make offsets coincide; duplicates (and offsets that wrap onto
the token itself) are removed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

__all__ = [
    "SVGA",
    "MGC",
    "GraphPattern",
    "build_pattern",
    "connection_growth_table",
    "growth_table_to_csv",
    "growth_table_from_csv",
]

SVGA = "svga"
MGC = "mgc"


@dataclass(frozen=True)
class GraphPattern:
    """Connectivity of a token grid as an ordered list of cyclic shifts.

    ``shifts`` excludes the implicit self-connection; ``connections_per_token``
    counts it back in. The construction is vertex-transitive, so the count is
    the same for every token.
    """

    variant: str
    param: int  # svga hop k or mgc link distance l
    height: int
    width: int
    shifts: tuple[tuple[int, int], ...]

    @property
    def connections_per_token(self) -> int:
        return len(self.shifts) + 1

    def neighbor_list(self, i: int, j: int) -> set[tuple[int, int]]:
        """Neighbor coordinates of token ``(i, j)``, self included."""
        if not (0 <= i < self.height and 0 <= j < self.width):
            raise ValueError(
                f"token ({i}, {j}) outside grid {self.height}x{self.width}"
            )
        coords = {
            ((i + dy) % self.height, (j + dx) % self.width) for dy, dx in self.shifts
        }
        coords.add((i, j))
        return coords


def _dedupe_cyclic(
    shifts: Iterable[tuple[int, int]], height: int, width: int
) -> tuple[tuple[int, int], ...]:
    """Drop shifts that coincide modulo the grid, keeping first occurrences."""
    kept: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = {(0, 0)}  # never keep a self shift
    for dy, dx in shifts:
        key = (dy % height, dx % width)
        if key not in seen:
            seen.add(key)
            kept.append((dy, dx))
    return tuple(kept)


def build_pattern(variant: str, param: int, height: int, width: int) -> GraphPattern:
    """Construct the shift set for a grid; pure and deterministic.

    Shift order is row shifts ascending, then column shifts ascending.
    """
    if height < 1 or width < 1:
        raise ValueError(f"grid dims must be positive, got {height}x{width}")
    if param < 1:
        raise ValueError(f"graph parameter must be >= 1, got {param}")
    if variant == SVGA:
        k = param
        row = [(0, m * k) for m in range(1, (width - 1) // k + 1)]
        col = [(m * k, 0) for m in range(1, (height - 1) // k + 1)]
        shifts = _dedupe_cyclic(row + col, height, width)
    elif variant == MGC:
        l = param
        if l >= max(height, width):
            raise ValueError(
                f"link distance {l} degenerate for grid {height}x{width} "
                f"(must be < max dim)"
            )
        shifts = _dedupe_cyclic(
            [(0, -l), (0, l), (-l, 0), (l, 0)], height, width
        )
    else:
        raise ValueError(f"unknown graph variant {variant!r}")
    return GraphPattern(variant, param, height, width, shifts)


def connection_growth_table(
    variant: str, resolutions: Sequence[int], param: int
) -> list[dict]:
    """Connections per token across square resolutions.

    For svga the count grows as ``1 + floor((w-1)/k) + floor((h-1)/k)``; for
    mgc it is constant (at most 5) regardless of resolution.
    """
    rows = []
    for r in resolutions:
        if r < 1:
            raise ValueError(f"resolution must be positive, got {r}")
        pattern = build_pattern(variant, param, r, r)
        rows.append(
            {
                "variant": variant,
                "param": param,
                "height": r,
                "width": r,
                "connections": pattern.connections_per_token,
            }
        )
    return rows


_GROWTH_FIELDS = ["variant", "param", "height", "width", "connections"]


def growth_table_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_GROWTH_FIELDS)
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def growth_table_from_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    rows = []
    for raw in reader:
        rows.append(
            {
                "variant": raw["variant"],
                "param": int(raw["param"]),
                "height": int(raw["height"]),
                "width": int(raw["width"]),
                "connections": int(raw["connections"]),
            }
        )
    return rows
