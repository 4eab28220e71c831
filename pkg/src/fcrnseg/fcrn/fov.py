"""Reference field-of-view rows from the VOC and Cityscapes ablation tables."""
from __future__ import annotations

from dataclasses import dataclass

from .config import compute_fov


@dataclass(frozen=True)
class FovRow:
    table: str
    depth: int
    stride: int
    kernel: int
    dilation: int
    fov: int


def _rows(table, depth, entries):
    return [FovRow(table, depth, s, k, d, f) for s, k, d, f in entries]


_VOC = [(16, 3, 6, 208), (8, 3, 6, 104), (8, 3, 12, 200), (8, 3, 18, 296),
        (8, 5, 6, 200), (8, 5, 12, 392), (8, 7, 6, 296)]
_CITY_50 = _VOC[:6] + [(8, 5, 18, 584), (8, 7, 6, 296), (8, 7, 12, 584)]

REFERENCE_ROWS: list[FovRow] = (
    _rows("voc-val", 50, _VOC)
    + _rows("voc-val", 101, _VOC)
    + _rows("cityscapes-val", 50, _CITY_50)
    + _rows("cityscapes-val", 101, _VOC)
    + _rows("cityscapes-val", 152, _VOC)
)


def distinct_settings(rows=REFERENCE_ROWS) -> list[tuple[int, int, int, int]]:
    """Unique (stride, kernel, dilation, fov) tuples in first-seen order."""
    seen = {}
    for r in rows:
        seen.setdefault((r.stride, r.kernel, r.dilation, r.fov), None)
    return list(seen)


def fov_table(rows=REFERENCE_ROWS) -> tuple[list[tuple[FovRow, int]], list[tuple[FovRow, int]]]:
    """Return ``(all rows with computed FoV, mismatching rows)``."""
    out = [(r, compute_fov(r.stride, r.kernel, r.dilation)) for r in rows]
    return out, [(r, c) for r, c in out if c != r.fov]


def format_fov_table(computed) -> str:
    lines = [f"{'table':<15} {'depth':>5} {'res':>5} {'kernel':>6} {'dil':>4} {'fov':>5} {'ref':>5}  ok"]
    for r, c in computed:
        lines.append(f"{r.table:<15} {r.depth:>5} {'1/' + str(r.stride):>5} {r.kernel:>6} "
                     f"{r.dilation:>4} {c:>5} {r.fov:>5}  {'yes' if c == r.fov else 'NO'}")
    return "\n".join(lines)
