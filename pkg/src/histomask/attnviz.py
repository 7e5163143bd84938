"""Attention rollout, class-token heatmaps, difference maps, and exports.

Rollout averages each layer's heads and multiplies the averaged matrices
across layers, later layers on the left, so row 0 of the result reads as the
class query propagated through the full depth.  No residual-identity mixing
is applied by default; pass ``mix_residual=True`` to average each layer with
the identity first, the common variant in the rollout literature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Heatmap",
    "class_attention_map",
    "diff_map",
    "export_heatmap",
    "read_heatmap_text",
    "rollout",
]

ABSENT_SENTINEL = "NA"


def rollout(
    stack: list[np.ndarray],
    mix_residual: bool = False,
    later_on_left: bool = True,
) -> np.ndarray:
    """Multiply head-averaged attention matrices across layers.

    ``stack`` holds one (H, S, S) matrix per layer, earliest layer first.
    Row-stochasticity over live keys is preserved: head averages of
    row-stochastic matrices are row-stochastic, and so are their products.
    """
    if not stack:
        raise ValueError("rollout needs at least one layer")
    shape = stack[0].shape
    if len(shape) != 3 or shape[1] != shape[2]:
        raise ValueError(f"expected (H, S, S) layer matrices, got {shape}")
    result = None
    for layer in stack:
        if layer.shape != shape:
            raise ValueError(f"layer shape {layer.shape} != {shape}")
        mean_heads = layer.mean(axis=0)
        if mix_residual:
            mean_heads = 0.5 * (mean_heads + np.eye(shape[1]))
        if result is None:
            result = mean_heads
        elif later_on_left:
            result = mean_heads @ result
        else:
            result = result @ mean_heads
    return result


@dataclass
class Heatmap:
    """An n-by-n grid of values with explicitly absent (background) cells."""

    values: np.ndarray
    absent: np.ndarray

    def __post_init__(self) -> None:
        if self.values.shape != self.absent.shape or self.values.ndim != 2:
            raise ValueError("values and absent mask must be equal 2-D shapes")
        present = self.values[~self.absent]
        if present.size and not np.all(np.isfinite(present)):
            raise ValueError("present heatmap cells must be finite")

    @property
    def side(self) -> int:
        return self.values.shape[0]

    def present_range(self) -> tuple[float, float]:
        present = self.values[~self.absent]
        if present.size == 0:
            raise ValueError("heatmap has no present cells")
        return float(present.min()), float(present.max())


def class_attention_map(rollout_matrix: np.ndarray, background: np.ndarray) -> Heatmap:
    """Class-token row of a rollout reshaped onto the region grid.

    ``background`` is the n^2 background flag vector of the region the
    forward pass ran on; those cells are marked absent regardless of the
    (exactly zero) weights the rollout carries for them.
    """
    s = rollout_matrix.shape[0]
    cells = s - 1
    n = int(np.sqrt(cells))
    if n * n != cells:
        raise ValueError(f"rollout size {s} does not fit a square grid plus class token")
    background = np.asarray(background, dtype=bool).reshape(cells)
    grid = rollout_matrix[0, 1:].reshape(n, n).copy()
    absent = background.reshape(n, n).copy()
    grid[absent] = 0.0
    return Heatmap(values=grid, absent=absent)


def diff_map(finetuned: Heatmap, pretrained: Heatmap) -> Heatmap:
    """Elementwise finetuned minus pretrained over the shared present cells."""
    if finetuned.values.shape != pretrained.values.shape or not np.array_equal(
        finetuned.absent, pretrained.absent
    ):
        raise ValueError("heatmap geometry or absent-cell sets differ")
    values = np.where(finetuned.absent, 0.0, finetuned.values - pretrained.values)
    return Heatmap(values=values, absent=finetuned.absent.copy())


def _format_value(v: float) -> str:
    return repr(float(v))


def export_heatmap(heatmap: Heatmap, path, fmt: str) -> None:
    """Write a heatmap as a P5 graymap or a delimited text file.

    P5: present cells min-max normalize onto gray 1..255 (a constant map is
    all 255), absent cells are 0 (black); the normalization bounds ride in a
    header comment line.  Text: header line with side, absent sentinel and
    bounds, then one tab-separated row per grid row with ``NA`` for absent
    cells; values print via repr so the text form round-trips exactly.
    """
    if fmt == "pgm":
        lo, hi = heatmap.present_range()
        span = hi - lo
        norm = np.ones_like(heatmap.values)
        if span > 0:
            norm = (heatmap.values - lo) / span
        gray = 1 + np.rint(norm * 254).astype(np.uint8)
        gray[heatmap.absent] = 0
        n = heatmap.side
        header = f"P5\n# bounds min={_format_value(lo)} max={_format_value(hi)}\n{n} {n}\n255\n"
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(gray.tobytes())
    elif fmt == "text":
        lo, hi = heatmap.present_range()
        n = heatmap.side
        lines = [
            f"side={n}\tabsent={ABSENT_SENTINEL}\tmin={_format_value(lo)}\tmax={_format_value(hi)}"
        ]
        for row in range(n):
            cells = [
                ABSENT_SENTINEL if heatmap.absent[row, col] else _format_value(heatmap.values[row, col])
                for col in range(n)
            ]
            lines.append("\t".join(cells))
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown export format '{fmt}', expected 'pgm' or 'text'")


def read_heatmap_text(path) -> Heatmap:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n")
        fields = dict(part.split("=", 1) for part in header.split("\t"))
        n = int(fields["side"])
        sentinel = fields["absent"]
        values = np.zeros((n, n))
        absent = np.zeros((n, n), dtype=bool)
        for row in range(n):
            cells = fh.readline().rstrip("\n").split("\t")
            if len(cells) != n:
                raise ValueError(f"heatmap row {row} has {len(cells)} cells, expected {n}")
            for col, cell in enumerate(cells):
                if cell == sentinel:
                    absent[row, col] = True
                else:
                    values[row, col] = float(cell)
    return Heatmap(values=values, absent=absent)
