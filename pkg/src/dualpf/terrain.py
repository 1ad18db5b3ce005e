"""Gridded terrain height maps with bilinear interpolation.

Heights are stored with row index increasing northwards: node ``(i, j)``
sits at ``origin + (j * cell_size, i * cell_size)``. The ASCII grid reader
and writer flip rows so files keep the usual north-first row order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class TerrainMap:
    origin: np.ndarray
    cell_size: float
    heights: np.ndarray

    def __post_init__(self) -> None:
        h = np.asarray(self.heights, dtype=float)
        if h.ndim != 2 or min(h.shape) < 2:
            raise ValueError("heights must be a 2-D grid with at least 2x2 nodes")
        if not np.isfinite(h).all():
            raise ValueError("heights must be finite")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(2))

    @property
    def n_rows(self) -> int:
        return self.heights.shape[0]

    @property
    def n_cols(self) -> int:
        return self.heights.shape[1]

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """``(x_min, x_max, y_min, y_max)`` of the node footprint."""
        x0, y0 = self.origin
        return (x0, x0 + (self.n_cols - 1) * self.cell_size,
                y0, y0 + (self.n_rows - 1) * self.cell_size)

    def _locate(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if not np.isfinite(p).all():
            raise ValueError("terrain query with non-finite coordinates")
        g = (p - self.origin) / self.cell_size  # (col, row) fractional index
        limits = np.array([self.n_cols - 1, self.n_rows - 1], dtype=float)
        outside = ((g < 0) | (g > limits)).any(axis=1)
        g = np.clip(g, 0.0, limits)
        return g, outside

    def _patch(self, cell, frac):
        j, i = cell[:, 0], cell[:, 1]
        h = self.heights
        return h[i, j], h[i, j + 1], h[i + 1, j], h[i + 1, j + 1], frac[:, 0], frac[:, 1]

    def height(self, points, return_outside: bool = False):
        """Bilinear height at ``(N, 2)`` points; out-of-footprint queries are clamped."""
        g, outside = self._locate(points)
        limits = np.array([self.n_cols - 2, self.n_rows - 2])
        cell = np.minimum(np.floor(g).astype(int), limits)
        h00, h01, h10, h11, tx, ty = self._patch(cell, g - cell)
        z = (1 - tx) * (1 - ty) * h00 + tx * (1 - ty) * h01 + (1 - tx) * ty * h10 + tx * ty * h11
        return (z, outside) if return_outside else z

    def _dx(self, cell, g):
        h00, h01, h10, h11, _, ty = self._patch(cell, g - cell)
        return ((1 - ty) * (h01 - h00) + ty * (h11 - h10)) / self.cell_size

    def _dy(self, cell, g):
        h00, h01, h10, h11, tx, _ = self._patch(cell, g - cell)
        return ((1 - tx) * (h10 - h00) + tx * (h11 - h01)) / self.cell_size

    def gradient(self, points, return_outside: bool = False):
        """Exact derivative of the bilinear patch, averaged across shared cell edges."""
        g, outside = self._locate(points)
        limits = np.array([self.n_cols - 2, self.n_rows - 2])
        cell = np.minimum(np.floor(g).astype(int), limits)
        # interior node lines, where the one-sided derivatives differ
        edge = (g == np.floor(g)) & (g > 0) & (g <= limits)
        dx, dy = self._dx(cell, g), self._dy(cell, g)
        if edge[:, 0].any():
            west = cell.copy()
            west[:, 0] = np.where(edge[:, 0], cell[:, 0] - 1, cell[:, 0])
            dx = 0.5 * (dx + self._dx(west, g))
        if edge[:, 1].any():
            south = cell.copy()
            south[:, 1] = np.where(edge[:, 1], cell[:, 1] - 1, cell[:, 1])
            dy = 0.5 * (dy + self._dy(south, g))
        grad = np.stack([dx, dy], axis=1)
        return (grad, outside) if return_outside else grad


# ---------------------------------------------------------------------------
# ASCII grid I/O
# ---------------------------------------------------------------------------

_HEADER = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")


def read_ascii_grid(path: str | Path) -> TerrainMap:
    header: dict[str, float] = {}
    values: list[float] = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            key = parts[0].lower()
            if key in _HEADER or key == "nodata_value":
                header[key] = float(parts[1])
            else:
                values.extend(float(v) for v in parts)
    missing = [k for k in _HEADER if k not in header]
    if missing:
        raise ValueError(f"terrain file missing header fields: {missing}")
    nrows, ncols = int(header["nrows"]), int(header["ncols"])
    if len(values) != nrows * ncols:
        raise ValueError(f"expected {nrows * ncols} height values, found {len(values)}")
    grid = np.array(values).reshape(nrows, ncols)[::-1]
    return TerrainMap(np.array([header["xllcorner"], header["yllcorner"]]), header["cellsize"], grid)


def write_ascii_grid(terrain: TerrainMap, path: str | Path) -> None:
    lines = [
        f"ncols {terrain.n_cols}",
        f"nrows {terrain.n_rows}",
        f"xllcorner {float(terrain.origin[0])!r}",
        f"yllcorner {float(terrain.origin[1])!r}",
        f"cellsize {float(terrain.cell_size)!r}",
    ]
    for row in terrain.heights[::-1]:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Synthetic maps
# ---------------------------------------------------------------------------


def _mesh(n_rows, n_cols, cell_size, origin):
    x = origin[0] + cell_size * np.arange(n_cols)
    y = origin[1] + cell_size * np.arange(n_rows)
    return np.meshgrid(x, y)


def flat_map(n_rows=21, n_cols=21, cell_size=50.0, height=100.0, origin=(0.0, 0.0)) -> TerrainMap:
    return TerrainMap(np.array(origin), cell_size, np.full((n_rows, n_cols), float(height)))


def ramp_map(n_rows=21, n_cols=21, cell_size=50.0, slope=(1.0, 0.0), base=0.0, origin=(0.0, 0.0)) -> TerrainMap:
    X, Y = _mesh(n_rows, n_cols, cell_size, origin)
    return TerrainMap(np.array(origin), cell_size, base + slope[0] * X + slope[1] * Y)


def two_hill_map(n_rows=41, n_cols=81, cell_size=25.0, centers=((500.0, 500.0), (1500.0, 500.0)),
                 height=150.0, width=150.0, base=50.0, origin=(0.0, 0.0)) -> TerrainMap:
    """Two identical Gaussian hills on a flat plain."""
    X, Y = _mesh(n_rows, n_cols, cell_size, origin)
    h = np.full_like(X, base)
    for cx, cy in centers:
        h += height * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * width ** 2))
    return TerrainMap(np.array(origin), cell_size, h)


def two_zone_map(n_rows=41, n_cols=81, cell_size=25.0, split_x=1000.0, base=100.0,
                 roughness=40.0, correlation_cells=2.0, seed=0, origin=(0.0, 0.0)) -> TerrainMap:
    """Flat terrain west of ``split_x`` and a seeded rough field east of it."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    X, _ = _mesh(n_rows, n_cols, cell_size, origin)
    noise = gaussian_filter(rng.standard_normal((n_rows, n_cols)), correlation_cells, mode="reflect")
    noise *= roughness / noise.std()
    rough = X >= split_x
    return TerrainMap(np.array(origin), cell_size, base + np.where(rough, noise, 0.0))


GENERATORS = {
    "flat": flat_map,
    "ramp": ramp_map,
    "two_hill": two_hill_map,
    "two_zone": two_zone_map,
}


def generate(kind: str, **kwargs) -> TerrainMap:
    try:
        gen = GENERATORS[kind]
    except KeyError:
        raise ValueError(f"unknown terrain kind {kind!r}; choose from {sorted(GENERATORS)}") from None
    return gen(**kwargs)
