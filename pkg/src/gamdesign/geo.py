"""Transect geometry and raster covariate lookup.

Covariate surfaces live on a regular grid in a planar Easting/Northing frame.
The plain-text raster format is one or more layer blocks, each a 6-line
header (layer name, ncols, nrows, origin easting, origin northing, cell
size) followed by nrows lines of ncols values in row-major order with the
first row northernmost; NaN marks masked cells.  The origin is the grid's
lower-left corner.

A transect is a fixed-length survey line: start point snapped to a fishnet
cell center, heading angle, length.  Sampling a transect yields equally
spaced points along its centerline, which are then mapped to covariate
values (bilinear, mask-aware) and fishnet group ids to build a model design.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidParameter,
    MissingCovariate,
    ShapeMismatch,
    TransectOutOfBounds,
)
from .gamm import Design


@dataclass
class Raster:
    """Named covariate layers on one shared regular grid."""

    origin_e: float
    origin_n: float
    cell_size: float
    layers: dict[str, np.ndarray]  # (nrows, ncols), row 0 northernmost

    def __post_init__(self):
        if self.cell_size <= 0:
            raise InvalidParameter("cell size must be > 0")
        if not self.layers:
            raise InvalidParameter("raster needs at least one layer")
        shapes = {a.shape for a in self.layers.values()}
        if len(shapes) != 1:
            raise ShapeMismatch("raster layers differ in shape")

    @property
    def shape(self) -> tuple[int, int]:
        return next(iter(self.layers.values())).shape

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(e_min, e_max, n_min, n_max) of the grid's outer edges."""
        nrows, ncols = self.shape
        return (
            self.origin_e,
            self.origin_e + ncols * self.cell_size,
            self.origin_n,
            self.origin_n + nrows * self.cell_size,
        )

    def mask(self, layer: str = "depth") -> np.ndarray:
        return np.isfinite(self.layers[layer])

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(eastings per column, northings per row, row 0 northernmost)."""
        nrows, ncols = self.shape
        east = self.origin_e + (np.arange(ncols) + 0.5) * self.cell_size
        north = self.origin_n + (nrows - np.arange(nrows) - 0.5) * self.cell_size
        return east, north

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        e_min, e_max, n_min, n_max = self.extent
        return (
            (pts[:, 0] >= e_min)
            & (pts[:, 0] <= e_max)
            & (pts[:, 1] >= n_min)
            & (pts[:, 1] <= n_max)
        )

    def mean_value(self, layer: str = "depth") -> float:
        grid = self.layers[layer]
        return float(np.nanmean(grid))


def read_raster(path) -> Raster:
    """Parse the plain-text raster format (see module docstring)."""
    with open(path, "r", encoding="ascii") as fh:
        tokens = [line.strip() for line in fh if line.strip()]
    layers: dict[str, np.ndarray] = {}
    origin = None
    pos = 0
    while pos < len(tokens):
        if pos + 6 > len(tokens):
            raise InvalidParameter(f"truncated raster header in {path}")
        name = tokens[pos]
        ncols, nrows = int(tokens[pos + 1]), int(tokens[pos + 2])
        oe, on, cs = (float(tokens[pos + i]) for i in (3, 4, 5))
        if origin is None:
            origin = (oe, on, cs)
        elif origin != (oe, on, cs):
            raise InvalidParameter("raster layers disagree on grid geometry")
        pos += 6
        if pos + nrows > len(tokens):
            raise InvalidParameter(f"layer {name!r} is missing rows")
        rows = []
        for r in range(nrows):
            vals = np.array([float(v) for v in tokens[pos + r].split()])
            if vals.size != ncols:
                raise ShapeMismatch(f"layer {name!r} row {r} has {vals.size} values")
            rows.append(vals)
        pos += nrows
        layers[name] = np.vstack(rows)
    if not layers:
        raise InvalidParameter(f"no layers found in {path}")
    oe, on, cs = origin
    return Raster(origin_e=oe, origin_n=on, cell_size=cs, layers=layers)


def write_raster(raster: Raster, path) -> None:
    nrows, ncols = raster.shape
    with open(path, "w", encoding="ascii") as fh:
        for name in sorted(raster.layers):
            fh.write(f"{name}\n{ncols}\n{nrows}\n")
            fh.write(f"{raster.origin_e!r}\n{raster.origin_n!r}\n{raster.cell_size!r}\n")
            for row in raster.layers[name]:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# transects


@dataclass(frozen=True)
class TransectParams:
    """A fixed-length transect: snapped start point, heading, length.

    The width is survey metadata only; sampled points lie on the centerline.
    """

    e0: float
    n0: float
    omega: float  # radians
    l_t: float  # meters
    width: float = 50.0

    def __post_init__(self):
        if self.l_t <= 0:
            raise InvalidParameter("transect length must be > 0")


def snap_to_fishnet(e: float, n: float, origin_e: float, origin_n: float, size: float) -> tuple[float, float]:
    """Snap a point to the center of its fishnet cell."""
    ix = _cell_index(e, origin_e, size)
    iy = _cell_index(n, origin_n, size)
    return origin_e + (ix + 0.5) * size, origin_n + (iy + 0.5) * size


def transect_endpoint(t: TransectParams) -> tuple[float, float]:
    """Planar endpoint: start plus length along the heading."""
    return t.e0 + t.l_t * np.cos(t.omega), t.n0 + t.l_t * np.sin(t.omega)


def sample_transect(
    t: TransectParams,
    n_points: int,
    raster: Raster | None = None,
) -> np.ndarray:
    """``n_points`` equally spaced centerline points, start and end inclusive.

    With a raster given, a start or end point outside the raster's extent
    raises TransectOutOfBounds so optimizers can reject the candidate.
    """
    if n_points < 2:
        raise InvalidParameter("a transect needs at least 2 sample points")
    e1, n1 = transect_endpoint(t)
    if raster is not None:
        inside = raster.contains(np.array([[t.e0, t.n0], [e1, n1]]))
        if not np.all(inside):
            raise TransectOutOfBounds(
                f"transect from ({t.e0:.1f}, {t.n0:.1f}) at {t.omega:.3f} rad leaves the raster"
            )
    frac = np.linspace(0.0, 1.0, n_points)
    return np.column_stack([t.e0 + frac * (e1 - t.e0), t.n0 + frac * (n1 - t.n0)])


def lookup(raster: Raster, points: np.ndarray, layer: str) -> np.ndarray:
    """Bilinear interpolation of a layer at planar points.

    Interpolates over the four surrounding cell centers; masked neighbors are
    dropped and the remaining weights renormalized.  All four masked raises
    MissingCovariate.
    """
    if layer not in raster.layers:
        raise MissingCovariate(f"raster has no layer {layer!r}")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if not np.all(raster.contains(pts)):
        raise TransectOutOfBounds("lookup point outside the raster extent")
    grid = raster.layers[layer]
    nrows, ncols = grid.shape
    # fractional position on the cell-center lattice
    fx = (pts[:, 0] - raster.origin_e) / raster.cell_size - 0.5
    fy = (raster.origin_n + nrows * raster.cell_size - pts[:, 1]) / raster.cell_size - 0.5
    fx = np.clip(fx, 0.0, ncols - 1.0)
    fy = np.clip(fy, 0.0, nrows - 1.0)
    x0 = np.clip(np.floor(fx).astype(int), 0, ncols - 2) if ncols > 1 else np.zeros(len(pts), int)
    y0 = np.clip(np.floor(fy).astype(int), 0, nrows - 2) if nrows > 1 else np.zeros(len(pts), int)
    tx = fx - x0
    ty = fy - y0
    x1 = np.minimum(x0 + 1, ncols - 1)
    y1 = np.minimum(y0 + 1, nrows - 1)

    corners = np.stack(
        [grid[y0, x0], grid[y0, x1], grid[y1, x0], grid[y1, x1]], axis=1
    )
    weights = np.stack(
        [(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty], axis=1
    )
    valid = np.isfinite(corners)
    weights = np.where(valid, weights, 0.0)
    totals = weights.sum(axis=1)
    if np.any(totals <= 0):
        bad = int(np.flatnonzero(totals <= 0)[0])
        raise MissingCovariate(
            f"all neighbors masked at point ({pts[bad, 0]:.1f}, {pts[bad, 1]:.1f})"
        )
    vals = np.where(valid, corners, 0.0)
    return (vals * weights).sum(axis=1) / totals


def fishnet_ids(
    points: np.ndarray,
    origin_e: float,
    origin_n: float,
    size: float,
    n_cells_e: int,
) -> np.ndarray:
    """Row-major fishnet cell id per point (boundary points to the lower cell)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    ix = np.array([_cell_index(e, origin_e, size) for e in pts[:, 0]])
    iy = np.array([_cell_index(n, origin_n, size) for n in pts[:, 1]])
    return iy * n_cells_e + ix


def _cell_index(v: float, origin: float, size: float) -> int:
    """Cell index with boundary values assigned to the lower cell."""
    return max(0, int(np.ceil((v - origin) / size)) - 1)


def transects_to_design(
    raster: Raster,
    transects: list[TransectParams],
    n_points: int = 50,
    fishnet_size: float = 500.0,
    layer: str = "depth",
) -> Design:
    """Sample every transect and assemble the model design.

    Covariate values are raw layer lookups (model bases carry the pilot
    normalization); each point gets the fishnet cell id of its location.
    """
    if not transects:
        raise InvalidParameter("at least one transect is required")
    all_pts, depths, cells, t_ids, p_ids = [], [], [], [], []
    n_cells_e = int(np.ceil((raster.extent[1] - raster.origin_e) / fishnet_size))
    for ti, t in enumerate(transects):
        pts = sample_transect(t, n_points, raster=raster)
        vals = lookup(raster, pts, layer)
        ids = fishnet_ids(pts, raster.origin_e, raster.origin_n, fishnet_size, n_cells_e)
        all_pts.append(pts)
        depths.append(vals)
        cells.append(ids)
        t_ids.append(np.full(n_points, ti))
        p_ids.append(np.arange(n_points))
    coords = np.vstack(all_pts)
    return Design(
        covariates={layer: np.concatenate(depths)},
        groups={"cell": np.concatenate(cells)},
        coords=coords,
        meta={
            "transect_id": np.concatenate(t_ids),
            "point_id": np.concatenate(p_ids),
            "transects": list(transects),
            "fishnet_size": fishnet_size,
        },
    )


# ---------------------------------------------------------------------------
# synthetic shoal fixture


def synthetic_shoal(
    ncols: int = 40,
    nrows: int = 40,
    cell_size: float = 100.0,
    origin_e: float = 300_000.0,
    origin_n: float = 7_800_000.0,
    depth_range: tuple[float, float] = (-60.0, -18.0),
) -> Raster:
    """A smooth synthetic bathymetry: a shallow ridge falling away to deep
    flanks, with one masked corner patch.  Depths span the given range."""
    east = (np.arange(ncols) + 0.5) / ncols
    north = (np.arange(nrows) + 0.5) / nrows
    ee, nn = np.meshgrid(east, north[::-1])  # row 0 northernmost
    # diagonal ridge with two bumps
    ridge = np.exp(-((ee - nn) ** 2) / 0.08)
    bumps = 0.6 * np.exp(-((ee - 0.3) ** 2 + (nn - 0.65) ** 2) / 0.02) + 0.5 * np.exp(
        -((ee - 0.75) ** 2 + (nn - 0.3) ** 2) / 0.03
    )
    relief = ridge + bumps
    relief = (relief - relief.min()) / (relief.max() - relief.min())
    deep, shallow = depth_range
    depth = deep + relief * (shallow - deep)
    # mask a corner patch to exercise mask handling
    depth[: nrows // 10, : ncols // 10] = np.nan
    return Raster(origin_e=origin_e, origin_n=origin_n, cell_size=cell_size, layers={"depth": depth})
