"""Clustering metrics, density/partition grids, sample dumps and raster export."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractError, FlowmixError
from .flows import FlowStack
from .mixture import MixtureModel, assign_cluster, exact_log_evidence, sample_component

MAX_BRUTE_FORCE_K = 8


@dataclass
class ContingencyTable:
    """Rows are true labels, columns cluster indices."""

    counts: np.ndarray
    normalized: np.ndarray
    empty_rows: np.ndarray

    @property
    def row_purity(self) -> np.ndarray:
        return self.normalized.max(axis=1)

    def to_dict(self) -> dict:
        return {"counts": self.counts.tolist(), "normalized": self.normalized.tolist(),
                "empty_rows": np.flatnonzero(self.empty_rows).tolist()}


def _as_labels(name: str, v) -> np.ndarray:
    v = np.asarray(v)
    if v.ndim != 1:
        raise ContractError(f"{name} must be one-dimensional")
    if v.size and (v.min() < 0 or not np.issubdtype(v.dtype, np.integer)):
        raise ContractError(f"{name} must be non-negative integers")
    return v.astype(np.intp)


def contingency(true_labels, assignments, n_true: int | None = None,
                n_pred: int | None = None) -> ContingencyTable:
    t = _as_labels("true labels", true_labels)
    p = _as_labels("assignments", assignments)
    if t.size == 0:
        raise ContractError("contingency of an empty labeling")
    if t.shape != p.shape:
        raise ContractError("true labels and assignments differ in length")
    n_true = max(n_true or 0, int(t.max()) + 1)
    n_pred = max(n_pred or 0, int(p.max()) + 1)
    counts = np.zeros((n_true, n_pred), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    totals = counts.sum(axis=1, keepdims=True)
    empty = totals[:, 0] == 0
    normalized = np.divide(counts, totals, out=np.zeros(counts.shape), where=totals > 0)
    return ContingencyTable(counts, normalized, empty)


def cluster_accuracy(true_labels, assignments) -> tuple[float, dict[int, int]]:
    """Best accuracy over one-to-one maps from cluster index to label, by brute force.

    Returns the accuracy and the maximizing map ``{cluster: label}``.
    """
    table = contingency(true_labels, assignments)
    k = max(table.counts.shape)
    if k > MAX_BRUTE_FORCE_K:
        raise ContractError(f"cluster_accuracy supports at most {MAX_BRUTE_FORCE_K} classes, got {k}")
    counts = np.zeros((k, k), dtype=np.int64)
    counts[:table.counts.shape[0], :table.counts.shape[1]] = table.counts
    best, best_perm = -1, None
    cols = np.arange(k)
    for perm in itertools.permutations(range(k)):
        # perm[c] = label assigned to cluster c
        hits = counts[list(perm), cols].sum()
        if hits > best:
            best, best_perm = hits, perm
    n = table.counts.sum()
    return best / n, {c: int(best_perm[c]) for c in range(k)}


# ----------------------------------------------------------------------------
# grids
# ----------------------------------------------------------------------------

@dataclass
class Grid:
    """Values at cell centers; ``values[i, j]`` sits at ``(xs[j], ys[i])``."""

    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray
    dx: float
    dy: float

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "value"])
            for i, y in enumerate(self.ys):
                for j, x in enumerate(self.xs):
                    w.writerow([repr(float(x)), repr(float(y)), repr(float(self.values[i, j]))])


def _parse_bounds(bounds) -> tuple[tuple[float, float], tuple[float, float]]:
    b = np.asarray(bounds, dtype=np.float64).reshape(-1)
    if b.size == 2:
        b = np.concatenate([b, b])
    if b.size != 4 or b[0] >= b[1] or b[2] >= b[3]:
        raise ContractError("bounds must be (lo, hi) or (xlo, xhi, ylo, yhi) with lo < hi")
    return (b[0], b[1]), (b[2], b[3])


def cell_centers(bounds, resolution: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if resolution < 1:
        raise ContractError("resolution must be >= 1")
    (x0, x1), (y0, y1) = _parse_bounds(bounds)
    xs = x0 + (np.arange(resolution) + 0.5) * (x1 - x0) / resolution
    ys = y0 + (np.arange(resolution) + 0.5) * (y1 - y0) / resolution
    gx, gy = np.meshgrid(xs, ys)
    return xs, ys, np.stack([gx.ravel(), gy.ravel()], axis=1)


def _grid(values_fn, dim: int, bounds, resolution: int, chunk: int = 20000) -> Grid:
    if dim != 2:
        raise ContractError(f"grids are only defined for D=2, got D={dim}")
    xs, ys, pts = cell_centers(bounds, resolution)
    out = np.concatenate([values_fn(pts[i:i + chunk]) for i in range(0, len(pts), chunk)])
    (x0, x1), (y0, y1) = _parse_bounds(bounds)
    return Grid(xs, ys, out.reshape(resolution, resolution),
                (x1 - x0) / resolution, (y1 - y0) / resolution)


def density_grid(model: FlowStack | MixtureModel, bounds, resolution: int) -> Grid:
    """Log-density at every cell center of a 2-D grid."""
    if isinstance(model, MixtureModel):
        model.eval()
        fn = lambda p: exact_log_evidence(model, p)  # noqa: E731
    else:
        model.eval()

        def fn(p):
            with ad.no_grad():
                return model.log_prob(p).value
    return _grid(fn, model.dim, bounds, resolution)


def partition_grid(model: MixtureModel, bounds, resolution: int) -> Grid:
    """Index of the most responsible component at every cell center."""
    return _grid(lambda p: assign_cluster(model, p).astype(np.float64), model.dim,
                 bounds, resolution)


def grid_mass(grid: Grid) -> float:
    return float(np.exp(grid.values).sum() * grid.cell_area)


# ----------------------------------------------------------------------------
# samples and rasters
# ----------------------------------------------------------------------------

def sample_dump(model: MixtureModel, n_per_component: int, seed, path: str | Path | None = None,
                components: Sequence[int] | None = None) -> np.ndarray:
    """Samples from each component tagged by component index; optionally written as CSV.

    Component ``k`` draws with seed ``(seed, k)`` so one component's samples do
    not depend on which others are dumped.
    """
    model.eval()
    comps = range(model.n_components) if components is None else components
    rows = []
    for k in comps:
        x = sample_component(model, k, n_per_component, np.random.SeedSequence([int(seed), int(k)]))
        rows.append(np.column_stack([x, np.full(len(x), k)]))
    table = np.concatenate(rows) if rows else np.zeros((0, model.dim + 1))
    if path is not None:
        try:
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([f"x{i}" for i in range(model.dim)] + ["component"])
                for r in table:
                    w.writerow([repr(float(v)) for v in r[:-1]] + [int(r[-1])])
        except OSError as err:
            raise FlowmixError(f"cannot write samples to {path}: {err}") from err
    return table


PALETTE = np.array([
    [31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189],
    [140, 86, 75], [227, 119, 194], [127, 127, 127], [188, 189, 34], [23, 190, 207],
], dtype=np.uint8)


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """Binary P5 greyscale, min-max scaled to 0..255; row 0 of ``values`` at the bottom."""
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    lo, hi = (v[finite].min(), v[finite].max()) if finite.any() else (0.0, 0.0)
    scaled = np.zeros(v.shape) if hi == lo else (np.where(finite, v, lo) - lo) / (hi - lo)
    img = np.flipud(np.round(scaled * 255).astype(np.uint8))
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_ppm(path: str | Path, labels: np.ndarray) -> None:
    """Binary P6 color raster with one palette color per integer label."""
    lab = np.asarray(labels).astype(np.intp)
    img = np.flipud(PALETTE[lab % len(PALETTE)])
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    """Read back a P5/P6 file written by this module (top row first)."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    kind, (w, h), maxval = parts[0], map(int, parts[1].split()), int(parts[2])
    if maxval != 255 or kind not in (b"P5", b"P6"):
        raise FlowmixError(f"{path}: unsupported raster")
    channels = 3 if kind == b"P6" else 1
    arr = np.frombuffer(parts[3], dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels == 3 else arr.reshape(h, w)
