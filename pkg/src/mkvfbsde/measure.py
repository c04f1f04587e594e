"""Empirical measures on R^d.

Every measure in the package is a uniform empirical measure over a finite
particle cloud. This module holds the cloud type, the first moment and root
second moment, the quadratic Wasserstein distance between clouds, the
gradient of a function of the measure with respect to one particle, and a
plain CSV round trip.

Wasserstein routes:

* ``d == 1``: exact, through sorted quantile functions (any particle counts).
* ``d > 1`` with equal counts ``M <= assignment_cutoff``: exact optimal
  assignment (Hungarian algorithm from scipy).
* otherwise: sliced distance over seeded random directions. The result is
  flagged ``exact=False``.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "ParticleCloud",
    "W2Distance",
    "mean",
    "norm2",
    "wasserstein2",
    "empirical_projection_gradient",
    "chaos_rate",
    "cloud_to_csv",
    "cloud_from_csv",
    "write_text_atomic",
]


class ParticleCloud:
    """Uniform empirical measure (1/M) sum_i delta_{x_i} on R^d.

    The point array is copied and frozen, so a cloud can be shared freely.
    One-dimensional input of length M is read as M points in R^1.
    """

    __slots__ = ("_points", "_bar")

    def __init__(self, points):
        arr = np.array(points, dtype=float)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise ValueError(f"points must be (M, d), got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("a cloud needs at least one particle in dimension >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("cloud contains non-finite coordinates")
        arr.setflags(write=False)
        self._points = arr
        self._bar = None

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def bar(self) -> np.ndarray:
        """Cached first moment, shape (d,)."""
        if self._bar is None:
            self._bar = self._points.mean(axis=0)
            self._bar.setflags(write=False)
        return self._bar

    @property
    def M(self) -> int:
        return self._points.shape[0]

    @property
    def d(self) -> int:
        return self._points.shape[1]

    def __len__(self):
        return self.M

    def __repr__(self):
        return f"ParticleCloud(M={self.M}, d={self.d})"

    def __eq__(self, other):
        if not isinstance(other, ParticleCloud):
            return NotImplemented
        return self._points.shape == other._points.shape and bool(
            np.array_equal(self._points, other._points))

    __hash__ = None


def _as_cloud(c) -> ParticleCloud:
    return c if isinstance(c, ParticleCloud) else ParticleCloud(c)


def mean(cloud) -> np.ndarray:
    """First moment: (1/M) sum_i x_i, shape (d,)."""
    return _as_cloud(cloud).bar.copy()


def norm2(cloud) -> float:
    """Root second moment sqrt((1/M) sum_i |x_i|^2)."""
    p = _as_cloud(cloud).points
    return float(np.sqrt(np.mean(np.sum(p * p, axis=1))))


class W2Distance(float):
    """A float carrying how it was computed.

    ``method`` is one of ``"sorted"``, ``"assignment"`` or ``"sliced"``;
    ``exact`` is False only for the sliced route.
    """

    def __new__(cls, value, method: str):
        obj = super().__new__(cls, value)
        obj.method = method
        obj.exact = method != "sliced"
        return obj

    def __repr__(self):
        return f"W2Distance({float(self)!r}, method={self.method!r})"


def _w2sq_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Squared W2 between two 1-d samples via their quantile functions."""
    a = np.sort(a)
    b = np.sort(b)
    n, m = a.size, b.size
    if n == m:
        diff = a - b
        return float(np.mean(diff * diff))
    # The quantile functions are step functions; integrate over the merged
    # breakpoints and read each step off at the interval midpoint.
    u = np.unique(np.concatenate([np.arange(1, n + 1) / n, np.arange(1, m + 1) / m]))
    lo = np.concatenate([[0.0], u[:-1]])
    width = u - lo
    mid = 0.5 * (u + lo)
    ia = np.minimum((mid * n).astype(int), n - 1)
    ib = np.minimum((mid * m).astype(int), m - 1)
    diff = a[ia] - b[ib]
    return float(np.sum(width * diff * diff))


def _sliced_w2sq(a: np.ndarray, b: np.ndarray, n_directions: int, seed: int) -> float:
    d = a.shape[1]
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_directions, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = a @ dirs.T
    pb = b @ dirs.T
    # Scaled by d so that a pure translation by v gives |v|^2 on average.
    vals = [_w2sq_1d(pa[:, j], pb[:, j]) for j in range(n_directions)]
    return float(d * np.mean(vals))


def wasserstein2(cloud_a, cloud_b, *, method: str = "auto", assignment_cutoff: int = 512,
                 n_directions: int = 64, seed: int = 0) -> W2Distance:
    """Quadratic Wasserstein distance between two clouds.

    Parameters
    ----------
    method : {"auto", "exact", "sliced"}
        ``"auto"`` uses an exact route when one is available (see module
        docstring) and falls back to slicing otherwise. ``"exact"`` refuses
        to approximate. ``"sliced"`` always slices (d > 1).
    assignment_cutoff : int
        Largest M solved by exact assignment in ``"auto"`` mode.
    n_directions, seed :
        Directions for the sliced route; fixed by the seed.
    """
    a = _as_cloud(cloud_a).points
    b = _as_cloud(cloud_b).points
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if method not in ("auto", "exact", "sliced"):
        raise ValueError(f"unknown method {method!r}")
    d = a.shape[1]
    if d == 1:
        return W2Distance(np.sqrt(_w2sq_1d(a[:, 0], b[:, 0])), "sorted")
    equal = a.shape[0] == b.shape[0]
    if method == "exact" and not equal:
        raise ValueError("exact W2 in d > 1 needs equal particle counts; "
                         "use method='sliced' for unequal clouds")
    if method == "exact" or (method == "auto" and equal and a.shape[0] <= assignment_cutoff):
        cost = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
        rows, cols = linear_sum_assignment(cost)
        return W2Distance(np.sqrt(cost[rows, cols].mean()), "assignment")
    return W2Distance(np.sqrt(_sliced_w2sq(a, b, n_directions, seed)), "sliced")


def empirical_projection_gradient(du: Callable, cloud) -> np.ndarray:
    """Gradient of u^M(x_1..x_M) = u(empirical measure) in each particle.

    ``du(cloud, xq)`` must return the measure derivative of u evaluated at the
    query points ``xq`` (shape (Q, d)) as an array (Q, d). The gradient in
    particle i is du(cloud, x_i) / M; the result has shape (M, d).
    """
    cloud = _as_cloud(cloud)
    g = np.asarray(du(cloud, cloud.points), dtype=float)
    if g.shape != cloud.points.shape:
        raise ValueError(f"du returned shape {g.shape}, expected {cloud.points.shape}")
    return g / cloud.M


def chaos_rate(N: int, d: int) -> float:
    """Reference decay rate N^(-1/(d+4)) for the empirical measure of N samples."""
    if N < 1 or d < 1:
        raise ValueError("N and d must be positive")
    return float(N ** (-1.0 / (d + 4)))


# --------------------------------------------------------------------------
# I/O

def write_text_atomic(path, text: str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cloud_to_csv(cloud, path=None, header: str | None = None) -> str:
    """Serialise a cloud as CSV (columns x0..x{d-1}); floats round-trip exactly.

    Returns the text; also writes it atomically when ``path`` is given. An
    optional ``header`` is emitted as a leading ``#`` comment line.
    """
    cloud = _as_cloud(cloud)
    buf = io.StringIO()
    if header:
        buf.write("# " + header.replace("\n", " ") + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{j}" for j in range(cloud.d)])
    for row in cloud.points:
        w.writerow([repr(float(v)) for v in row])
    text = buf.getvalue()
    if path is not None:
        write_text_atomic(path, text)
    return text


def cloud_from_csv(source) -> ParticleCloud:
    """Read a cloud written by :func:`cloud_to_csv` (path or CSV text)."""
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, newline="") as fh:
            text = fh.read()
    else:
        text = str(source)
    rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("#")]
    if len(rows) < 2:
        raise ValueError("CSV holds no particles")
    return ParticleCloud([[float(v) for v in r] for r in rows[1:]])
