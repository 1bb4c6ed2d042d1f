"""Lattices, exact nearest-point quantizers and Voronoi cell geometry.

Conventions
-----------
Points are row vectors: a lattice point is ``i @ B`` for an integer row ``i``.
A :class:`ScaledProductLattice` stacks ``blocks`` copies of a base lattice, the
``b``-th copy scaled by ``deltas[b]``; every quantizer works block by block on
de-scaled coordinates.

Ties between equidistant lattice points go to the lexicographically smallest
coefficient vector. For the integer lattices this is rounding half *down*
(``ceil(x - 1/2)``), so the zero cell of ``Z`` is ``(-1/2, 1/2]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractViolation, EnumerationBudgetExceeded

LATTICE_NAMES = ("Z", "Z2", "A2", "E8")

DEFAULT_BUDGET = 2_000_000

# Exact normalized second moments (Conway & Sloane); the rounded published
# values are kept alongside for reporting.
_EXACT_NSM = {
    "Z": 1.0 / 12.0,
    "Z2": 1.0 / 12.0,
    "A2": 5.0 / (36.0 * math.sqrt(3.0)),
    "E8": 929.0 / 12960.0,
}
_PUBLISHED_NSM = {"Z": 0.0833, "Z2": 0.0833, "A2": 0.0802, "E8": 0.0717}
_COVERING_RADIUS = {
    "Z": 0.5,
    "Z2": math.sqrt(2.0) / 2.0,
    "A2": 1.0 / math.sqrt(3.0),
    "E8": 1.0,
}


def _e8_rows() -> np.ndarray:
    rows = np.zeros((8, 8))
    rows[0, 0] = 2.0
    for i in range(1, 7):
        rows[i, i - 1] = -1.0
        rows[i, i] = 1.0
    rows[7, :] = 0.5
    return rows


_ROWS = {
    "Z": lambda: np.eye(1),
    "Z2": lambda: np.eye(2),
    "A2": lambda: np.array([[0.0, 1.0], [math.sqrt(0.75), 0.5]]),
    "E8": _e8_rows,
}


@dataclass(frozen=True, eq=False)
class LatticeBasis:
    """A named base lattice with its basis rows and cell metadata."""

    name: str
    rows: np.ndarray
    nsm: float
    published_nsm: float
    covering_radius: float

    @property
    def m(self) -> int:
        return self.rows.shape[0]

    @property
    def det_abs(self) -> float:
        return abs(float(np.linalg.det(self.rows)))

    @property
    def volume(self) -> float:
        return self.det_abs

    @property
    def cell_diameter(self) -> float:
        return 2.0 * self.covering_radius

    @property
    def second_moment(self) -> float:
        """Exact per-dimension second moment of the unscaled cell."""
        return self.nsm * self.volume ** (2.0 / self.m)

    @property
    def inverse(self) -> np.ndarray:
        return _inverse(self.name)

    @property
    def gram2(self) -> np.ndarray:
        """Twice the Gram matrix, as integers (all four lattices are integral)."""
        return _gram2(self.name)

    def norms(self, coeffs: np.ndarray) -> np.ndarray:
        """Exact integer squared norms of ``coeffs @ rows``."""
        coeffs = np.asarray(coeffs, dtype=np.int64)
        twice = np.einsum("...i,ij,...j->...", coeffs, self.gram2, coeffs)
        return twice // 2

    def __repr__(self) -> str:
        return f"LatticeBasis({self.name!r}, m={self.m})"


@lru_cache(maxsize=None)
def lattice_basis(name: str) -> LatticeBasis:
    """Return the base lattice called ``name`` (one of ``LATTICE_NAMES``)."""
    if name not in _ROWS:
        raise ContractViolation(
            f"unknown lattice {name!r}; expected one of {', '.join(LATTICE_NAMES)}"
        )
    rows = _ROWS[name]()
    rows.setflags(write=False)
    return LatticeBasis(
        name=name,
        rows=rows,
        nsm=_EXACT_NSM[name],
        published_nsm=_PUBLISHED_NSM[name],
        covering_radius=_COVERING_RADIUS[name],
    )


@lru_cache(maxsize=None)
def _inverse(name: str) -> np.ndarray:
    inv = np.linalg.inv(lattice_basis(name).rows)
    inv.setflags(write=False)
    return inv


@lru_cache(maxsize=None)
def _gram2(name: str) -> np.ndarray:
    rows = lattice_basis(name).rows
    g2 = np.rint(2.0 * rows @ rows.T).astype(np.int64)
    g2.setflags(write=False)
    return g2


@dataclass(eq=False)
class ScaledProductLattice:
    """Block-diagonal product ``diag(deltas[0] B, ..., deltas[-1] B)``."""

    base: LatticeBasis
    deltas: np.ndarray

    def __post_init__(self):
        self.deltas = np.atleast_1d(np.asarray(self.deltas, dtype=float))
        if self.deltas.ndim != 1 or self.deltas.size == 0:
            raise ContractViolation("deltas must be a non-empty 1-D array")
        if not np.all(self.deltas > 0) or not np.all(np.isfinite(self.deltas)):
            raise ContractViolation(f"deltas must be positive, got {self.deltas}")

    @classmethod
    def uniform(cls, base: LatticeBasis | str, blocks: int = 1, delta: float = 1.0):
        if isinstance(base, str):
            base = lattice_basis(base)
        if blocks < 1:
            raise ContractViolation("blocks must be >= 1")
        return cls(base, np.full(blocks, float(delta)))

    @property
    def blocks(self) -> int:
        return self.deltas.size

    @property
    def m(self) -> int:
        return self.base.m

    @property
    def total_dim(self) -> int:
        return self.blocks * self.base.m

    @property
    def volume(self) -> float:
        return float(np.prod(self.deltas**self.m * self.base.det_abs))

    @property
    def basis(self) -> np.ndarray:
        t, m = self.total_dim, self.m
        out = np.zeros((t, t))
        for b, d in enumerate(self.deltas):
            out[b * m:(b + 1) * m, b * m:(b + 1) * m] = d * self.base.rows
        return out

    def to_blocks(self, v: np.ndarray) -> np.ndarray:
        """Reshape ``(..., t)`` to ``(..., blocks, m)``."""
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != self.total_dim:
            raise ContractViolation(
                f"expected trailing dimension {self.total_dim}, got {v.shape[-1]}"
            )
        return v.reshape(v.shape[:-1] + (self.blocks, self.m))

    def descale(self, v: np.ndarray) -> np.ndarray:
        """``(..., t)`` -> de-scaled ``(..., blocks, m)`` block coordinates."""
        return self.to_blocks(v) / self.deltas[:, None]

    def embed(self, coeffs: np.ndarray) -> np.ndarray:
        """Embedding of integer coefficient rows ``(..., t)``."""
        coeffs = np.asarray(coeffs)
        blk = coeffs.reshape(coeffs.shape[:-1] + (self.blocks, self.m))
        pts = (blk @ self.base.rows) * self.deltas[:, None]
        return pts.reshape(coeffs.shape)

    def block_norms(self, coeffs: np.ndarray) -> np.ndarray:
        """Unscaled integer squared norm of each block, shape ``(..., blocks)``."""
        coeffs = np.asarray(coeffs, dtype=np.int64)
        blk = coeffs.reshape(coeffs.shape[:-1] + (self.blocks, self.m))
        return self.base.norms(blk)

    def point(self, coeffs) -> LatticePoint:
        coeffs = np.asarray(coeffs, dtype=np.int64).reshape(self.total_dim)
        return LatticePoint(
            coeffs=coeffs,
            embedding=self.embed(coeffs),
            norm_sq_unscaled=self.block_norms(coeffs),
            deltas=self.deltas.copy(),
        )

    def spec(self) -> dict:
        return {"lattice": self.base.name, "blocks": self.blocks,
                "deltas": [float(d) for d in self.deltas]}


@dataclass(frozen=True, eq=False)
class LatticePoint:
    coeffs: np.ndarray
    embedding: np.ndarray
    norm_sq_unscaled: np.ndarray
    deltas: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, LatticePoint):
            return NotImplemented
        return (np.array_equal(self.coeffs, other.coeffs)
                and np.array_equal(self.deltas, other.deltas))

    __hash__ = None


@dataclass(frozen=True)
class CellConstants:
    volume: float
    second_moment: float
    nsm: float
    n_samples: int
    stderr: float
    nsm_stderr: float
    exact_second_moment: float | None = None
    exact_nsm: float | None = None


def _as_product(lattice) -> ScaledProductLattice:
    if isinstance(lattice, ScaledProductLattice):
        return lattice
    if isinstance(lattice, LatticeBasis):
        return ScaledProductLattice.uniform(lattice)
    if isinstance(lattice, str):
        return ScaledProductLattice.uniform(lattice_basis(lattice))
    raise ContractViolation(f"not a lattice: {lattice!r}")


# --------------------------------------------------------------------------
# Nearest-point quantizers for the base lattices (de-scaled coordinates).


def _round_half_down(x: np.ndarray) -> np.ndarray:
    return np.ceil(x - 0.5)


def _sqdist(y: np.ndarray, coeffs: np.ndarray, rows: np.ndarray) -> np.ndarray:
    diff = y - coeffs @ rows
    return np.sum(diff * diff, axis=-1)


def _lex_argmin(dist: np.ndarray, coeffs: np.ndarray) -> int:
    """Index of the minimum distance; exact ties go to the smallest coeffs."""
    tied = np.flatnonzero(dist == dist.min())
    if tied.size == 1:
        return int(tied[0])
    keys = coeffs[tied]
    order = np.lexsort(keys.T[::-1])
    return int(tied[order[0]])


_A2_OFFSETS = np.array([(a, b) for a in (-1, 0, 1, 2) for b in (-1, 0, 1, 2)],
                       dtype=np.int64)


def _quantize_a2(y: np.ndarray) -> np.ndarray:
    base = lattice_basis("A2")
    c = y @ base.inverse
    anchor = np.floor(c).astype(np.int64)
    # candidates in lexicographic order of offsets, so argmin's first-hit rule
    # already prefers the smallest coefficient vector among exact ties
    cand = anchor[:, None, :] + _A2_OFFSETS[None, :, :]
    dist = _sqdist(y[:, None, :], cand.astype(float), base.rows)
    best = np.argmin(dist, axis=1)
    return cand[np.arange(len(y)), best]


def _e8_round_candidates(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``f(x)`` and ``g(x)`` row-wise."""
    f = _round_half_down(x)
    err = x - f
    k = np.argmax(np.abs(err), axis=1)
    rows = np.arange(len(x))
    g = f.copy()
    g[rows, k] += np.where(err[rows, k] > 0, 1.0, -1.0)
    return f, g


def _in_e8(p: np.ndarray) -> np.ndarray:
    """Coordinates all integers or all half-integers, with even sum."""
    twice = np.rint(2.0 * p).astype(np.int64)
    all_int = np.all(twice % 2 == 0, axis=1)
    all_half = np.all(twice % 2 == 1, axis=1)
    even = (twice.sum(axis=1) // 2) % 2 == 0
    return (all_int | all_half) & even


def _e8_coeffs(points: np.ndarray) -> np.ndarray:
    return np.rint(points @ lattice_basis("E8").inverse).astype(np.int64)


def e8_nearest(x) -> np.ndarray:
    """Closest E8 point to ``x`` (shape ``(8,)`` or ``(n, 8)``).

    Four candidates are formed: ``f(x)``, ``g(x)``, ``f(x - 1/2) + 1/2`` and
    ``g(x - 1/2) + 1/2``, where ``f`` rounds every entry and ``g`` additionally
    rounds the worst entry the other way. The closest candidate that lies in
    E8 is returned.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[-1] != 8:
        raise ContractViolation(f"e8_nearest expects 8 coordinates, got {x2.shape[-1]}")
    f0, g0 = _e8_round_candidates(x2)
    f1, g1 = _e8_round_candidates(x2 - 0.5)
    cands = np.stack([f0, g0, f1 + 0.5, g1 + 0.5], axis=1)  # (n, 4, 8)
    n = len(x2)
    valid = _in_e8(cands.reshape(-1, 8)).reshape(n, 4)
    dist = np.sum((x2[:, None, :] - cands) ** 2, axis=2)
    dist = np.where(valid, dist, np.inf)
    best = np.argmin(dist, axis=1)
    out = cands[np.arange(n), best]

    # resolve exact ties between the integer and half-integer winners
    dmin = dist[np.arange(n), best]
    ties = np.flatnonzero(np.sum(dist == dmin[:, None], axis=1) > 1)
    for r in ties:
        idx = np.flatnonzero(dist[r] == dmin[r])
        coeffs = _e8_coeffs(cands[r, idx])
        out[r] = cands[r, idx[_lex_argmin(dist[r, idx], coeffs)]]
    return out[0] if single else out


def _quantize_base(base: LatticeBasis, y: np.ndarray) -> np.ndarray:
    """Nearest-point coefficients for rows of de-scaled coordinates ``y``."""
    if base.name in ("Z", "Z2"):
        return _round_half_down(y).astype(np.int64)
    if base.name == "A2":
        return _quantize_a2(y)
    if base.name == "E8":
        return _e8_coeffs(e8_nearest(y))
    raise ContractViolation(f"no exact quantizer for {base.name!r}")


def quantize(lattice, v) -> np.ndarray:
    """Integer coefficients of the nearest lattice point, batched over rows.

    ``v`` has shape ``(..., t)``; the result has the same shape and integer
    dtype. Use :meth:`ScaledProductLattice.embed` for the coordinates.
    """
    lattice = _as_product(lattice)
    y = lattice.descale(v)
    flat = y.reshape(-1, lattice.m)
    coeffs = _quantize_base(lattice.base, flat)
    return coeffs.reshape(np.shape(v))


def nearest_point(lattice, v) -> LatticePoint:
    """Nearest lattice point to a single vector ``v`` of length ``total_dim``."""
    lattice = _as_product(lattice)
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size != lattice.total_dim:
        raise ContractViolation(
            f"v must be a vector of length {lattice.total_dim}, got shape {v.shape}"
        )
    return lattice.point(quantize(lattice, v))


# --------------------------------------------------------------------------
# Enumeration (brute-force oracle and theta coefficients).


def enumerate_ball(rows: np.ndarray, center, radius: float,
                   budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """All integer rows ``i`` with ``||i @ rows - center|| <= radius``.

    Exhaustive Fincke-Pohst style enumeration: the squared distance is
    written as a sum of triangular terms through a QR factorization, and the
    admissible range of each coefficient is a box given the coefficients
    already fixed. Raises :class:`EnumerationBudgetExceeded` instead of
    truncating.
    """
    rows = np.asarray(rows, dtype=float)
    m = rows.shape[0]
    center = np.asarray(center, dtype=float).reshape(m)
    q, r = np.linalg.qr(rows.T)
    z = q.T @ center
    r2 = radius * radius * (1.0 + 1e-12) + 1e-12

    coeffs = np.zeros((1, 0), dtype=np.int64)
    partial = np.zeros(1)
    for j in range(m - 1, -1, -1):
        s = coeffs.astype(float) @ r[j, j + 1:] if coeffs.shape[1] else np.zeros(len(partial))
        rho = np.sqrt(np.maximum(r2 - partial, 0.0))
        mid = (z[j] - s) / r[j, j]
        half = rho / abs(r[j, j])
        lo = np.ceil(mid - half).astype(np.int64)
        hi = np.floor(mid + half).astype(np.int64)
        counts = np.maximum(hi - lo + 1, 0)
        total = int(counts.sum())
        if total > budget:
            raise EnumerationBudgetExceeded(
                f"enumeration needs more than {budget} partial points "
                f"(radius {radius:g}, dimension {m})"
            )
        parent = np.repeat(np.arange(len(partial)), counts)
        start = np.repeat(np.cumsum(counts) - counts, counts)
        vals = lo[parent] + (np.arange(total) - start)
        resid = r[j, j] * vals + s[parent] - z[j]
        partial = partial[parent] + resid * resid
        coeffs = np.column_stack([vals, coeffs[parent]])
    return coeffs[partial <= r2]


def brute_force_nearest(lattice, v, radius: float | None = None,
                        budget: int = DEFAULT_BUDGET) -> LatticePoint:
    """Nearest point by exhaustive enumeration of a ball around ``v``.

    ``radius`` is measured in the scaled coordinates of ``v``; it defaults to
    one cell diameter per block, which always contains the nearest point.
    """
    lattice = _as_product(lattice)
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size != lattice.total_dim:
        raise ContractViolation(
            f"v must be a vector of length {lattice.total_dim}, got shape {v.shape}"
        )
    y = lattice.descale(v)
    rows = lattice.base.rows
    out = []
    for b in range(lattice.blocks):
        rad = lattice.base.cell_diameter if radius is None else radius / lattice.deltas[b]
        cand = enumerate_ball(rows, y[b], rad, budget=budget)
        if len(cand) == 0:
            raise ContractViolation(
                f"radius {radius} contains no lattice point near block {b}"
            )
        dist = _sqdist(y[b], cand.astype(float), rows)
        out.append(cand[_lex_argmin(dist, cand)])
    return lattice.point(np.concatenate(out))


# --------------------------------------------------------------------------
# Dither and cell geometry.


def sample_dither(lattice, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform sample(s) from the zero cell of ``lattice``.

    Draws ``V`` uniform on ``[0, 1)^t``, maps it through the (block-diagonal)
    basis to ``W`` and returns ``W - K(W)``.
    """
    lattice = _as_product(lattice)
    shape = (lattice.total_dim,) if size is None else (size, lattice.total_dim)
    v = rng.random(shape)
    w = lattice.embed(v)
    return w - lattice.embed(quantize(lattice, w))


def cell_constants(lattice, n_samples: int = 1_000_000, seed: int = 0,
                   chunk: int = 1 << 16) -> CellConstants:
    """Monte-Carlo second moment and NSM of the zero cell."""
    lattice = _as_product(lattice)
    if n_samples < 10_000:
        raise ContractViolation("cell_constants needs at least 1e4 samples")
    rng = np.random.default_rng(seed)
    t = lattice.total_dim
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        u = sample_dither(lattice, rng, size=k)
        per_dim = np.sum(u * u, axis=1) / t
        total += per_dim.sum()
        total_sq += np.sum(per_dim * per_dim)
        done += k
    mean = total / n_samples
    var = max(total_sq / n_samples - mean * mean, 0.0) * n_samples / (n_samples - 1)
    stderr = math.sqrt(var / n_samples)
    vol = lattice.volume
    norm = vol ** (2.0 / t)

    exact_sm = exact_nsm = None
    if np.all(lattice.deltas == lattice.deltas[0]):
        exact_nsm = lattice.base.nsm
        exact_sm = exact_nsm * norm
    return CellConstants(
        volume=vol,
        second_moment=mean,
        nsm=mean / norm,
        n_samples=n_samples,
        stderr=stderr,
        nsm_stderr=stderr / norm,
        exact_second_moment=exact_sm,
        exact_nsm=exact_nsm,
    )


def matched_delta(lattice, sigma_ug_sq, nsm: float | None = None,
                  volume: float | None = None):
    """Scale at which the dither's per-dimension second moment equals ``sigma_ug_sq``.

    ``log delta = log(sigma^2)/2 - log(G)/2 - log(V)/m``. Works elementwise on
    arrays of variances.
    """
    base = lattice.base if isinstance(lattice, ScaledProductLattice) else lattice
    if isinstance(base, str):
        base = lattice_basis(base)
    s = np.asarray(sigma_ug_sq, dtype=float)
    if np.any(~(s > 0)):
        raise ContractViolation("sigma_ug_sq must be positive")
    g = base.nsm if nsm is None else nsm
    vol = base.volume if volume is None else volume
    log_delta = 0.5 * np.log(s) - 0.5 * math.log(g) - math.log(vol) / base.m
    out = np.exp(log_delta)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Theta series.


def _ball_volume(m: int, r: float) -> float:
    return math.pi ** (m / 2) / math.gamma(m / 2 + 1) * r**m


def _theta_by_enumeration(base: LatticeBasis, n: int, budget: int) -> np.ndarray:
    pts = enumerate_ball(base.rows, np.zeros(base.m), math.sqrt(n), budget=budget)
    norms = base.norms(pts)
    return np.bincount(norms[norms <= n], minlength=n + 1)[: n + 1].astype(np.int64)


def _coordinate_counts(values: np.ndarray, squares: np.ndarray, dims: int,
                       limit: int, track_parity: bool) -> np.ndarray:
    """Count vectors with entries in ``values`` by total of ``squares``.

    Returns ``counts[norm, parity_of_sum]``.
    """
    dp = np.zeros((limit + 1, 2), dtype=np.int64)
    dp[0, 0] = 1
    for _ in range(dims):
        new = np.zeros_like(dp)
        for v, sq in zip(values, squares):
            if sq > limit:
                continue
            p = int(v) % 2 if track_parity else 0
            src = dp[: limit + 1 - sq]
            new[sq:, 0] += src[:, p]
            new[sq:, 1] += src[:, 1 - p]
        dp = new
    return dp


def _theta_by_coordinates(base: LatticeBasis, n: int) -> np.ndarray:
    if base.name in ("Z", "Z2"):
        r = math.isqrt(n)
        vals = np.arange(-r, r + 1)
        dp = _coordinate_counts(vals, vals * vals, base.m, n, track_parity=False)
        return dp.sum(axis=1)
    if base.name == "E8":
        r = math.isqrt(n)
        vals = np.arange(-r, r + 1)
        integer = _coordinate_counts(vals, vals * vals, 8, n, track_parity=True)[:, 0]
        # half-integer coordinates w + 1/2, tracked as 4 * (w + 1/2)^2
        wmax = r + 1
        w = np.arange(-wmax, wmax)
        half = _coordinate_counts(w, (2 * w + 1) ** 2, 8, 4 * n, track_parity=True)[:, 0]
        out = integer.copy()
        out += half[::4][: n + 1]
        return out
    raise EnumerationBudgetExceeded(f"no coordinate counter for {base.name}")


@lru_cache(maxsize=64)
def _theta_cached(name: str, n: int, budget: int, method: str) -> tuple:
    base = lattice_basis(name)
    if method == "auto":
        est = _ball_volume(base.m, math.sqrt(n) + base.covering_radius) / base.volume
        method = "enumerate" if est <= budget or name == "A2" else "coordinates"
    if method == "enumerate":
        counts = _theta_by_enumeration(base, n, budget)
    elif method == "coordinates":
        counts = _theta_by_coordinates(base, n)
    else:
        raise ContractViolation(f"unknown theta method {method!r}")
    return tuple(int(c) for c in counts)


def theta_array(lattice, max_norm_sq: int, budget: int = DEFAULT_BUDGET,
                method: str = "auto") -> np.ndarray:
    """Counts of lattice vectors of squared norm ``0..max_norm_sq`` (zeros kept)."""
    base = _as_product(lattice).base
    if max_norm_sq < 0:
        raise ContractViolation("max_norm_sq must be >= 0")
    return np.array(_theta_cached(base.name, int(max_norm_sq), int(budget), method),
                    dtype=np.int64)


def theta_coefficients(lattice, max_norm_sq: int, budget: int = DEFAULT_BUDGET,
                       method: str = "auto") -> dict[int, int]:
    """Map squared norm -> number of lattice vectors, for norms up to ``max_norm_sq``.

    Counting is exact: a ball enumeration over integer coefficients when the
    ball fits the budget, otherwise a coordinate-wise count for the lattices
    that have one (Z, Z2, E8).
    """
    counts = theta_array(lattice, max_norm_sq, budget=budget, method=method)
    return {k: int(c) for k, c in enumerate(counts) if c}


def points_below(lattice, threshold: int, budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """Coefficients of base-lattice points with squared norm ``< threshold``.

    Sorted by norm, then lexicographically.
    """
    base = _as_product(lattice).base
    if threshold <= 0:
        return np.zeros((0, base.m), dtype=np.int64)
    pts = enumerate_ball(base.rows, np.zeros(base.m), math.sqrt(threshold), budget=budget)
    norms = base.norms(pts)
    pts = pts[norms < threshold]
    norms = norms[norms < threshold]
    order = np.lexsort(tuple(pts.T[::-1]) + (norms,))
    return pts[order]
