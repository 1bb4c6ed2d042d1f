"""Probability models used by the representation cost.

* closed forms for a Laplacian source quantized on a scaled integer lattice;
* a norm-shell ("theta series") prior over lattice points, with a small
  dither-conditioned table for the points of smallest norm;
* the Gaussian KL term of Gaussian-proxy training;
* a Monte-Carlo estimator of the density of ``S - U``.

All costs are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .errors import ContractViolation, OutOfSupportError
from .lattice import (
    LatticeBasis,
    LatticePoint,
    ScaledProductLattice,
    lattice_basis,
    points_below,
    sample_dither,
    theta_array,
)


def log_sinh(x):
    """``log(sinh(x))`` for ``x > 0`` without overflow."""
    x = np.asarray(x, dtype=float)
    return x + np.log1p(-np.exp(-2.0 * x)) - math.log(2.0)


def _coth(x):
    return 1.0 / np.tanh(x)


# --------------------------------------------------------------------------
# Laplace source on the integer lattice.


@dataclass
class LaplaceZModel:
    """Laplace source with decay ``alpha`` quantized on ``delta * Z``.

    Both fields may be arrays (one entry per latent coordinate).
    """

    alpha: float | np.ndarray
    delta: float | np.ndarray

    def __post_init__(self):
        if np.any(~(np.asarray(self.alpha) > 0)) or np.any(~(np.asarray(self.delta) > 0)):
            raise ContractViolation("alpha and delta must be positive")


def laplace_rep_cost_grad(alpha, delta, eta):
    """``log f_U(u) / f_{S-U}(eta)`` and its partials w.r.t. eta, alpha, delta.

    Inner branch (``|eta| < delta/2``)::

        -log(1 - exp(-alpha delta/2) cosh(alpha eta))

    outer branch::

        alpha |eta| - log sinh(alpha delta / 2)

    The two branches meet with matching first derivatives at the boundary.
    """
    alpha, delta, eta = np.broadcast_arrays(
        np.asarray(alpha, float), np.asarray(delta, float), np.asarray(eta, float))
    h = 0.5 * delta
    a = np.abs(eta)
    inner = a < h

    # inner branch, written with exp(alpha(|eta| - h)) to avoid overflow
    e_minus = np.exp(alpha * (np.minimum(a, h) - h))
    e_plus = np.exp(-alpha * (np.minimum(a, h) + h))
    q = 0.5 * (e_minus + e_plus)             # exp(-alpha h) cosh(alpha eta)
    qs = 0.5 * (e_minus - e_plus)            # exp(-alpha h) sinh(alpha |eta|)
    dd = 1.0 - q
    sgn = np.sign(eta)
    with np.errstate(divide="ignore", invalid="ignore"):
        c_in = -np.log1p(-q)
        de_in = alpha * qs * sgn / dd
        da_in = -(h * q - a * qs) / dd
        dD_in = -0.5 * alpha * q / dd

    lsh = log_sinh(alpha * h)
    coth = _coth(alpha * h)
    c_out = alpha * a - lsh
    de_out = alpha * sgn
    da_out = a - h * coth
    dD_out = -0.5 * alpha * coth

    return (np.where(inner, c_in, c_out), np.where(inner, de_in, de_out),
            np.where(inner, da_in, da_out), np.where(inner, dD_in, dD_out))


def laplace_rep_cost(model: LaplaceZModel, s_minus_u):
    """Training-time representation cost ``log f_U(u) / f_{S-U}(s - u)``."""
    cost = laplace_rep_cost_grad(model.alpha, model.delta, s_minus_u)[0]
    return float(cost) if np.ndim(cost) == 0 else cost


def laplace_pmf_log(model: LaplaceZModel, z, u):
    """``log p_{Z|U}(z | u)`` for ``Z = K(S + U)`` on ``delta * Z``.

    ``z`` is the integer index of the lattice point ``z * delta``; ``u`` must
    lie in the zero cell ``(-delta/2, delta/2]``.
    """
    alpha, delta = np.asarray(model.alpha, float), np.asarray(model.delta, float)
    z = np.asarray(z)
    u = np.asarray(u, float)
    alpha, delta, z, u = np.broadcast_arrays(alpha, delta, z, u)
    h = 0.5 * delta
    if np.any(np.abs(u) > h * (1.0 + 1e-9)):
        raise ContractViolation("dither u lies outside the zero cell (-delta/2, delta/2]")
    q = 0.5 * (np.exp(alpha * (np.abs(u) - h)) + np.exp(-alpha * (np.abs(u) + h)))
    zero = np.log1p(-q)
    nonzero = -(alpha * np.abs(z * delta - u) - log_sinh(alpha * h))
    out = np.where(z == 0, zero, nonzero)
    return float(out) if out.ndim == 0 else out


def laplace_density(alpha: float):
    """Density of a Laplace variable; vectorized over the trailing axis (product)."""
    def f(s):
        s = np.asarray(s, dtype=float)
        return np.prod(0.5 * alpha * np.exp(-alpha * np.abs(s)), axis=-1)
    return f


def gaussian_density(var: float):
    """Isotropic Gaussian density; vectorized over the trailing axis."""
    def f(s):
        s = np.asarray(s, dtype=float)
        m = s.shape[-1]
        return np.exp(-0.5 * np.sum(s * s, axis=-1) / var) / (2 * math.pi * var) ** (m / 2)
    return f


def estimate_f_s_minus_u(density_S, lattice, eta, k: int, rng: np.random.Generator,
                         return_stderr: bool = False):
    """Unbiased Monte-Carlo estimate of ``f_{S-U}(eta)``: ``mean_i f_S(eta - V_i)``.

    ``density_S`` is called once with a ``(k, t)`` array of points.
    """
    if k < 1:
        raise ContractViolation("k must be >= 1")
    eta = np.asarray(eta, dtype=float).reshape(-1)
    v = sample_dither(lattice, rng, size=k)
    vals = np.asarray(density_S(eta[None, :] - v), dtype=float).reshape(k)
    est = float(vals.mean())
    if not return_stderr:
        return est
    se = float(vals.std(ddof=1) / math.sqrt(k)) if k > 1 else float("nan")
    return est, se


# --------------------------------------------------------------------------
# Gaussian proxy.


@dataclass
class GaussianProxyParams:
    sigma_ug_sq: float | np.ndarray
    sigma_us_sq: float | np.ndarray
    m: int

    def __post_init__(self):
        if np.any(~(np.asarray(self.sigma_ug_sq) > 0)):
            raise ContractViolation("sigma_ug_sq must be positive")
        if np.any(np.asarray(self.sigma_us_sq) < 0):
            raise ContractViolation("sigma_us_sq must be non-negative")


def gaussian_kl_sample(e_x, u_g, params: GaussianProxyParams) -> float:
    """Single-sample KL term of Gaussian-proxy training.

    ``0.5 * (|e - u|^2 / (sg + ss) - |u|^2 / sg - m log(sg / (sg + ss)))``
    """
    e_x = np.asarray(e_x, dtype=float)
    u_g = np.asarray(u_g, dtype=float)
    if e_x.shape != u_g.shape or e_x.shape[-1] != params.m:
        raise ContractViolation("e_x and u_g must both have length m")
    sg, ss = float(params.sigma_ug_sq), float(params.sigma_us_sq)
    s = sg + ss
    r = e_x - u_g
    return 0.5 * (float(r @ r) / s - float(u_g @ u_g) / sg - params.m * math.log(sg / s))


def gaussian_kl_analytic(e_x, params: GaussianProxyParams) -> float:
    """``KL(N(e, sg I) || N(0, (sg + ss) I))``."""
    e_x = np.asarray(e_x, dtype=float)
    if e_x.shape[-1] != params.m:
        raise ContractViolation("e_x must have length m")
    sg, ss = float(params.sigma_ug_sq), float(params.sigma_us_sq)
    s = sg + ss
    m = params.m
    return 0.5 * (m * sg / s + float(e_x @ e_x) / s - m + m * math.log(s / sg))


# --------------------------------------------------------------------------
# Theta-series prior with a dither-conditioned small-norm table.


@dataclass(eq=False)
class ThetaPrior:
    """Learnable pmf over base-lattice points, one parameter set per block.

    Points with squared norm ``>= threshold`` get
    ``log sigmoid(-flag) + logsoftmax(psi)[k] - log theta[k]``; points below
    the threshold get ``log sigmoid(flag) + logsoftmax(u W + b)[j]`` where
    ``u`` is the de-scaled dither of the block. The softmax over ``psi`` only
    runs over non-empty shells in ``[threshold, max_norm_sq]`` so the pmf is
    normalized on the modelled support.
    """

    base: LatticeBasis
    blocks: int
    max_norm_sq: int
    threshold: int
    psi: np.ndarray            # (blocks, max_norm_sq + 1)
    flag: np.ndarray           # (blocks,)
    small_W: np.ndarray        # (blocks, m, S)
    small_b: np.ndarray        # (blocks, S)
    oos_penalty: float = 1.0
    theta: np.ndarray = field(init=False, repr=False)
    small_points: np.ndarray = field(init=False, repr=False)
    large_mask: np.ndarray = field(init=False, repr=False)
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.threshold < 0 or self.max_norm_sq < 0:
            raise ContractViolation("threshold and max_norm_sq must be >= 0")
        self.theta = theta_array(self.base, self.max_norm_sq)
        self.small_points = points_below(self.base, self.threshold)
        shells = np.arange(self.max_norm_sq + 1)
        self.large_mask = (shells >= self.threshold) & (self.theta > 0)
        self._index = {tuple(p): j for j, p in enumerate(self.small_points)}
        S = len(self.small_points)
        expect = {
            "psi": (self.blocks, self.max_norm_sq + 1),
            "flag": (self.blocks,),
            "small_W": (self.blocks, self.base.m, S),
            "small_b": (self.blocks, S),
        }
        for name, shape in expect.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ContractViolation(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)

    @classmethod
    def create(cls, base, blocks: int, max_norm_sq: int, threshold: int,
               oos_penalty: float = 1.0) -> ThetaPrior:
        if isinstance(base, str):
            base = lattice_basis(base)
        S = len(points_below(base, threshold))
        return cls(
            base=base, blocks=blocks, max_norm_sq=max_norm_sq, threshold=threshold,
            psi=np.zeros((blocks, max_norm_sq + 1)),
            flag=np.zeros(blocks),
            small_W=np.zeros((blocks, base.m, S)),
            small_b=np.zeros((blocks, S)),
            oos_penalty=oos_penalty,
        )

    @property
    def n_small(self) -> int:
        return len(self.small_points)

    @property
    def has_large(self) -> bool:
        return bool(self.large_mask.any())

    @property
    def max_shell(self) -> int:
        return int(np.flatnonzero(self.large_mask)[-1]) if self.has_large else -1

    def param_names(self) -> tuple[str, ...]:
        return ("psi", "flag", "small_W", "small_b")

    def small_index(self, coeffs: np.ndarray) -> np.ndarray:
        """Row index into ``small_points`` for each coefficient row (-1 if absent)."""
        flat = np.asarray(coeffs, dtype=np.int64).reshape(-1, self.base.m)
        idx = np.array([self._index.get(tuple(r), -1) for r in flat], dtype=np.int64)
        return idx.reshape(np.shape(coeffs)[:-1])


def _flag_terms(prior: ThetaPrior, small: np.ndarray):
    """Per-entry flag log-probability and d(-logp)/dflag, shape like ``small``."""
    f = prior.flag[None, :]
    if prior.n_small == 0 or not prior.has_large:
        return np.zeros(small.shape), np.zeros(small.shape)
    logp = np.where(small, log_expit(f), log_expit(-f))
    grad = np.where(small, expit(f) - 1.0, expit(f))
    return logp, grad


def _block_terms(prior: ThetaPrior, coeffs, norms, u_desc, clamp: bool):
    coeffs = np.asarray(coeffs, dtype=np.int64)
    norms = np.asarray(norms, dtype=np.int64)
    u_desc = np.asarray(u_desc, dtype=float)
    n, B = norms.shape
    if B != prior.blocks:
        raise ContractViolation(f"prior has {prior.blocks} blocks, got {B}")
    small = norms < prior.threshold
    over = norms > prior.max_norm_sq
    if over.any() and not clamp:
        raise OutOfSupportError(
            f"lattice point with squared norm {int(norms.max())} exceeds the "
            f"prior's modelled range {prior.max_norm_sq}"
        )
    if (~small).any() and not prior.has_large:
        raise OutOfSupportError("prior has no shells at or above its threshold")
    shell = np.where(over, prior.max_shell, norms)
    if (~small & ~over).any() and not np.all(prior.large_mask[shell[~small & ~over]]):
        raise OutOfSupportError("lattice point lies on an empty theta shell")
    return coeffs, norms, u_desc, small, over, shell


def theta_prior_block_logpmf(prior: ThetaPrior, coeffs, norms, u_desc,
                             clamp: bool = False) -> np.ndarray:
    """Per-block log-pmf, shape ``(n, blocks)``.

    ``coeffs`` is ``(n, blocks, m)``, ``norms`` is ``(n, blocks)`` and
    ``u_desc`` the de-scaled dither ``(n, blocks, m)``. With ``clamp=True``
    points beyond ``max_norm_sq`` are scored on the outermost shell minus
    ``oos_penalty`` nats per unit of excess norm (training only).
    """
    coeffs, norms, u_desc, small, over, shell = _block_terms(prior, coeffs, norms, u_desc, clamp)
    flag_logp, _ = _flag_terms(prior, small)
    out = flag_logp.copy()

    if prior.has_large:
        masked = np.where(prior.large_mask, prior.psi, -np.inf)
        lse = logsumexp(masked, axis=1)                     # (B,)
        with np.errstate(divide="ignore"):
            log_theta = np.log(prior.theta.astype(float))
        large_lp = prior.psi[np.arange(prior.blocks)[None, :], shell] - lse[None, :] \
            - log_theta[shell]
        large_lp = large_lp - prior.oos_penalty * np.where(over, norms - prior.max_norm_sq, 0)
        out = out + np.where(small, 0.0, large_lp)

    if prior.n_small and small.any():
        idx = prior.small_index(coeffs)
        logits = np.einsum("nbm,bms->nbs", u_desc, prior.small_W) + prior.small_b[None]
        logsm = logits - logsumexp(logits, axis=2, keepdims=True)
        picked = np.take_along_axis(logsm, np.maximum(idx, 0)[..., None], axis=2)[..., 0]
        out = out + np.where(small, picked, 0.0)
    return out


def theta_prior_nll_grad(prior: ThetaPrior, coeffs, norms, u_desc, clamp: bool = True):
    """Total ``-sum log p`` over the batch and its gradient w.r.t. prior parameters."""
    coeffs, norms, u_desc, small, over, shell = _block_terms(prior, coeffs, norms, u_desc, clamp)
    logp = theta_prior_block_logpmf(prior, coeffs, norms, u_desc, clamp=clamp)
    grads = {name: np.zeros_like(getattr(prior, name)) for name in prior.param_names()}
    _, g_flag = _flag_terms(prior, small)
    grads["flag"] = g_flag.sum(axis=0)

    n, B = norms.shape
    bidx = np.broadcast_to(np.arange(B)[None, :], (n, B))
    large = ~small
    if prior.has_large and large.any():
        masked = np.where(prior.large_mask, prior.psi, -np.inf)
        soft = np.exp(masked - logsumexp(masked, axis=1, keepdims=True))  # (B, K)
        counts = large.sum(axis=0)                                        # (B,)
        g = soft * counts[:, None]
        np.add.at(g, (bidx[large], shell[large]), -1.0)
        grads["psi"] = g

    if prior.n_small and small.any():
        idx = prior.small_index(coeffs)
        logits = np.einsum("nbm,bms->nbs", u_desc, prior.small_W) + prior.small_b[None]
        p = np.exp(logits - logsumexp(logits, axis=2, keepdims=True))
        resid = p * small[..., None]
        rows, cols = np.nonzero(small)
        resid[rows, cols, idx[rows, cols]] -= 1.0
        grads["small_b"] = resid.sum(axis=0)
        grads["small_W"] = np.einsum("nbm,nbs->bms", u_desc, resid)
    return float(-logp.sum()), grads


def theta_prior_logpmf(prior: ThetaPrior, point: LatticePoint, u) -> float:
    """Log-probability of ``point`` given the dither ``u`` (scaled coordinates).

    Raises :class:`OutOfSupportError` for points beyond ``max_norm_sq``.
    """
    m = prior.base.m
    deltas = np.asarray(point.deltas, dtype=float)
    coeffs = np.asarray(point.coeffs).reshape(1, prior.blocks, m)
    u = np.asarray(u, dtype=float).reshape(1, prior.blocks, m) / deltas[None, :, None]
    norms = np.asarray(point.norm_sq_unscaled).reshape(1, prior.blocks)
    return float(theta_prior_block_logpmf(prior, coeffs, norms, u).sum())


def theta_prior_support(prior: ThetaPrior) -> tuple[np.ndarray, np.ndarray]:
    """All base-lattice points on the modelled support of one block, with norms."""
    from .lattice import enumerate_ball

    pts = enumerate_ball(prior.base.rows, np.zeros(prior.base.m),
                         math.sqrt(prior.max_norm_sq))
    norms = prior.base.norms(pts)
    keep = norms <= prior.max_norm_sq
    return pts[keep], norms[keep]
