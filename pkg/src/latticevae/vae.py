"""Linear Bernoulli VAE with a quantized latent and hand-written gradients.

Two training modes are supported:

``DirectLaplaceZ``
    Latents are quantized on a per-coordinate scaled integer lattice with a
    Laplacian source model. Training uses the continuous cost
    ``log f_U(u) / f_{S-U}(e - u)`` together with the reconstruction cost at
    ``e - u``.
``GaussianProxy``
    Training replaces the dither by Gaussian noise of matched second
    moment and charges the Gaussian KL. The lattice code length under a
    learned theta-series prior is computed on the side, and only the prior
    parameters receive its gradient.

Inference always quantizes with a subtractive dither and reports
``-log p(z | u) - log p(x | z - u)`` per example, optionally aggregated over
several dithers with a log-mean-exp.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit, logsumexp

from .errors import ContractViolation, TrainingDiverged
from .lattice import ScaledProductLattice, lattice_basis, matched_delta, quantize, sample_dither
from .priors import (
    GaussianProxyParams,
    LaplaceZModel,
    ThetaPrior,
    laplace_pmf_log,
    laplace_rep_cost_grad,
    theta_prior_block_logpmf,
    theta_prior_nll_grad,
)

DEFAULT_THRESHOLDS = {"Z": 2, "Z2": 3, "A2": 4, "E8": 3}


class Mode(str, Enum):
    DIRECT = "DirectLaplaceZ"
    PROXY = "GaussianProxy"

    @classmethod
    def parse(cls, value) -> Mode:
        if isinstance(value, Mode):
            return value
        key = str(value).strip().lower()
        aliases = {"direct": cls.DIRECT, "directlaplacez": cls.DIRECT,
                   "proxy": cls.PROXY, "gaussianproxy": cls.PROXY}
        if key not in aliases:
            raise ContractViolation(f"unknown training mode {value!r}")
        return aliases[key]


# --------------------------------------------------------------------------
# Parameters.


@dataclass(eq=False)
class ModelParams:
    """All model parameters. Scales and variances are stored as logs."""

    enc_A: np.ndarray                       # (d, t)
    enc_b: np.ndarray                       # (t,)
    dec_W: np.ndarray                       # (t, d)
    dec_c: np.ndarray                       # (d,)
    mode: Mode
    lattice: str = "Z"
    log_alpha: np.ndarray | None = None     # (t,) or (1,) when shared
    log_delta: np.ndarray | None = None
    log_sigma_ug_sq: np.ndarray | None = None   # (blocks,)
    log_sigma_us_sq: np.ndarray | None = None
    prior: ThetaPrior | None = None

    def __post_init__(self):
        self.mode = Mode.parse(self.mode)
        d, t = np.shape(self.enc_A)
        if np.shape(self.enc_b) != (t,) or np.shape(self.dec_W) != (t, d) \
                or np.shape(self.dec_c) != (d,):
            raise ContractViolation("encoder/decoder shapes are inconsistent")
        direct = self.log_alpha is not None and self.log_delta is not None
        proxy = self.log_sigma_ug_sq is not None and self.log_sigma_us_sq is not None
        if self.mode is Mode.DIRECT:
            if not direct or proxy:
                raise ContractViolation("direct mode needs log_alpha/log_delta and no proxy")
            if self.lattice != "Z":
                raise ContractViolation("direct mode quantizes on the integer lattice Z")
            for name in ("log_alpha", "log_delta"):
                if np.shape(getattr(self, name)) not in ((t,), (1,)):
                    raise ContractViolation(f"{name} must have shape ({t},) or (1,)")
        else:
            if not proxy or direct:
                raise ContractViolation("proxy mode needs the two log-variances and no Laplace model")
            if self.prior is None:
                raise ContractViolation("proxy mode needs a theta prior")
            m = lattice_basis(self.lattice).m
            if t % m:
                raise ContractViolation(f"latent dim {t} is not a multiple of {m}")
            for name in ("log_sigma_ug_sq", "log_sigma_us_sq"):
                if np.shape(getattr(self, name)) != (t // m,):
                    raise ContractViolation(f"{name} must have shape ({t // m},)")
            if self.prior.base.name != self.lattice or self.prior.blocks != t // m:
                raise ContractViolation("prior does not match the lattice layout")

    # shapes
    @property
    def d(self) -> int:
        return self.enc_A.shape[0]

    @property
    def t(self) -> int:
        return self.enc_A.shape[1]

    @property
    def base(self):
        return lattice_basis(self.lattice)

    @property
    def blocks(self) -> int:
        return self.t // self.base.m

    # derived models
    @property
    def laplace(self) -> LaplaceZModel | None:
        if self.mode is not Mode.DIRECT:
            return None
        ones = np.ones(self.t)
        return LaplaceZModel(np.exp(self.log_alpha) * ones, np.exp(self.log_delta) * ones)

    @property
    def proxy(self) -> GaussianProxyParams | None:
        if self.mode is not Mode.PROXY:
            return None
        return GaussianProxyParams(np.exp(self.log_sigma_ug_sq),
                                   np.exp(self.log_sigma_us_sq), self.base.m)

    def deltas(self) -> np.ndarray:
        """Current per-block lattice scales."""
        if self.mode is Mode.DIRECT:
            return np.exp(self.log_delta) * np.ones(self.t)
        return np.atleast_1d(matched_delta(self.base, np.exp(self.log_sigma_ug_sq)))

    def quant_lattice(self) -> ScaledProductLattice:
        return ScaledProductLattice(self.base, self.deltas())

    # flat access used by the optimizer and the gradient check
    def arrays(self) -> dict[str, np.ndarray]:
        names = ["enc_A", "enc_b", "dec_W", "dec_c"]
        if self.mode is Mode.DIRECT:
            names += ["log_alpha", "log_delta"]
        else:
            names += ["log_sigma_ug_sq", "log_sigma_us_sq"]
        out = {n: getattr(self, n) for n in names}
        if self.prior is not None:
            for n in self.prior.param_names():
                out["prior." + n] = getattr(self.prior, n)
        return out

    def set_array(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=float)
        if name.startswith("prior."):
            setattr(self.prior, name[6:], value)
        else:
            setattr(self, name, value)

    def copy(self) -> ModelParams:
        prior = None
        if self.prior is not None:
            prior = ThetaPrior(
                base=self.prior.base, blocks=self.prior.blocks,
                max_norm_sq=self.prior.max_norm_sq, threshold=self.prior.threshold,
                psi=self.prior.psi.copy(), flag=self.prior.flag.copy(),
                small_W=self.prior.small_W.copy(), small_b=self.prior.small_b.copy(),
                oos_penalty=self.prior.oos_penalty,
            )
        kw = {n: (None if getattr(self, n) is None else np.array(getattr(self, n), dtype=float))
              for n in ("enc_A", "enc_b", "dec_W", "dec_c", "log_alpha", "log_delta",
                        "log_sigma_ug_sq", "log_sigma_us_sq")}
        return ModelParams(mode=self.mode, lattice=self.lattice, prior=prior, **kw)


def init_params(d: int, t: int, mode="proxy", lattice: str | None = None,
                rng: np.random.Generator | None = None, data_mean=None,
                init_scale: float = 0.1, shared_scale: bool = False,
                max_norm_sq: int = 64, threshold: int | None = None,
                oos_penalty: float = 1.0) -> ModelParams:
    """Small random weights; decoder bias set to the data logit when given."""
    mode = Mode.parse(mode)
    if d < 1 or t < 1:
        raise ContractViolation("d and t must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    lattice = ("Z" if mode is Mode.DIRECT else "A2") if lattice is None else lattice
    base = lattice_basis(lattice)
    enc_A = init_scale * rng.standard_normal((d, t)) / math.sqrt(d)
    dec_W = init_scale * rng.standard_normal((t, d))
    if data_mean is None:
        dec_c = np.zeros(d)
    else:
        p = np.clip(np.asarray(data_mean, float), 1e-3, 1 - 1e-3)
        dec_c = np.log(p) - np.log1p(-p)
    common = dict(enc_A=enc_A, enc_b=np.zeros(t), dec_W=dec_W, dec_c=dec_c, lattice=lattice)
    if mode is Mode.DIRECT:
        k = 1 if shared_scale else t
        return ModelParams(mode=mode, log_alpha=np.zeros(k), log_delta=np.zeros(k), **common)
    if t % base.m:
        raise ContractViolation(f"latent dim {t} is not a multiple of {base.m}")
    blocks = t // base.m
    thr = DEFAULT_THRESHOLDS.get(lattice, 2) if threshold is None else threshold
    prior = ThetaPrior.create(base, blocks, max_norm_sq, thr, oos_penalty=oos_penalty)
    return ModelParams(mode=mode, log_sigma_ug_sq=np.zeros(blocks),
                       log_sigma_us_sq=np.zeros(blocks), prior=prior, **common)


# --------------------------------------------------------------------------
# Encoder and decoder.


def encode(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.d:
        raise ContractViolation(f"expected inputs of length {params.d}, got {x.shape[-1]}")
    return x @ params.enc_A + params.enc_b


def _check_binary(x: np.ndarray) -> None:
    if not np.all((x == 0) | (x == 1)):
        raise ContractViolation("x must be binary")


def decode_nll(params: ModelParams, latent, x):
    """Bernoulli negative log-likelihood of ``x`` under logits ``latent W + c``."""
    latent = np.asarray(latent, dtype=float)
    x = np.asarray(x, dtype=float)
    if latent.shape[-1] != params.t or x.shape[-1] != params.d:
        raise ContractViolation("latent or x has the wrong length")
    _check_binary(x)
    logits = latent @ params.dec_W + params.dec_c
    out = np.sum(np.logaddexp(0.0, logits) - x * logits, axis=-1)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Losses. Each public loss draws its noise and calls a deterministic core so
# the gradient check can freeze the noise.


@dataclass
class DirectNoise:
    dither: np.ndarray          # (n, t), de-scaled, in (-1/2, 1/2]


@dataclass
class ProxyNoise:
    gauss: np.ndarray           # (n, t) standard normal
    dither: np.ndarray          # (n, t) de-scaled base-cell dither
    coeffs: np.ndarray | None = None   # frozen codes; recomputed when None


def _as_batch(params: ModelParams, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.d:
        raise ContractViolation(f"expected inputs of length {params.d}, got {x.shape[1]}")
    _check_binary(x)
    return x


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    return g.sum(keepdims=True) if shape == (1,) else g


def draw_direct_noise(params: ModelParams, n: int, rng: np.random.Generator) -> DirectNoise:
    unit = ScaledProductLattice.uniform("Z", params.t, 1.0)
    return DirectNoise(sample_dither(unit, rng, size=n))


def draw_proxy_noise(params: ModelParams, n: int, rng: np.random.Generator) -> ProxyNoise:
    gauss = rng.standard_normal((n, params.t))
    unit = ScaledProductLattice.uniform(params.base, params.blocks, 1.0)
    return ProxyNoise(gauss, sample_dither(unit, rng, size=n))


def _direct_core(params: ModelParams, x: np.ndarray, noise: DirectNoise):
    n = len(x)
    ones = np.ones(params.t)
    alpha = np.exp(params.log_alpha) * ones
    delta = np.exp(params.log_delta) * ones
    ut = noise.dither
    e = x @ params.enc_A + params.enc_b
    lat = e - ut * delta
    logits = lat @ params.dec_W + params.dec_c
    rec = np.sum(np.logaddexp(0.0, logits) - x * logits, axis=1)
    cost, d_eta, d_alpha, d_delta = laplace_rep_cost_grad(alpha, delta, lat)
    rep = cost.sum(axis=1)
    loss = float(np.mean(rec + rep))

    g_logits = (expit(logits) - x) / n
    g_lat = g_logits @ params.dec_W.T + d_eta / n
    g_delta = np.sum(-g_lat * ut, axis=0) + d_delta.sum(axis=0) / n
    g_alpha = d_alpha.sum(axis=0) / n
    grads = {
        "enc_A": x.T @ g_lat,
        "enc_b": g_lat.sum(axis=0),
        "dec_W": lat.T @ g_logits,
        "dec_c": g_logits.sum(axis=0),
        "log_alpha": _reduce_to(g_alpha * alpha, params.log_alpha.shape),
        "log_delta": _reduce_to(g_delta * delta, params.log_delta.shape),
    }
    parts = {"rec": float(rec.mean()), "rep": float(rep.mean())}
    return loss, grads, parts


def loss_direct(params: ModelParams, x, rng: np.random.Generator):
    """Mean training loss per example and its gradients (``DirectLaplaceZ``)."""
    if params.mode is not Mode.DIRECT:
        raise ContractViolation("loss_direct needs a DirectLaplaceZ model")
    x = _as_batch(params, x)
    loss, grads, _ = _direct_core(params, x, draw_direct_noise(params, len(x), rng))
    return loss, grads


def proxy_codes(params: ModelParams, x: np.ndarray, dither: np.ndarray) -> np.ndarray:
    """Lattice codes ``K(e(x) + U)`` with ``U`` the scaled de-scaled dither."""
    lat = params.quant_lattice()
    u = (lat.to_blocks(dither) * lat.deltas[:, None]).reshape(dither.shape)
    return quantize(lat, encode(params, x) + u)


def _proxy_core(params: ModelParams, x: np.ndarray, noise: ProxyNoise):
    n = len(x)
    m, B, t = params.base.m, params.blocks, params.t
    sg = np.exp(params.log_sigma_ug_sq)
    ss = np.exp(params.log_sigma_us_sq)
    sg_t, ss_t = np.repeat(sg, m), np.repeat(ss, m)
    s_t = sg_t + ss_t
    root = np.sqrt(sg_t)
    eps = noise.gauss

    e = x @ params.enc_A + params.enc_b
    r = e - root * eps
    logits = r @ params.dec_W + params.dec_c
    rec = np.sum(np.logaddexp(0.0, logits) - x * logits, axis=1)
    log_ratio = np.log(sg + ss) - np.log(sg)            # (B,)
    kl = 0.5 * (np.sum(r * r / s_t, axis=1) - np.sum(eps * eps, axis=1)
                + m * log_ratio.sum())

    # code length: gradients reach the prior only
    coeffs = noise.coeffs if noise.coeffs is not None else proxy_codes(params, x, noise.dither)
    lat = params.quant_lattice()
    norms = lat.block_norms(coeffs)
    nll_code, g_prior = theta_prior_nll_grad(
        params.prior, coeffs.reshape(n, B, m), norms, noise.dither.reshape(n, B, m), clamp=True)
    code = nll_code / n
    loss = float(np.mean(rec + kl) + code)

    g_logits = (expit(logits) - x) / n
    g_r = g_logits @ params.dec_W.T + r / s_t / n
    quad = -0.5 * np.sum(r * r, axis=0) / s_t**2 / n  # d/ds of the quadratic term
    g_sg_t = np.sum(-g_r * eps, axis=0) / (2.0 * root) + quad
    g_ss_t = quad
    g_sg = g_sg_t.reshape(B, m).sum(axis=1) + 0.5 * m * (1.0 / (sg + ss) - 1.0 / sg)
    g_ss = g_ss_t.reshape(B, m).sum(axis=1) + 0.5 * m / (sg + ss)
    grads = {
        "enc_A": x.T @ g_r,
        "enc_b": g_r.sum(axis=0),
        "dec_W": r.T @ g_logits,
        "dec_c": g_logits.sum(axis=0),
        "log_sigma_ug_sq": g_sg * sg,
        "log_sigma_us_sq": g_ss * ss,
    }
    for k, v in g_prior.items():
        grads["prior." + k] = v / n
    parts = {"rec": float(rec.mean()), "kl": float(kl.mean()), "code": float(code),
             "coeffs": coeffs}
    return loss, grads, parts


def loss_proxy(params: ModelParams, x, rng: np.random.Generator):
    """Augmented proxy loss ``rec + KL + code length`` per example.

    Returns ``(loss, grads, code_len)``. The code length is piecewise
    constant in the encoder and the variances, so its gradient only flows
    into the prior.
    """
    if params.mode is not Mode.PROXY:
        raise ContractViolation("loss_proxy needs a GaussianProxy model")
    x = _as_batch(params, x)
    loss, grads, parts = _proxy_core(params, x, draw_proxy_noise(params, len(x), rng))
    return loss, grads, parts["code"]


def loss_and_grads(params: ModelParams, x, rng: np.random.Generator):
    if params.mode is Mode.DIRECT:
        return loss_direct(params, x, rng)
    loss, grads, _ = loss_proxy(params, x, rng)
    return loss, grads


def gaussian_elbo(params: ModelParams, x, rng: np.random.Generator, n_samples: int = 10) -> float:
    """Mean negative Gaussian ELBO (reconstruction + analytic KL) in nats/example."""
    if params.mode is not Mode.PROXY:
        raise ContractViolation("gaussian_elbo needs a GaussianProxy model")
    x = _as_batch(params, x)
    m = params.base.m
    sg = np.repeat(np.exp(params.log_sigma_ug_sq), m)
    s = sg + np.repeat(np.exp(params.log_sigma_us_sq), m)
    e = encode(params, x)
    kl = 0.5 * np.sum(sg / s + e * e / s - 1.0 + np.log(s / sg), axis=1)
    rec = np.zeros(len(x))
    for _ in range(n_samples):
        rec += decode_nll(params, e - np.sqrt(sg) * rng.standard_normal(e.shape), x)
    return float(np.mean(rec / n_samples + kl))


# --------------------------------------------------------------------------
# Gradient check.


def finite_diff_check(params: ModelParams, x, eps: float = 1e-5, rng_seed: int = 0,
                      max_entries: int | None = None, corrupt: str | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    The noise (and in proxy mode the lattice codes) is drawn once and held
    fixed. ``max_entries`` caps the checked entries per array (chosen at
    random); ``corrupt`` names an array whose first analytic entry is negated
    as a negative control.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ContractViolation("eps must lie in [1e-6, 1e-4]")
    x = _as_batch(params, x)
    rng = np.random.default_rng(rng_seed)
    p = params.copy()
    if p.mode is Mode.DIRECT:
        noise = draw_direct_noise(p, len(x), rng)

        def f(q):
            return _direct_core(q, x, noise)
    else:
        noise = draw_proxy_noise(p, len(x), rng)
        noise.coeffs = proxy_codes(p, x, noise.dither)

        def f(q):
            return _proxy_core(q, x, noise)

    _, grads, _ = f(p)
    worst = 0.0
    for name, arr in p.arrays().items():
        g = np.array(grads[name], dtype=float).reshape(-1)
        if corrupt == name:
            g[0] = -g[0] if g[0] != 0 else 1.0
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
            if corrupt == name:
                idx[0] = 0
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            up = f(p)[0]
            flat[i] = keep - eps
            down = f(p)[0]
            flat[i] = keep
            num = (up - down) / (2.0 * eps)
            a = g[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-4))
    return worst


# --------------------------------------------------------------------------
# Optimizer and training.


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.steps += 1
        c1 = 1.0 - self.beta1**self.steps
        c2 = 1.0 - self.beta2**self.steps
        for name, arr in params.arrays().items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(arr))
            v = self.v.setdefault(name, np.zeros_like(arr))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            arr -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    latent_dim: int = 8
    mode: str = "proxy"
    lattice: str = "A2"
    batch_size: int = 32
    learning_rate: float = 0.01
    max_epochs: int = 30
    patience: int = 10
    anneal: float = 0.5
    seed: int = 0
    stop_patience: int | None = None
    max_norm_sq: int = 64
    threshold: int | None = None
    shared_scale: bool = False
    init_scale: float = 0.1

    def __post_init__(self):
        self.mode = Mode.parse(self.mode).value
        for name in ("latent_dim", "batch_size", "max_epochs", "patience"):
            if int(getattr(self, name)) < 1:
                raise ContractViolation(f"{name} must be positive")
        if self.stop_patience is not None and self.stop_patience < 1:
            raise ContractViolation("stop_patience must be positive")
        if not 0.0 < self.anneal < 1.0:
            raise ContractViolation("anneal must lie in (0, 1)")
        if not self.learning_rate > 0:
            raise ContractViolation("learning_rate must be positive")
        if Mode.parse(self.mode) is Mode.DIRECT and self.lattice != "Z":
            raise ContractViolation("direct mode uses the integer lattice Z")
        if self.latent_dim % lattice_basis(self.lattice).m:
            raise ContractViolation("latent_dim must be a multiple of the lattice dimension")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def params_for(config: TrainConfig, d: int, data_mean=None) -> ModelParams:
    return init_params(
        d, config.latent_dim, config.mode, config.lattice,
        rng=np.random.default_rng([config.seed, 0]), data_mean=data_mean,
        init_scale=config.init_scale, shared_scale=config.shared_scale,
        max_norm_sq=config.max_norm_sq, threshold=config.threshold,
    )


def _splits(dataset):
    if isinstance(dataset, tuple):
        train_x, val_x = dataset
    else:
        train_x, val_x = dataset.subset("train"), dataset.subset("validation")
    train_x = np.asarray(train_x, dtype=float)
    val_x = np.asarray(val_x, dtype=float)
    if len(train_x) == 0:
        raise ContractViolation("training split is empty")
    if len(val_x) == 0:
        val_x = train_x
    return train_x, val_x


def _eval_loss(params: ModelParams, x: np.ndarray, seed) -> float:
    return loss_and_grads(params, x, np.random.default_rng(seed))[0]


def train(params: ModelParams | None, config: TrainConfig, dataset):
    """Minibatch Adam with learning-rate halving on validation plateaus.

    ``dataset`` is a :class:`~latticevae.data.Dataset` or a ``(train, val)``
    pair of binary arrays. Returns ``(best_params, history)``; validation
    noise is fixed across epochs so losses are comparable.
    """
    train_x, val_x = _splits(dataset)
    if params is None:
        params = params_for(config, train_x.shape[1], train_x.mean(axis=0))
    params = params.copy()
    rng = np.random.default_rng([config.seed, 1])
    val_seed = [config.seed, 2]
    opt = Adam(config.learning_rate)
    stop_after = config.stop_patience or 3 * config.patience

    best = _eval_loss(params, val_x, val_seed)
    best_params = params.copy()
    stale = since_anneal = 0
    history: list[HistoryRow] = []
    n = len(train_x)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = train_x[order[start:start + config.batch_size]]
            loss, grads = loss_and_grads(params, batch, rng)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss or gradient in epoch {epoch}")
            opt.step(params, grads)
            total += loss * len(batch)
        val = _eval_loss(params, val_x, val_seed)
        if not np.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss in epoch {epoch}")
        history.append(HistoryRow(epoch, total / n, val, opt.lr))
        if val < best:
            best, best_params = val, params.copy()
            stale = since_anneal = 0
        else:
            stale += 1
            since_anneal += 1
            if since_anneal >= config.patience:
                opt.lr *= config.anneal
                since_anneal = 0
            if stale >= stop_after:
                break
    return best_params, history


# --------------------------------------------------------------------------
# Quantized inference.


@dataclass
class EvalReport:
    nll: float
    rep_cost: float
    rec_cost: float
    n_importance_samples: int
    split: str
    seed: int
    nll_stderr: float = float("nan")
    n_examples: int = 0
    zero_dither: bool = False
    per_example: np.ndarray | None = field(default=None, repr=False)

    def to_record(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "per_example"}
        out["nll_bits"] = self.nll / math.log(2.0)
        return out


def _unit_dither(params: ModelParams, size: tuple, rng: np.random.Generator) -> np.ndarray:
    unit = ScaledProductLattice.uniform(params.base, params.blocks, 1.0)
    flat = sample_dither(unit, rng, size=int(np.prod(size)))
    return flat.reshape(size + (params.t,))


def quantized_costs(params: ModelParams, x: np.ndarray, dither: np.ndarray):
    """Per-example code length and reconstruction cost for one dither per row.

    ``dither`` is de-scaled (base-cell coordinates). Returns
    ``(rep, rec, coeffs, decoder_input)``.
    """
    lat = params.quant_lattice()
    u = (lat.to_blocks(dither) * lat.deltas[:, None]).reshape(dither.shape)
    e = encode(params, x)
    coeffs = quantize(lat, e + u)
    dec_in = lat.embed(coeffs) - u
    if params.mode is Mode.DIRECT:
        rep = -laplace_pmf_log(params.laplace, coeffs, u).sum(axis=1)
    else:
        n, B, m = len(x), params.blocks, params.base.m
        rep = -theta_prior_block_logpmf(
            params.prior, coeffs.reshape(n, B, m), lat.block_norms(coeffs),
            dither.reshape(n, B, m)).sum(axis=1)
    rec = decode_nll(params, dec_in, x)
    return rep, rec, coeffs, dec_in


def infer_nll(params: ModelParams, x, k: int, rng: np.random.Generator, split: str = "test",
              seed: int = -1, zero_dither: bool = False, chunk: int = 256) -> EvalReport:
    """Quantized-inference NLL with ``k`` dithers per example.

    ``k = 1`` reports ``rep + rec``; ``k > 1`` reports
    ``-log(mean_i exp(-cost_i))``. ``zero_dither`` forces every dither to 0.
    """
    if k < 1:
        raise ContractViolation("k must be >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=float)) if np.size(x) else np.zeros((0, params.d))
    if x.shape[1] != params.d:
        raise ContractViolation(f"expected inputs of length {params.d}, got {x.shape[1]}")
    n = len(x)
    if n == 0:
        return EvalReport(float("nan"), float("nan"), float("nan"), k, split, seed,
                          n_examples=0, zero_dither=zero_dither, per_example=np.zeros(0))
    per_example = np.empty(n)
    rep_sum = rec_sum = 0.0
    for start in range(0, n, chunk):
        xb = x[start:start + chunk]
        nb = len(xb)
        if zero_dither:
            dith = np.zeros((k, nb, params.t))
        else:
            dith = _unit_dither(params, (k, nb), rng)
        rep, rec, _, _ = quantized_costs(params, np.tile(xb, (k, 1)), dith.reshape(k * nb, -1))
        cost = (rep + rec).reshape(k, nb)
        per_example[start:start + nb] = math.log(k) - logsumexp(-cost, axis=0)
        rep_sum += rep.sum()
        rec_sum += rec.sum()
    se = float(per_example.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return EvalReport(
        nll=float(per_example.mean()), rep_cost=rep_sum / (n * k), rec_cost=rec_sum / (n * k),
        n_importance_samples=k, split=split, seed=seed, nll_stderr=se, n_examples=n,
        zero_dither=zero_dither, per_example=per_example,
    )


def rep_cost_consistency(params: ModelParams, x, n_dithers: int, rng: np.random.Generator):
    """Quantized vs. continuous representation cost per example (direct mode).

    Uses the same dithers on both sides. Returns ``(quantized, continuous,
    stderr)`` arrays of length ``n``, where ``stderr`` is that of the paired
    difference.
    """
    if params.mode is not Mode.DIRECT:
        raise ContractViolation("only defined for DirectLaplaceZ models")
    x = _as_batch(params, x)
    model = params.laplace
    delta = model.delta
    e = encode(params, x)
    ut = _unit_dither(params, (n_dithers,), rng)[:, None, :]         # (k, 1, t)
    u = ut * delta
    z = quantize(params.quant_lattice(), e[None] + u)
    quant = -laplace_pmf_log(model, z, np.broadcast_to(u, z.shape)).sum(axis=2)
    cont = laplace_rep_cost_grad(model.alpha, delta, e[None] - u)[0].sum(axis=2)
    diff = quant - cont
    se = diff.std(axis=0, ddof=1) / math.sqrt(n_dithers)
    return quant.mean(axis=0), cont.mean(axis=0), se
