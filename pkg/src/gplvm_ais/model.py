"""Sparse Bayesian GPLVM: parameters, variational families, likelihoods.

Per-point latent posteriors q(h_n) = N(a_n, L_n L_n^T) and per-dimension
inducing posteriors q(u_d) = N(m_d, S_d S_d^T) are stored through raw
triangle arrays whose diagonal lives in log space, so every factor keeps a
positive diagonal under unconstrained optimization.

ModelVars lifts a ModelParams onto a tape (or keeps plain arrays when
tape=None); all expression builders below work on either representation
because the autodiff primitives are polymorphic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import kernels as kr
from . import linalg
from .errors import IndexOutOfRange, ShapeMismatch
from .kernels import KernelHyperparams, NoiseVariance
from .linalg import LOG_2PI, RngStream


def tri_from_raw(raw):
    """Effective lower-triangular factor from a raw array.

    Strictly-lower entries pass through; the diagonal is exponentiated;
    the upper triangle is ignored. Works on (..., k, k) stacks.
    """
    k = ad._val(raw).shape[-1]
    strict = np.tril(np.ones((k, k)), -1)
    diag = np.eye(k)
    return ad.add(ad.mul(raw, strict), ad.mul(ad.exp(raw), diag))


def raw_from_tri(lower: np.ndarray) -> np.ndarray:
    """Inverse of tri_from_raw for plain arrays (diagonal must be > 0)."""
    lower = np.asarray(lower, dtype=np.float64)
    k = lower.shape[-1]
    raw = np.tril(lower, -1)
    ii = np.arange(k)
    raw[..., ii, ii] = np.log(lower[..., ii, ii])
    return raw


def sum_log_diag(raw):
    """Row-wise sum of log-diagonals of the effective factor, i.e. the raw
    diagonal entries themselves. Shape (...,) over the leading axes."""
    k = ad._val(raw).shape[-1]
    return ad.sum_(ad.mul(raw, np.eye(k)), axis=(-2, -1))


@dataclass
class LatentVariational:
    """Per-point Gaussian posteriors over latent coordinates."""

    mean: np.ndarray       # (N, Q)
    scale_raw: np.ndarray  # (N, Q, Q), see tri_from_raw

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    @property
    def q(self) -> int:
        return self.mean.shape[1]

    def scale(self) -> np.ndarray:
        """Effective lower-triangular factors L_n, shape (N, Q, Q)."""
        return tri_from_raw(self.scale_raw)


@dataclass
class InducingVariational:
    """Inducing inputs and per-dimension Gaussian posteriors over u_d."""

    Z: np.ndarray            # (m, Q)
    u_mean: np.ndarray       # (m, D), column d is m_d
    u_scale_raw: np.ndarray  # (D, m, m)

    @property
    def m(self) -> int:
        return self.Z.shape[0]

    @property
    def d(self) -> int:
        return self.u_mean.shape[1]

    def scale(self) -> np.ndarray:
        return tri_from_raw(self.u_scale_raw)


@dataclass
class ModelParams:
    """Every trainable quantity, grouped."""

    kernel: KernelHyperparams
    noise: NoiseVariance
    latent: LatentVariational
    inducing: InducingVariational
    schedule_phi: Optional[np.ndarray] = None  # learnable annealing increments

    @property
    def n(self) -> int:
        return self.latent.n

    @property
    def q(self) -> int:
        return self.latent.q

    @property
    def m(self) -> int:
        return self.inducing.m

    @property
    def d(self) -> int:
        return self.inducing.d

    def to_arrays(self) -> dict:
        out = {
            "kernel.log_lengthscales": self.kernel.log_lengthscales,
            "kernel.log_signal_variance": np.asarray(self.kernel.log_signal_variance),
            "noise.log_sigma2": np.asarray(self.noise.log_sigma2),
            "latent.mean": self.latent.mean,
            "latent.scale_raw": self.latent.scale_raw,
            "inducing.Z": self.inducing.Z,
            "inducing.u_mean": self.inducing.u_mean,
            "inducing.u_scale_raw": self.inducing.u_scale_raw,
        }
        if self.schedule_phi is not None:
            out["schedule.phi"] = self.schedule_phi
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> "ModelParams":
        # scalar fields keep their 0-d arrays so optimizers can update
        # parameters in place through to_arrays() views
        return cls(
            kernel=KernelHyperparams(
                log_lengthscales=np.asarray(arrays["kernel.log_lengthscales"]),
                log_signal_variance=np.asarray(arrays["kernel.log_signal_variance"]),
            ),
            noise=NoiseVariance(log_sigma2=np.asarray(arrays["noise.log_sigma2"])),
            latent=LatentVariational(
                mean=np.asarray(arrays["latent.mean"]),
                scale_raw=np.asarray(arrays["latent.scale_raw"]),
            ),
            inducing=InducingVariational(
                Z=np.asarray(arrays["inducing.Z"]),
                u_mean=np.asarray(arrays["inducing.u_mean"]),
                u_scale_raw=np.asarray(arrays["inducing.u_scale_raw"]),
            ),
            schedule_phi=(np.asarray(arrays["schedule.phi"])
                          if "schedule.phi" in arrays else None),
        )

    def copy(self) -> "ModelParams":
        arrays = {k: np.array(v, dtype=np.float64) for k, v in self.to_arrays().items()}
        return ModelParams.from_arrays(arrays)


def initialize_params(X_std: np.ndarray, mask: np.ndarray, q: int, m: int,
                      rng: RngStream, learnable_schedule_k: Optional[int] = None,
                      latent_scale_init: float = 0.1) -> ModelParams:
    """Paper-gap defaults: PCA latent means (unit variance per component),
    L_n = latent_scale_init * I, Z a random subset of the latent means,
    m_d = 0, S_d = chol(K_mm), unit kernel scales, sigma^2 = 0.01.

    X_std is expected standardized; masked entries must already be zeroed.
    """
    n, d = X_std.shape
    if not (0 < q < max(d, 2) + 1):
        raise ShapeMismatch(f"latent dim {q} invalid for data dim {d}")
    if not (0 < m <= n):
        raise ShapeMismatch(f"inducing count {m} invalid for {n} points")

    filled = np.where(mask > 0, X_std, 0.0)
    centered = filled - filled.mean(axis=0, keepdims=True)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    scores = centered @ vt[:min(q, d)].T
    a = np.zeros((n, q))
    a[:, :scores.shape[1]] = scores
    sd = a.std(axis=0)
    sd[sd < 1e-12] = 1.0
    a /= sd

    scale_raw = np.tile(np.log(latent_scale_init) * np.eye(q), (n, 1, 1))

    z_idx = rng.choice_without_replacement(n, m)
    z = a[z_idx].copy()

    theta = KernelHyperparams.default(q)
    kmm = kr.gram(z, theta)
    s_chol = linalg.cholesky(kmm).lower
    u_scale_raw = np.tile(raw_from_tri(s_chol), (d, 1, 1))

    phi = np.zeros(learnable_schedule_k) if learnable_schedule_k else None
    params = ModelParams(
        kernel=theta,
        noise=NoiseVariance.default(),
        latent=LatentVariational(mean=a, scale_raw=scale_raw),
        inducing=InducingVariational(Z=z, u_mean=np.zeros((m, d)),
                                     u_scale_raw=u_scale_raw),
        schedule_phi=phi,
    )
    # normalize scalar fields to owned 0-d arrays so to_arrays() views are
    # stable and optimizers update the model in place
    return ModelParams.from_arrays(
        {k: np.array(v, dtype=np.float64) for k, v in params.to_arrays().items()})


class ModelVars:
    """Parameter arrays lifted onto a tape (or kept raw when tape=None),
    plus lazily shared derived quantities for one estimator evaluation."""

    def __init__(self, params: ModelParams, tape: Optional[ad.Tape] = None):
        self.params = params
        self.tape = tape
        lift = tape.leaf if tape is not None else (lambda x: np.asarray(x, dtype=np.float64))
        self.log_ls = lift(params.kernel.log_lengthscales)
        self.log_sf2 = lift(np.asarray(params.kernel.log_signal_variance))
        self.log_s2 = lift(np.asarray(params.noise.log_sigma2))
        self.a = lift(params.latent.mean)
        self.L_raw = lift(params.latent.scale_raw)
        self.Z = lift(params.inducing.Z)
        self.U = lift(params.inducing.u_mean)
        self.S_raw = lift(params.inducing.u_scale_raw)
        self.phi = lift(params.schedule_phi) if params.schedule_phi is not None else None
        self._cache = {}

    @property
    def n(self):
        return self.params.n

    @property
    def q(self):
        return self.params.q

    @property
    def m(self):
        return self.params.m

    @property
    def d(self):
        return self.params.d

    def leaf_arrays(self) -> dict:
        out = {
            "kernel.log_lengthscales": self.log_ls,
            "kernel.log_signal_variance": self.log_sf2,
            "noise.log_sigma2": self.log_s2,
            "latent.mean": self.a,
            "latent.scale_raw": self.L_raw,
            "inducing.Z": self.Z,
            "inducing.u_mean": self.U,
            "inducing.u_scale_raw": self.S_raw,
        }
        if self.phi is not None:
            out["schedule.phi"] = self.phi
        return out

    def _memo(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    def with_u(self, u) -> "ModelVars":
        """Shallow view sharing every leaf but using `u` in place of the
        variational means wherever K_mm^-1 u_d enters (drift ablation)."""
        view = ModelVars.__new__(ModelVars)
        view.params = self.params
        view.tape = self.tape
        for name in ("log_ls", "log_sf2", "log_s2", "a", "L_raw", "Z",
                     "S_raw", "phi"):
            setattr(view, name, getattr(self, name))
        view.U = u
        _ = self.Lm  # share one K_mm factorization between the views
        view._cache = {k: v for k, v in self._cache.items()
                       if k not in ("W_u", "Kmm_inv_u")}
        return view

    # --- shared derived quantities -----------------------------------
    @property
    def sigma2(self):
        return self._memo("sigma2", lambda: ad.exp(self.log_s2))

    @property
    def L(self):
        """Effective per-point latent factors, (N, Q, Q)."""
        return self._memo("L", lambda: tri_from_raw(self.L_raw))

    @property
    def L_inv(self):
        return self._memo("L_inv", lambda: ad.inv(self.L))

    @property
    def S(self):
        """Effective per-dimension inducing factors, (D, m, m)."""
        return self._memo("S", lambda: tri_from_raw(self.S_raw))

    @property
    def inv_ls(self):
        return self._memo("inv_ls", lambda: ad.exp(ad.neg(self.log_ls)))

    @property
    def inv_ls2(self):
        return self._memo("inv_ls2", lambda: ad.exp(ad.scale(self.log_ls, -2.0)))

    @property
    def Z_scaled(self):
        return self._memo("Z_scaled", lambda: ad.mul(self.Z, self.inv_ls))

    @property
    def Z_sq(self):
        return self._memo("Z_sq", lambda: ad.sum_(ad.square(self.Z_scaled),
                                                  axis=1, keepdims=True))

    @property
    def Lm(self):
        """Cholesky factor of K_mm."""
        return self._memo("Lm", lambda: ad.cholesky(
            kr.cov(self.Z, self.Z, self.log_ls, self.log_sf2)))

    @property
    def W_u(self):
        """Lm^-1 @ u_mean, (m, D)."""
        return self._memo("W_u", lambda: ad.tri_solve(self.Lm, self.U, "lower"))

    @property
    def Kmm_inv_u(self):
        """K_mm^-1 @ u_mean, (m, D)."""
        return self._memo("Kmm_inv_u",
                          lambda: ad.tri_solve(self.Lm, self.W_u, "upper"))


# ---------------------------------------------------------------------
# latent-posterior and prior densities
# ---------------------------------------------------------------------

def sample_latent_init(latent: LatentVariational, n_index: int,
                       rng: Optional[RngStream], eps=None):
    """h_0 = a_n + L_n eps with eps ~ N(0, I_Q); returns (h0, eps).

    Pass eps to replay a stored draw instead of consuming the stream.
    """
    if not 0 <= n_index < latent.n:
        raise IndexOutOfRange(f"point index {n_index} outside 0..{latent.n - 1}")
    if eps is None:
        eps = rng.standard_normal(latent.q)
    eps = np.asarray(eps, dtype=np.float64)
    l_n = ad._val(latent.scale())[n_index]
    return latent.mean[n_index] + l_n @ eps, eps


def log_q0(latent: LatentVariational, n_index: int, h) -> float:
    """Log density of q(h_n) = N(a_n, L_n L_n^T) at h."""
    if not 0 <= n_index < latent.n:
        raise IndexOutOfRange(f"point index {n_index} outside 0..{latent.n - 1}")
    h = np.asarray(h, dtype=np.float64).ravel()
    if h.shape[0] != latent.q:
        raise ShapeMismatch(f"point has dim {h.shape[0]}, expected {latent.q}")
    l_n = ad._val(latent.scale())[n_index]
    return linalg.mvn_logpdf(h, latent.mean[n_index],
                             linalg.CholeskyFactor(l_n))


def log_prior_latent(h) -> float:
    """Standard-normal log density of a single latent point."""
    h = np.asarray(ad._val(h), dtype=np.float64).ravel()
    return float(-0.5 * h.shape[0] * LOG_2PI - 0.5 * h @ h)


class LatentRows:
    """Latent variational pieces restricted to a row subset (or all rows),
    shared by the flow and density/score evaluations."""

    def __init__(self, mv: ModelVars, rows=None):
        if rows is None:
            a, raw = mv.a, mv.L_raw
        else:
            rows = np.asarray(rows, dtype=np.intp)
            a = ad.take_rows(mv.a, rows)
            raw = ad.take_rows(mv.L_raw, rows)
        self.n_rows = ad._val(a).shape[0]
        self.q = ad._val(a).shape[1]
        self.a = a
        self.L = tri_from_raw(raw)
        self.L_inv = ad.inv(self.L)
        self.sum_log_diag = ad.batch_diag(raw)  # (n, Q); sum -> logdet/2

    def sample(self, eps):
        """a + L eps for pre-drawn standard noise, shape (n, Q)."""
        return ad.add(self.a, ad.reshape(
            ad.matmul(self.L, eps.reshape(self.n_rows, self.q, 1)),
            (self.n_rows, self.q)))

    def log_q0(self, H):
        """Row-wise log q_0(h) at H, shape (n,)."""
        r = ad.reshape(ad.sub(H, self.a), (self.n_rows, self.q, 1))
        quad = ad.sum_(ad.square(ad.matmul(self.L_inv, r)), axis=(1, 2))
        return ad.sub(ad.scale(ad.neg(quad), 0.5),
                      ad.add(ad.sum_(self.sum_log_diag, axis=1),
                             0.5 * self.q * LOG_2PI))

    def score_q0(self, H):
        """Row-wise gradient of log q_0 at H: -(L L^T)^-1 (H - a)."""
        r = ad.reshape(ad.sub(H, self.a), (self.n_rows, self.q, 1))
        y = ad.matmul(self.L_inv, r)
        w = ad.matmul(ad.transpose(self.L_inv), y)
        return ad.reshape(ad.neg(w), (self.n_rows, self.q))


def log_q0_rows(mv: ModelVars, H):
    """Row-wise log q_0(h_n) for the full latent state, shape (N,)."""
    return LatentRows(mv).log_q0(H)


def score_q0_rows(mv: ModelVars, H):
    """Row-wise gradient of log q_0 at H: -(L L^T)^-1 (H - a), shape (N, Q)."""
    return LatentRows(mv).score_q0(H)


def log_prior_rows(H):
    """Row-wise standard-normal log density, shape (N,)."""
    q = ad._val(H).shape[1]
    return ad.sub(ad.scale(ad.sum_(ad.square(H), axis=1), -0.5),
                  0.5 * q * LOG_2PI)


def latent_kl_rows(mv: ModelVars):
    """Closed-form KL(q(h_n) || N(0, I)) per point, shape (N,).

    Built from the raw triangles directly (exp only on the diagonals) so
    the full (N, Q, Q) factor never needs materializing.
    """
    q = mv.q
    strict = np.tril(np.ones((q, q)), -1)
    diag_raw = ad.batch_diag(mv.L_raw)                      # (N, Q)
    tr = ad.add(ad.sum_(ad.square(ad.mul(mv.L_raw, strict)), axis=(1, 2)),
                ad.sum_(ad.exp(ad.scale(diag_raw, 2.0)), axis=1))
    sq = ad.sum_(ad.square(mv.a), axis=1)
    ld = ad.scale(ad.sum_(diag_raw, axis=1), 2.0)
    return ad.scale(ad.sub(ad.add(tr, sq), ad.add(ld, float(q))), 0.5)


# ---------------------------------------------------------------------
# inducing-variable machinery
# ---------------------------------------------------------------------

def kl_inducing(mv: ModelVars):
    """Sum over dimensions of KL(q(u_d) || N(0, K_mm)); scalar."""
    m, d = mv.m, mv.d
    lm = mv.Lm
    ys = ad.solve(ad.reshape(lm, (1, m, m)), mv.S)     # (D, m, m) = Lm^-1 S_d
    tr_term = ad.sum_(ad.square(ys))
    quad_term = ad.sum_(ad.square(mv.W_u))
    ld_kmm = ad.scale(ad.sum_(ad.log(ad.diag_part(lm))), 2.0)
    ld_s = ad.scale(ad.sum_(sum_log_diag(mv.S_raw)), 2.0)
    inner = ad.add(tr_term, quad_term)
    logdets = ad.sub(ad.scale(ld_kmm, float(d)), ld_s)
    return ad.scale(ad.add(ad.sub(inner, float(m * d)), logdets), 0.5)


def f_moments(mv: ModelVars, H_batch):
    """Marginal mean/variance of f_d(h_n) under q(u_d), both (B, D).

    Variance is clamped at 1e-12; the number of clamped entries is
    returned for diagnostics.
    """
    h_scaled = ad.mul(H_batch, mv.inv_ls)
    k_bm = kr.cov_fast(h_scaled, mv.Z_scaled, mv.log_sf2, b_sq=mv.Z_sq)
    v = ad.tri_solve(mv.Lm, ad.transpose(k_bm), "lower")    # (m, B)
    mean = ad.matmul(ad.transpose(v), mv.W_u)               # (B, D)
    q_diag = ad.sum_(ad.square(v), axis=0)                  # (B,)
    a_mat = ad.tri_solve(mv.Lm, v, "upper")                 # (m, B)
    t = ad.matmul(ad.transpose(mv.S), a_mat)                # (D, m, B)
    s_term = ad.transpose(ad.sum_(ad.square(t), axis=1))    # (B, D)
    b = ad._val(H_batch).shape[0]
    prior_minus_q = ad.reshape(ad.sub(ad.exp(mv.log_sf2), q_diag), (b, 1))
    var_raw = ad.add(prior_minus_q, s_term)
    n_clamped = int(np.sum(ad._val(var_raw) < 1e-12))
    return mean, ad.clamp_min(var_raw, 1e-12), n_clamped


def sample_f_at(H_batch, inducing: InducingVariational,
                kernel: KernelHyperparams, d_index: int, rng: RngStream,
                noise: NoiseVariance = None, eps_f: np.ndarray = None):
    """Reparameterized draw of f_d at each row of H_batch; returns (f, eps)."""
    if not 0 <= d_index < inducing.d:
        raise IndexOutOfRange(f"dimension {d_index} outside 0..{inducing.d - 1}")
    params = ModelParams(kernel=kernel, noise=noise or NoiseVariance.default(),
                         latent=LatentVariational(
                             mean=np.zeros((1, kernel.q)),
                             scale_raw=np.zeros((1, kernel.q, kernel.q))),
                         inducing=inducing)
    mv = ModelVars(params)
    mean, var, _ = f_moments(mv, np.asarray(H_batch, dtype=np.float64))
    b = mean.shape[0]
    if eps_f is None:
        eps_f = rng.standard_normal(b)
    f = mean[:, d_index] + np.sqrt(var[:, d_index]) * eps_f
    return f, eps_f


def cond_loglik(x_nd: float, f_nd: float, noise: NoiseVariance) -> float:
    """Gaussian observation log density log N(x; f, sigma^2)."""
    s2 = noise.sigma2
    return float(-0.5 * np.log(2.0 * np.pi * s2) - (x_nd - f_nd) ** 2 / (2.0 * s2))


def obs_loglik_matrix(mv: ModelVars, X_batch, F):
    """Entry-wise log N(x | f, sigma^2) for matrices, shape (B, D)."""
    quad = ad.mul(ad.square(ad.sub(X_batch, F)),
                  ad.scale(ad.exp(ad.neg(mv.log_s2)), 0.5))
    return ad.sub(ad.scale(ad.neg(mv.log_s2), 0.5) - 0.5 * LOG_2PI, quad)


# ---------------------------------------------------------------------
# collapsed likelihood (drift data term) and its closed-form H-gradient
# ---------------------------------------------------------------------

def _mask_groups(mask_b: Optional[np.ndarray], b: int, d: int):
    """Group dimensions by identical observed-row patterns.

    Returns a list of (row_indices, dim_indices); dimensions with no
    observed rows are dropped. A full mask yields one group covering
    everything, flagged with row_indices=None for the fast path.
    """
    if mask_b is None or np.all(mask_b > 0):
        return [(None, None)]
    groups = {}
    for j in range(d):
        pattern = tuple(np.nonzero(mask_b[:, j] > 0)[0])
        if not pattern:
            continue
        groups.setdefault(pattern, []).append(j)
    return [(np.asarray(rows, dtype=np.intp), np.asarray(dims, dtype=np.intp))
            for rows, dims in groups.items()]


def _group_context(mv: ModelVars, H_b, X_b, mask_b, rows, dims):
    """Shared forward quantities for one mask group."""
    if rows is None:
        h_g, x_g = H_b, np.asarray(X_b, dtype=np.float64)
        w_g = mv.W_u
    else:
        h_g = ad.take_rows(H_b, rows)
        x_g = np.asarray(X_b, dtype=np.float64)[np.ix_(rows, dims)]
        w_g = ad.transpose(ad.take_rows(ad.transpose(mv.W_u), dims))
    h_scaled = ad.mul(h_g, mv.inv_ls)
    h_sq = ad.sum_(ad.square(h_scaled), axis=1, keepdims=True)
    k_bm = kr.cov_fast(h_scaled, mv.Z_scaled, mv.log_sf2, a_sq=h_sq,
                       b_sq=mv.Z_sq)
    v = ad.tri_solve(mv.Lm, ad.transpose(k_bm), "lower")      # (m, Bg)
    mu = ad.matmul(ad.transpose(v), w_g)                      # (Bg, Dg)
    k_bb = kr.cov_fast(h_scaled, h_scaled, mv.log_sf2, a_sq=h_sq, b_sq=h_sq)
    bg = ad._val(h_g).shape[0]
    c = ad.add(ad.sub(k_bb, ad.matmul(ad.transpose(v), v)),
               ad.mul(mv.sigma2, np.eye(bg)))
    lc = ad.cholesky(c)
    resid = ad.sub(x_g, mu)
    return {"h": h_g, "x": x_g, "k_bm": k_bm, "v": v, "w": w_g, "mu": mu,
            "k_bb": k_bb, "c": c, "lc": lc, "resid": resid, "bg": bg,
            "dg": x_g.shape[1]}


def _group_value(ctx):
    u = ad.tri_solve(ctx["lc"], ctx["resid"], "lower")
    quad = ad.sum_(ad.square(u))
    ld = ad.scale(ad.sum_(ad.log(ad.diag_part(ctx["lc"]))), 2.0)
    const = -0.5 * ctx["bg"] * ctx["dg"] * LOG_2PI
    return ad.add(ad.scale(ad.add(ad.scale(ld, float(ctx["dg"])), quad), -0.5),
                  const)


def _group_grad_h(mv: ModelVars, ctx):
    """Closed-form gradient of the group's collapsed log density wrt its
    latent rows, shape (Bg, Q). See dk_dh for the kernel input derivative."""
    lc, resid = ctx["lc"], ctx["resid"]
    dg, bg = ctx["dg"], ctx["bg"]
    alpha = ad.tri_solve(lc, ad.tri_solve(lc, resid, "lower"), "upper")
    c_inv = ad.tri_solve(lc, ad.tri_solve(lc, np.eye(bg), "lower"), "upper")
    p = ad.scale(ad.sub(ad.matmul(alpha, ad.transpose(alpha)),
                        ad.scale(c_inv, float(dg))), 0.5)
    a_mat = ad.tri_solve(mv.Lm, ctx["v"], "upper")            # (m, Bg)
    kmm_inv_w = ad.tri_solve(mv.Lm, ctx["w"], "upper")        # (m, Dg)
    w1 = ad.matmul(alpha, ad.transpose(kmm_inv_w))            # (Bg, m)
    w2 = ad.matmul(p, ad.transpose(a_mat))                    # (Bg, m)
    e_nm = ad.mul(ad.sub(w1, ad.scale(w2, 2.0)), ctx["k_bm"])
    e_nn = ad.mul(ad.scale(p, 2.0), ctx["k_bb"])
    rowsum = ad.add(ad.sum_(e_nm, axis=1, keepdims=True),
                    ad.sum_(e_nn, axis=1, keepdims=True))
    pull = ad.add(ad.matmul(e_nm, mv.Z), ad.matmul(e_nn, ctx["h"]))
    return ad.mul(ad.sub(pull, ad.mul(ctx["h"], rowsum)), mv.inv_ls2)


def collapsed_loglik(mv: ModelVars, X_batch, H_batch, mask_batch=None):
    """Sum over dimensions of log N(x_d; K_nm K_mm^-1 m_d, Q_nn + sigma^2 I),
    restricted per dimension to its observed rows. Scalar."""
    xb = np.asarray(ad._val(X_batch), dtype=np.float64)
    b, d = xb.shape
    total = None
    for rows, dims in _mask_groups(mask_batch, b, d):
        ctx = _group_context(mv, H_batch, xb, mask_batch, rows, dims)
        val = _group_value(ctx)
        total = val if total is None else ad.add(total, val)
    if total is None:
        if mv.tape is not None:
            return mv.tape.constant(0.0)
        return np.asarray(0.0)
    return total


def collapsed_grad_h(mv: ModelVars, X_batch, H_batch, mask_batch=None):
    """Closed-form gradient of collapsed_loglik wrt H_batch, shape (B, Q)."""
    xb = np.asarray(ad._val(X_batch), dtype=np.float64)
    b, d = xb.shape
    total = None
    for rows, dims in _mask_groups(mask_batch, b, d):
        ctx = _group_context(mv, H_batch, xb, mask_batch, rows, dims)
        g = _group_grad_h(mv, ctx)
        if rows is not None:
            g = ad.embed_rows(g, rows, b)
        total = g if total is None else ad.add(total, g)
    if total is None:
        zero = np.zeros((b, ad._val(H_batch).shape[1]))
        return mv.tape.constant(zero) if mv.tape is not None else zero
    return total


def collapsed_parts(mv: ModelVars, X_batch, H_batch, mask_batch=None):
    """(value, grad_h) with the per-group forward context shared."""
    xb = np.asarray(ad._val(X_batch), dtype=np.float64)
    b, d = xb.shape
    val_total, grad_total = None, None
    for rows, dims in _mask_groups(mask_batch, b, d):
        ctx = _group_context(mv, H_batch, xb, mask_batch, rows, dims)
        val = _group_value(ctx)
        g = _group_grad_h(mv, ctx)
        if rows is not None:
            g = ad.embed_rows(g, rows, b)
        val_total = val if val_total is None else ad.add(val_total, val)
        grad_total = g if grad_total is None else ad.add(grad_total, g)
    if val_total is None:
        q = ad._val(H_batch).shape[1]
        zero_v, zero_g = np.asarray(0.0), np.zeros((b, q))
        if mv.tape is not None:
            return mv.tape.constant(zero_v), mv.tape.constant(zero_g)
        return zero_v, zero_g
    return val_total, grad_total


# ---------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------

def reconstruct(h, inducing: InducingVariational, kernel: KernelHyperparams):
    """Predictive mean per dimension at latent point h: K_hm K_mm^-1 m_d."""
    h = np.asarray(h, dtype=np.float64).reshape(1, -1)
    return reconstruct_rows(h, inducing, kernel)[0]


def reconstruct_rows(H, inducing: InducingVariational,
                     kernel: KernelHyperparams) -> np.ndarray:
    """Predictive means for a batch of latent points, shape (n, D)."""
    H = np.asarray(H, dtype=np.float64)
    kmm = kr.gram(inducing.Z, kernel)
    factor = linalg.cholesky(kmm)
    k_hm = kr.cross(H, inducing.Z, kernel)
    return k_hm @ linalg.chol_solve(factor, inducing.u_mean)
