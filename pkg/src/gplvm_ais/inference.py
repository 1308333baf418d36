"""Annealing schedules, unadjusted-Langevin transitions, and the three
evidence lower bounds (mean-field, importance-weighted, annealed).

The AIS bound runs a K-step time-inhomogeneous unadjusted Langevin flow
over the whole latent state. The drift for bridging density k is

    beta_k * ((N/B) grad log p(X_J | H) + grad log p(H))
        + (1 - beta_k) * grad log q_0(H)

with the data term evaluated in collapsed form on minibatch J only. Each
step's backward-kernel noise is reconstructed in closed form, so the sum
of transition log-ratios R_k is an explicit tape expression and parameter
gradients flow through the whole chain with one backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .errors import InvalidK, NonFiniteDrift, ShapeMismatch
from .linalg import RngStream


# ---------------------------------------------------------------------
# annealing schedule
# ---------------------------------------------------------------------

@dataclass
class AnnealingSchedule:
    """Monotone temperatures beta_0 = 0 < ... < beta_K = 1."""

    k_steps: int
    mode: str = "linear"            # "linear" or "learned"
    phi: Optional[np.ndarray] = None  # unconstrained increments, mode="learned"

    @property
    def betas(self) -> np.ndarray:
        if self.mode == "linear":
            return np.arange(self.k_steps + 1) / self.k_steps
        return np.asarray(ad._val(schedule_betas(self.phi)))


def schedule_betas(phi):
    """Temperatures from unconstrained increments: cumulative softplus,
    normalized so beta_0 = 0 and beta_K = 1 exactly, strictly increasing."""
    c = ad.cumsum(ad.softplus(phi))
    k = ad._val(phi).shape[0]
    total = ad.slice_rows(c, k - 1, k)
    return ad.concat_rows([np.zeros(1), ad.div(c, total)])


def make_schedule(k: int, mode: str = "linear",
                  phi: Optional[np.ndarray] = None) -> AnnealingSchedule:
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise InvalidK(f"need K >= 1, got {k!r}")
    if mode == "linear":
        return AnnealingSchedule(k_steps=int(k), mode="linear")
    if mode in ("learned", "learnable"):
        phi = np.zeros(k) if phi is None else np.asarray(phi, dtype=np.float64)
        if phi.shape != (k,):
            raise InvalidK(f"phi must have shape ({k},), got {phi.shape}")
        return AnnealingSchedule(k_steps=int(k), mode="learned", phi=phi)
    raise ValueError(f"unknown anneal mode {mode!r}")


# ---------------------------------------------------------------------
# step sizes
# ---------------------------------------------------------------------

@dataclass
class StepSizeState:
    """Step-size recursion eta_k = 0.9 eta_{k-1} + 0.1 eta_0 / sqrt(G_k + eps).

    G accumulates squared drift norms over the chain steps of one
    estimator call. The recursion blows up as G -> 0, so emitted values
    are clamped to [eta_min, eta_max] when adaptive; a fixed step is
    returned verbatim (eta_0 = 0 must stay exactly zero).

    eta_prev left unset starts the recursion at its own fixed point
    eta_0 / sqrt(G_1 + eps): the first step then already responds to the
    drift magnitude, which is what keeps early iterations stable when the
    initial likelihood gradients are orders of magnitude too large for a
    blind eta_0-sized step.
    """

    eta0: float
    adaptive: bool = False
    eps: float = 1e-8
    eta_min: float = 0.0
    eta_max: float = 0.5
    eta_prev: Optional[float] = field(default=None)
    grad_sq_accum: float = 0.0
    # optional per-step guard: a step's transition-ratio penalty is about
    # eta * ||drift||^2, so capping eta at r_budget_per_row * rows /
    # ||drift||^2 bounds how many nats one step can cost. The recursion's
    # momentum reacts one step late when the drift stiffens along the
    # chain; without this guard a single overshoot makes every later
    # score stiffer still and the flow diverges.
    r_budget_per_row: Optional[float] = None


def next_step_size(state: StepSizeState, grad_sq_norm: float) -> float:
    if grad_sq_norm < 0:
        raise ValueError(f"squared gradient norm must be >= 0, got {grad_sq_norm}")
    if not state.adaptive:
        return state.eta0
    state.grad_sq_accum += float(grad_sq_norm)
    target = state.eta0 / np.sqrt(state.grad_sq_accum + state.eps)
    if state.eta_prev is None:
        eta = target
    else:
        eta = 0.9 * state.eta_prev + 0.1 * target
    eta = float(min(max(eta, state.eta_min), state.eta_max))
    state.eta_prev = eta
    return eta


# ---------------------------------------------------------------------
# ULA transition machinery
# ---------------------------------------------------------------------

def ula_step(h_prev, drift, eta: float, eps):
    """Euler-Maruyama update H_k = H_{k-1} + eta * drift + sqrt(2 eta) * eps."""
    if not np.all(np.isfinite(ad._val(drift))):
        raise NonFiniteDrift("Langevin drift contains non-finite entries")
    return ad.add(ad.add(h_prev, ad.scale(drift, eta)),
                  ad.scale(eps, float(np.sqrt(2.0 * eta))))


def backward_noise(drift_prev, drift_next, eta: float, eps):
    """Noise of the reverse transition:
    eps_tilde = -sqrt(eta/2) (drift(H_{k-1}) + drift(H_k)) - eps,
    which makes H_{k-1} = H_k + eta * drift(H_k) + sqrt(2 eta) eps_tilde
    hold exactly."""
    return ad.neg(ad.add(ad.scale(ad.add(drift_prev, drift_next),
                                  float(np.sqrt(eta / 2.0))), eps))


def log_transition_ratio(eps, eps_tilde):
    """log T_k / T~_k = (||eps_tilde||^2 - ||eps||^2) / 2."""
    if ad._val(eps).shape != ad._val(eps_tilde).shape:
        raise ShapeMismatch(
            f"noise shapes differ: {ad._val(eps).shape} vs {ad._val(eps_tilde).shape}")
    return ad.scale(ad.sub(ad.sum_(ad.square(eps_tilde)),
                           ad.sum_(ad.square(eps))), 0.5)


def _combine_drift(g_target, g_q0, beta):
    """beta * target score + (1 - beta) * base score."""
    if isinstance(beta, ad.Var):
        return ad.add(ad.mul(g_target, beta), ad.mul(g_q0, ad.sub(1.0, beta)))
    beta = float(beta)
    return ad.add(ad.scale(g_target, beta), ad.scale(g_q0, 1.0 - beta))


def _drift_ingredients(drift_mv, latent_rows, H, x_j, pos_j, mask_j,
                       batch_scale):
    """(target score, base score) at the flowed latent state H.

    The data term lives only on the rows of minibatch J (positions pos_j
    within the flowed state) and is scaled by N/B; the prior and q_0
    scores cover every flowed row.
    """
    h_j = ad.take_rows(H, pos_j)
    g_lik_b = mdl.collapsed_grad_h(drift_mv, x_j, h_j, mask_j)
    g_lik = ad.embed_rows(ad.scale(g_lik_b, batch_scale), pos_j,
                          latent_rows.n_rows)
    g_target = ad.sub(g_lik, H)            # + prior score (-H)
    g_q0 = latent_rows.score_q0(H)
    return g_target, g_q0


def annealed_grad(mv: mdl.ModelVars, H, beta_k, X, idx_j, batch_scale,
                  mask_j=None):
    """Drift of bridging density k at a full latent state H (wrapper for
    tests and single-step callers; the flow shares these ingredients)."""
    X = np.asarray(ad._val(X), dtype=np.float64)
    idx_j = np.asarray(idx_j, dtype=np.intp)
    rows = mdl.LatentRows(mv)
    g_target, g_q0 = _drift_ingredients(mv, rows, H, X[idx_j], idx_j, mask_j,
                                        batch_scale)
    return _combine_drift(g_target, g_q0, beta_k)


# ---------------------------------------------------------------------
# AIS bound
# ---------------------------------------------------------------------

@dataclass
class AisTrace:
    """Per-call record of the annealed flow."""

    h_states: list          # K+1 arrays, (N, Q)
    eps_init: np.ndarray    # latent reparameterization noise
    eps_seq: list           # forward step noises
    eps_tilde_seq: list     # backward-kernel noises (values)
    r_seq: list             # transition log-ratios (floats)
    etas: list              # step sizes actually used
    eps_f: np.ndarray       # terminal function noise
    terms: dict             # ELBO decomposition and diagnostics


def ais_elbo(mv: mdl.ModelVars, X, idx_j, idx_i, schedule: AnnealingSchedule,
             steps: StepSizeState, rng: Optional[RngStream], *, mask=None,
             noise=None, detach_flow: bool = False, sample_u: bool = False):
    """Single-sample reparameterized AIS bound; returns (elbo, AisTrace).

    The flow state covers the rows of J union I: the drift's data term
    lives on the J rows (scaled N/B), and every flowed row feels the prior
    and q_0 scores. The q_0/prior/R sums over the flowed rows are scaled
    by N/|J u I| so they estimate the full-state terms; with a full batch
    the state is the whole latent matrix and the scale is exactly one.

    Noise draw order when drawing from rng: latent eps, optional inducing
    sample, step noises 1..K, terminal function noise. A `noise` dict with
    keys eps0/eps_steps/eps_f (and xi_u) overrides drawing.
    """
    X = np.asarray(ad._val(X), dtype=np.float64)
    n, q, d = mv.n, mv.q, mv.d
    idx_j = np.asarray(idx_j, dtype=np.intp)
    idx_i = np.asarray(idx_i, dtype=np.intp)
    b = idx_j.shape[0]
    if idx_i.shape[0] != b:
        raise ShapeMismatch("minibatches J and I must have equal size")
    batch_scale = n / b
    k_steps = schedule.k_steps
    noise = noise or {}

    rows_u = np.union1d(idx_j, idx_i).astype(np.intp)
    n_u = rows_u.shape[0]
    pos_j = np.searchsorted(rows_u, np.sort(idx_j))
    pos_i = np.searchsorted(rows_u, idx_i)
    x_j = X[np.sort(idx_j)]
    latent = mdl.LatentRows(mv, None if n_u == n else rows_u)

    eps0 = noise.get("eps0")
    if eps0 is None:
        eps0 = rng.normal_matrix(n_u, q)
    h0 = latent.sample(eps0)

    drift_mv = mv
    if sample_u:
        xi = noise.get("xi_u")
        if xi is None:
            xi = rng.normal_matrix(d, mv.m)
        u_sample = ad.add(mv.U, ad.transpose(ad.reshape(
            ad.matmul(mv.S, xi.reshape(d, mv.m, 1)), (d, mv.m))))
        drift_mv = mv.with_u(u_sample)

    if schedule.mode == "learned" and isinstance(mv.phi, ad.Var):
        betas = schedule_betas(mv.phi)
    else:
        betas = schedule.betas

    mask_j = None if mask is None else np.asarray(mask)[np.sort(idx_j)]
    mask_i = None if mask is None else np.asarray(mask)[idx_i]

    log_q0_0 = ad.sum_(latent.log_q0(h0))

    trace = AisTrace(h_states=[ad._val(h0)], eps_init=eps0, eps_seq=[],
                     eps_tilde_seq=[], r_seq=[], etas=[], eps_f=None, terms={})

    g_target, g_q0 = _drift_ingredients(drift_mv, latent, h0, x_j, pos_j,
                                        mask_j, batch_scale)
    sum_r = None
    h_prev = h0
    eps_steps = noise.get("eps_steps")
    for k in range(1, k_steps + 1):
        eps_k = eps_steps[k - 1] if eps_steps is not None \
            else rng.normal_matrix(n_u, q)
        beta_k = ad.slice_rows(betas, k, k + 1) if isinstance(betas, ad.Var) \
            else float(betas[k])
        drift_prev = _combine_drift(g_target, g_q0, beta_k)
        if detach_flow:
            drift_prev = ad.detach(drift_prev)
        drift_val = ad._val(drift_prev)
        gsq = float(np.sum(drift_val ** 2))
        eta_k = next_step_size(steps, gsq)
        if steps.r_budget_per_row is not None and eta_k > 0.0:
            cap = steps.r_budget_per_row * n_u / (gsq + 1e-12)
            eta_k = float(min(eta_k, cap))
        h_k = ula_step(h_prev, drift_prev, eta_k, eps_k)
        g_target, g_q0 = _drift_ingredients(drift_mv, latent, h_k, x_j, pos_j,
                                            mask_j, batch_scale)
        drift_next = _combine_drift(g_target, g_q0, beta_k)
        if detach_flow:
            drift_next = ad.detach(drift_next)
        eps_tilde = backward_noise(drift_prev, drift_next, eta_k, eps_k)
        r_k = log_transition_ratio(eps_k, eps_tilde)
        sum_r = r_k if sum_r is None else ad.add(sum_r, r_k)
        trace.h_states.append(ad._val(h_k))
        trace.eps_seq.append(eps_k)
        trace.eps_tilde_seq.append(ad._val(eps_tilde))
        trace.r_seq.append(float(ad._val(r_k)))
        trace.etas.append(eta_k)
        h_prev = h_k

    log_prior = ad.sum_(mdl.log_prior_rows(h_prev))

    h_i = ad.take_rows(h_prev, pos_i)
    f_mean, f_var, n_clamped = mdl.f_moments(mv, h_i)
    eps_f = noise.get("eps_f")
    if eps_f is None:
        eps_f = rng.standard_normal(b * d).reshape(d, b).T
    f = ad.add(f_mean, ad.mul(ad.sqrt(f_var), eps_f))
    ll_mat = mdl.obs_loglik_matrix(mv, X[idx_i], f)
    if mask_i is not None:
        ll_mat = ad.mul(ll_mat, mask_i)
    ll = ad.scale(ad.sum_(ll_mat), batch_scale)

    kl_u = mdl.kl_inducing(mv)
    flow_scale = n / n_u
    flow_terms = ad.sub(log_prior, log_q0_0)
    if sum_r is not None:
        flow_terms = ad.sub(flow_terms, sum_r)
    if flow_scale != 1.0:
        flow_terms = ad.scale(flow_terms, flow_scale)
    elbo = ad.sub(ad.add(ll, flow_terms), kl_u)

    trace.eps_f = eps_f
    trace.terms = {
        "loglik": float(ad._val(ll)),
        "prior_minus_q0": flow_scale * float(ad._val(log_prior)
                                             - ad._val(log_q0_0)),
        "neg_sum_r": (-flow_scale * float(ad._val(sum_r))
                      if sum_r is not None else 0.0),
        "neg_kl_u": -float(ad._val(kl_u)),
        "var_clamps": n_clamped,
    }
    return elbo, trace


# ---------------------------------------------------------------------
# mean-field and importance-weighted bounds
# ---------------------------------------------------------------------

def mf_elbo(mv: mdl.ModelVars, X, idx, rng: Optional[RngStream],
            mc_samples: int = 1, *, mask=None, noise=None,
            sampled_latent_kl: bool = False):
    """Doubly-stochastic mean-field bound.

    Likelihood expectation over minibatch `idx` scaled by N/B; latent KL
    in closed form over every point (or a single-sample batch estimate
    scaled by N/B when sampled_latent_kl, which is what the
    degenerate-flow identity compares against). Draw order per sample:
    latent eps (batch rows), function eps.
    """
    X = np.asarray(ad._val(X), dtype=np.float64)
    n, q, d = mv.n, mv.q, mv.d
    idx = np.asarray(idx, dtype=np.intp)
    b = idx.shape[0]
    batch_scale = n / b
    noise = noise or {}
    if noise and mc_samples != 1:
        raise ValueError("noise injection supports mc_samples=1 only")
    mask_b = None if mask is None else np.asarray(mask)[idx]
    latent = mdl.LatentRows(mv, None if b == n and np.array_equal(
        idx, np.arange(n)) else idx)

    ll_terms, latent_terms = [], []
    for _ in range(mc_samples):
        eps0 = noise.get("eps0")
        if eps0 is None:
            eps0 = rng.normal_matrix(b, q)
        h_b = latent.sample(eps0)
        f_mean, f_var, _ = mdl.f_moments(mv, h_b)
        eps_f = noise.get("eps_f")
        if eps_f is None:
            eps_f = rng.standard_normal(b * d).reshape(d, b).T
        f = ad.add(f_mean, ad.mul(ad.sqrt(f_var), eps_f))
        ll_mat = mdl.obs_loglik_matrix(mv, X[idx], f)
        if mask_b is not None:
            ll_mat = ad.mul(ll_mat, mask_b)
        ll_terms.append(ad.scale(ad.sum_(ll_mat), batch_scale))
        if sampled_latent_kl:
            latent_terms.append(ad.sum_(ad.sub(mdl.log_prior_rows(h_b),
                                               latent.log_q0(h_b))))

    ll = ll_terms[0]
    for t in ll_terms[1:]:
        ll = ad.add(ll, t)
    ll = ad.scale(ll, 1.0 / mc_samples)

    if sampled_latent_kl:
        lat = latent_terms[0]
        for t in latent_terms[1:]:
            lat = ad.add(lat, t)
        lat = ad.scale(lat, batch_scale / mc_samples)
    else:
        lat = ad.neg(ad.sum_(mdl.latent_kl_rows(mv)))

    return ad.sub(ad.add(ll, lat), mdl.kl_inducing(mv))


def iw_elbo(mv: mdl.ModelVars, X, idx, k_samples: int,
            rng: Optional[RngStream], *, mask=None, noise=None):
    """Importance-weighted bound with per-point log-mean-exp over K joint
    latent/function samples; weights carry the whole observed row, so
    K = 1 reduces exactly to the single-sample mean-field estimate.

    Draw order per sample k: latent eps (batch rows), function eps.
    """
    if k_samples < 1:
        raise InvalidK(f"need K >= 1, got {k_samples}")
    X = np.asarray(ad._val(X), dtype=np.float64)
    n, q, d = mv.n, mv.q, mv.d
    idx = np.asarray(idx, dtype=np.intp)
    b = idx.shape[0]
    batch_scale = n / b
    noise = noise or {}
    mask_b = None if mask is None else np.asarray(mask)[idx]
    latent = mdl.LatentRows(mv, None if b == n and np.array_equal(
        idx, np.arange(n)) else idx)

    rows = []
    eps_list = noise.get("eps_list")
    eps_f_list = noise.get("eps_f_list")
    for s in range(k_samples):
        eps = eps_list[s] if eps_list is not None else rng.normal_matrix(b, q)
        h = latent.sample(eps)
        log_q = latent.log_q0(h)
        log_p = mdl.log_prior_rows(h)
        f_mean, f_var, _ = mdl.f_moments(mv, h)
        eps_f = eps_f_list[s] if eps_f_list is not None \
            else rng.standard_normal(b * d).reshape(d, b).T
        f = ad.add(f_mean, ad.mul(ad.sqrt(f_var), eps_f))
        ll_mat = mdl.obs_loglik_matrix(mv, X[idx], f)
        if mask_b is not None:
            ll_mat = ad.mul(ll_mat, mask_b)
        w = ad.add(ad.sum_(ll_mat, axis=1), ad.sub(log_p, log_q))
        rows.append(ad.reshape(w, (1, b)))

    stack = rows[0] if k_samples == 1 else ad.concat_rows(rows)
    shift = np.max(ad._val(stack), axis=0, keepdims=True)
    lse = ad.add(ad.log(ad.sum_(ad.exp(ad.sub(stack, shift)), axis=0)),
                 shift.reshape(b))
    per_point = ad.sub(lse, float(np.log(k_samples)))
    return ad.sub(ad.scale(ad.sum_(per_point), batch_scale),
                  mdl.kl_inducing(mv))


# ---------------------------------------------------------------------
# analytic Gaussian toy (evidence checks)
# ---------------------------------------------------------------------

def toy_log_weights(dim: int, k_steps: int, eta: float, n_chains: int,
                    rng: RngStream, q0_var: float = 4.0) -> np.ndarray:
    """AIS log-weights for the unnormalized target exp(-||h||^2 / 2) with
    base N(0, q0_var I) and a linear schedule; one weight per chain.

    E[exp(w)] equals the true normalizer (2 pi)^(dim/2) for every K and
    eta, which is what the evidence-unbiasedness checks assert.
    """
    if dim < 1:
        raise InvalidK(f"need dim >= 1, got {dim}")
    if k_steps < 1:
        raise InvalidK(f"need K >= 1, got {k_steps}")
    betas = np.arange(k_steps + 1) / k_steps
    h = np.sqrt(q0_var) * rng.normal_matrix(n_chains, dim)
    log_q0 = (-0.5 * dim * np.log(2.0 * np.pi * q0_var)
              - 0.5 * np.sum(h * h, axis=1) / q0_var)
    w = -log_q0
    root = np.sqrt(eta / 2.0)
    for k in range(1, k_steps + 1):
        beta = betas[k]
        coef = beta + (1.0 - beta) / q0_var   # drift(x) = -coef * x
        eps = rng.normal_matrix(n_chains, dim)
        d_prev = -coef * h
        h_next = h + eta * d_prev + np.sqrt(2.0 * eta) * eps
        d_next = -coef * h_next
        eps_tilde = -root * (d_prev + d_next) - eps
        w -= 0.5 * (np.sum(eps_tilde ** 2, axis=1) - np.sum(eps ** 2, axis=1))
        h = h_next
    w += -0.5 * np.sum(h * h, axis=1)
    return w


def toy_true_log_normalizer(dim: int) -> float:
    return 0.5 * dim * np.log(2.0 * np.pi)
