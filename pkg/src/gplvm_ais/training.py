"""Stochastic training loop over the three estimators.

One tape per iteration: pre-draw every random quantity (so a skipped
iteration consumes exactly the same stream), build the chosen bound,
one backward pass, one optimizer step. Iterations that hit a failed
factorization or a non-finite drift are skipped and logged; more than
max_skip_fraction of the planned iterations aborts with diagnostics.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np
from scipy.spatial.distance import pdist

from . import autodiff as ad
from . import inference as inf
from . import model as mdl
from .data import Dataset
from .errors import GplvmError, NonFiniteDrift, NotPositiveDefinite
from .linalg import RngStream

METHODS = ("mf", "iw", "ais")


class TrainingAborted(GplvmError):
    """Raised when too many iterations were skipped; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class TrainConfig:
    method: str = "ais"
    latent_dim: int = 2
    inducing: int = 16
    k: int = 5
    iters: int = 1000
    batch: int = 64
    lr: float = 0.02
    seed: int = 0
    anneal: str = "linear"          # linear | learned
    step_size: Optional[float] = None  # eta_0; None = auto rule
    adaptive_step: bool = True
    eta_min: float = 0.0
    eta_max: float = 0.5
    r_budget_per_row: float = 0.25  # max nats one Langevin step may cost per row
    detach_flow: bool = False
    sample_u: bool = False
    standardize: bool = True
    optimizer: str = "adam"         # adam | adagrad
    mc_samples: int = 1
    eval_every: int = 0             # 0 disables periodic evaluation
    eval_samples: int = 1
    max_skip_fraction: float = 0.05

    def validate(self, n_points: Optional[int] = None):
        if self.method not in METHODS:
            raise ValueError(f"--method must be one of {METHODS}, got {self.method!r}")
        if self.latent_dim < 1:
            raise ValueError(f"--latent-dim must be >= 1, got {self.latent_dim}")
        if self.inducing < 1:
            raise ValueError(f"--inducing must be >= 1, got {self.inducing}")
        if self.method in ("iw", "ais") and self.k < 1:
            raise ValueError(f"--k must be >= 1 for {self.method}, got {self.k}")
        if self.iters < 1:
            raise ValueError(f"--iters must be >= 1, got {self.iters}")
        if self.batch < 1:
            raise ValueError(f"--batch must be >= 1, got {self.batch}")
        if n_points is not None and self.batch > n_points:
            raise ValueError(
                f"--batch {self.batch} exceeds dataset size {n_points}")
        if n_points is not None and self.inducing > n_points:
            raise ValueError(
                f"--inducing {self.inducing} exceeds dataset size {n_points}")
        if self.lr <= 0:
            raise ValueError(f"--lr must be > 0, got {self.lr}")
        if self.anneal not in ("linear", "learned"):
            raise ValueError(f"--anneal must be linear|learned, got {self.anneal!r}")
        if self.optimizer not in ("adam", "adagrad"):
            raise ValueError(
                f"--optimizer must be adam|adagrad, got {self.optimizer!r}")
        if self.step_size is not None and self.step_size < 0:
            raise ValueError(f"--step-size must be >= 0, got {self.step_size}")
        if self.mc_samples < 1:
            raise ValueError(f"--mc-samples must be >= 1, got {self.mc_samples}")


class Adam:
    def __init__(self, arrays: dict, lr: float, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}

    def step(self, arrays: dict, grads: dict):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in arrays.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)

    def state_arrays(self) -> dict:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return out

    def state_meta(self) -> dict:
        return {"kind": "adam", "t": self.t}

    def load_state(self, arrays: dict, meta: dict):
        self.t = int(meta["t"])
        for k in self.m:
            self.m[k] = np.asarray(arrays[f"opt.m.{k}"])
            self.v[k] = np.asarray(arrays[f"opt.v.{k}"])


class Adagrad:
    def __init__(self, arrays: dict, lr: float, eps=1e-8):
        self.lr, self.eps = lr, eps
        self.g2 = {k: np.zeros_like(v) for k, v in arrays.items()}

    def step(self, arrays: dict, grads: dict):
        for k, p in arrays.items():
            g = grads[k]
            self.g2[k] += g * g
            p -= self.lr * g / (np.sqrt(self.g2[k]) + self.eps)

    def state_arrays(self) -> dict:
        return {f"opt.g2.{k}": v for k, v in self.g2.items()}

    def state_meta(self) -> dict:
        return {"kind": "adagrad"}

    def load_state(self, arrays: dict, meta: dict):
        for k in self.g2:
            self.g2[k] = np.asarray(arrays[f"opt.g2.{k}"])


def make_optimizer(name: str, arrays: dict, lr: float):
    return Adam(arrays, lr) if name == "adam" else Adagrad(arrays, lr)


def auto_step_size(latent_mean: np.ndarray) -> float:
    """Default eta_0: 1e-3 times the squared median pairwise distance of
    the initialized latent means (dimension-aware scale)."""
    n = latent_mean.shape[0]
    pts = latent_mean if n <= 1024 else latent_mean[:1024]
    if pts.shape[0] < 2:
        return 1e-3
    med = float(np.median(pdist(pts)))
    return 1e-3 * med * med if med > 0 else 1e-3


@dataclass
class TrainResult:
    params: mdl.ModelParams
    metrics: list
    skipped: int
    clamp_events: int
    rng_state: dict
    opt_arrays: dict
    opt_meta: dict
    iteration: int
    resolved: dict = field(default_factory=dict)


def _predraw(method: str, cfg: TrainConfig, rng: RngStream, n, q, d, m, b):
    """All random quantities for one iteration, in the documented order:
    minibatch indices first, then latent noise, step noises, function
    noise. Pre-drawing keeps the stream identical when an iteration is
    skipped mid-build."""
    idx_j = rng.choice_without_replacement(n, b)
    noise = {}
    if method == "mf":
        # mc_samples > 1 draws per-sample pairs in order
        noise["mf"] = [(rng.normal_matrix(b, q),
                        rng.standard_normal(b * d).reshape(d, b).T)
                       for _ in range(cfg.mc_samples)]
        return idx_j, idx_j, noise
    if method == "iw":
        noise["eps_list"] = []
        noise["eps_f_list"] = []
        for _ in range(cfg.k):
            noise["eps_list"].append(rng.normal_matrix(b, q))
            noise["eps_f_list"].append(rng.standard_normal(b * d).reshape(d, b).T)
        return idx_j, idx_j, noise
    idx_i = rng.choice_without_replacement(n, b)
    n_u = np.union1d(idx_j, idx_i).shape[0]
    noise["eps0"] = rng.normal_matrix(n_u, q)
    if cfg.sample_u:
        noise["xi_u"] = rng.normal_matrix(d, m)
    noise["eps_steps"] = [rng.normal_matrix(n_u, q) for _ in range(cfg.k)]
    noise["eps_f"] = rng.standard_normal(b * d).reshape(d, b).T
    return idx_j, idx_i, noise


def evaluate(params: mdl.ModelParams, X_model: np.ndarray, mask: np.ndarray,
             seed: int, samples: int = 1):
    """(mse, nell) in model (possibly standardized) units.

    mse: per-entry squared error of the predictive mean at the latent
    means, over observed entries. nell: minus the per-point observation
    log likelihood under sampled latents and function values, averaged
    over `samples` draws.
    """
    n, d = X_model.shape
    obs = mask > 0
    recon = mdl.reconstruct_rows(params.latent.mean, params.inducing,
                                 params.kernel)
    mse = float(np.mean((recon[obs] - X_model[obs]) ** 2))

    rng = RngStream(seed)
    mv = mdl.ModelVars(params)
    nells = []
    for _ in range(samples):
        eps0 = rng.normal_matrix(n, params.q)
        h = ad._val(mv.a) + np.einsum("nij,nj->ni", ad._val(mv.L), eps0)
        f_mean, f_var, _ = mdl.f_moments(mv, h)
        eps_f = rng.standard_normal(n * d).reshape(d, n).T
        f = f_mean + np.sqrt(f_var) * eps_f
        ll = mdl.obs_loglik_matrix(mv, X_model, f)
        nells.append(-float(np.sum(ll * mask)) / n)
    return mse, float(np.mean(nells))


def train(dataset: Dataset, config: TrainConfig,
          on_metric: Optional[Callable[[dict], None]] = None,
          resume: Optional[dict] = None) -> TrainResult:
    """Run Algorithm-style training and return final parameters plus the
    per-iteration metric stream."""
    config.validate(dataset.n)
    X_model = dataset.X_model(config.standardize)
    mask = dataset.mask
    n, d = X_model.shape
    q, m, b = config.latent_dim, config.inducing, config.batch

    if resume is None:
        rng = RngStream(config.seed)
        params = mdl.initialize_params(
            np.where(mask > 0, X_model, 0.0), mask, q, m, rng,
            learnable_schedule_k=(config.k if (config.anneal == "learned"
                                               and config.method == "ais") else None))
        start_iter = 0
        opt = make_optimizer(config.optimizer, params.to_arrays(), config.lr)
    else:
        params = mdl.ModelParams.from_arrays(
            {k: np.array(v) for k, v in resume["arrays"].items()
             if not k.startswith("opt.")})
        rng = RngStream.from_state(resume["meta"]["rng_state"])
        start_iter = int(resume["meta"]["iteration"])
        opt = make_optimizer(config.optimizer, params.to_arrays(), config.lr)
        opt.load_state({k: np.array(v) for k, v in resume["arrays"].items()
                        if k.startswith("opt.")}, resume["meta"]["opt"])

    if config.step_size is not None:
        eta0 = config.step_size
    elif resume is not None and "eta0" in resume["meta"].get("resolved", {}):
        # keep the value resolved at initialization so a resumed run
        # reproduces the uninterrupted one
        eta0 = resume["meta"]["resolved"]["eta0"]
    else:
        eta0 = auto_step_size(params.latent.mean)
    schedule = inf.make_schedule(config.k, "linear") if config.anneal == "linear" \
        else inf.make_schedule(config.k, "learned", params.schedule_phi)
    resolved = {"eta0": eta0, "n": n, "d": d}

    arrays = params.to_arrays()
    metrics = []
    skipped = 0
    clamp_events = 0
    allowed_skips = config.max_skip_fraction * config.iters

    for it in range(start_iter + 1, config.iters + 1):
        t0 = time.perf_counter()
        idx_j, idx_i, noise = _predraw(config.method, config, rng, n, q, d, m, b)
        record = {"iter": it, "neg_elbo": None, "mse": None, "nell": None,
                  "wall_ms": None, "skipped_flag": 0}
        try:
            tape = ad.Tape()
            mv = mdl.ModelVars(params, tape)
            if config.method == "mf":
                eps0, eps_f = noise["mf"][0]
                if config.mc_samples == 1:
                    elbo = inf.mf_elbo(mv, X_model, idx_j, None, 1, mask=mask,
                                       noise={"eps0": eps0, "eps_f": eps_f})
                else:
                    elbo = _mf_multi(mv, X_model, idx_j, mask, noise["mf"])
            elif config.method == "iw":
                elbo = inf.iw_elbo(mv, X_model, idx_j, config.k, None,
                                   mask=mask, noise=noise)
            else:
                steps = inf.StepSizeState(eta0=eta0, adaptive=config.adaptive_step,
                                          eta_min=config.eta_min,
                                          eta_max=config.eta_max,
                                          r_budget_per_row=config.r_budget_per_row)
                elbo, trace = inf.ais_elbo(
                    mv, X_model, idx_j, idx_i, schedule, steps, None,
                    mask=mask, noise=noise, detach_flow=config.detach_flow,
                    sample_u=config.sample_u)
                clamp_events += trace.terms["var_clamps"]
            loss = ad.neg(elbo)
            grads = ad.backward(loss)
            leaf = mv.leaf_arrays()
            gmap = {name: grads[var.index] for name, var in leaf.items()}
            if any(not np.all(np.isfinite(g)) for g in gmap.values()):
                raise NonFiniteDrift("non-finite gradient")
            opt.step(arrays, gmap)
            record["neg_elbo"] = float(ad._val(loss)) / n
        except (NotPositiveDefinite, NonFiniteDrift) as exc:
            skipped += 1
            record["skipped_flag"] = 1
            record["skip_reason"] = type(exc).__name__
            if skipped > allowed_skips:
                raise TrainingAborted(
                    f"{skipped} skipped iterations out of {it} exceeds "
                    f"{config.max_skip_fraction:.0%} of {config.iters}",
                    diagnostics={"skipped": skipped, "iteration": it,
                                 "last_error": str(exc),
                                 "clamp_events": clamp_events}) from exc

        if config.eval_every and (it % config.eval_every == 0
                                  or it == config.iters):
            record["mse"], record["nell"] = evaluate(
                params, X_model, mask, seed=config.seed + 7_000_003 + it,
                samples=config.eval_samples)
        record["wall_ms"] = 1000.0 * (time.perf_counter() - t0)
        metrics.append(record)
        if on_metric is not None:
            on_metric(record)

    return TrainResult(params=params, metrics=metrics, skipped=skipped,
                       clamp_events=clamp_events, rng_state=rng.state(),
                       opt_arrays=opt.state_arrays(), opt_meta=opt.state_meta(),
                       iteration=config.iters, resolved=resolved)


def _mf_multi(mv, X_model, idx, mask, pairs):
    """Mean-field bound averaged over pre-drawn (eps0, eps_f) pairs."""
    total = None
    for eps0, eps_f in pairs:
        e = inf.mf_elbo(mv, X_model, idx, None, 1, mask=mask,
                        noise={"eps0": eps0, "eps_f": eps_f})
        total = e if total is None else ad.add(total, e)
    return ad.scale(total, 1.0 / len(pairs))


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
