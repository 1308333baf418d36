"""Acceptance suite: one test per release gate, each printing a PASS line
with its measured quantities (run with -rA or -s to see them).

The two training-heavy gates (bound ordering, missing-data recovery) fan
seeds out over a small process pool; everything is seeded, so reruns are
bit-reproducible.
"""

import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from gplvm_ais import autodiff as ad
from gplvm_ais import cli
from gplvm_ais import data as dio
from gplvm_ais import inference as inf
from gplvm_ais import linalg
from gplvm_ais import model as mdl
from gplvm_ais import synthetic as syn
from gplvm_ais import training as trn
from gplvm_ais.linalg import RngStream

N_WORKERS = 2


def _report(num, name, detail):
    print(f"ACCEPTANCE {num} PASS - {name}: {detail}")


# ---------------------------------------------------------------------
# 1. reversal identity and transition-ratio consistency
# ---------------------------------------------------------------------

def test_criterion_1_reversal_and_ratio():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_recon, worst_ratio = 0.0, 0.0
    for _ in range(1000):
        dim = int(rng.integers(1, 11))
        eta = float(rng.uniform(1e-4, 0.5))
        h_prev = rng.normal(size=(1, dim))
        eps = rng.normal(size=(1, dim))
        a = rng.normal(size=(dim, dim)) * 0.5

        def drift(h):
            return -h + np.tanh(h @ a)

        d_prev = drift(h_prev)
        h_next = ad._val(inf.ula_step(h_prev, d_prev, eta, eps))
        d_next = drift(h_next)
        eps_t = ad._val(inf.backward_noise(d_prev, d_next, eta, eps))
        recon = h_next + eta * d_next + np.sqrt(2 * eta) * eps_t
        worst_recon = max(worst_recon, float(np.abs(recon - h_prev).max()))

        r = float(ad._val(inf.log_transition_ratio(eps, eps_t)))
        cov = linalg.cholesky(2 * eta * np.eye(dim))
        log_fwd = linalg.mvn_logpdf(h_next.ravel(),
                                    (h_prev + eta * d_prev).ravel(), cov)
        log_bwd = linalg.mvn_logpdf(h_prev.ravel(),
                                    (h_next + eta * d_next).ravel(), cov)
        worst_ratio = max(worst_ratio, abs(r - (log_fwd - log_bwd)))
    elapsed = time.perf_counter() - t0
    assert worst_recon <= 1e-10
    assert worst_ratio <= 1e-8
    assert elapsed < 10.0
    _report(1, "reversal identity + ratio consistency",
            f"1000 steps, worst reconstruction {worst_recon:.2e}, "
            f"worst ratio error {worst_ratio:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------
# 2. gradient fidelity for MF, IW(K=5), AIS(K=3) on the tiny instance
# ---------------------------------------------------------------------

def test_criterion_2_gradient_fidelity():
    t0 = time.perf_counter()
    report = cli.run_gradcheck(seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(report.values())
    assert worst <= 1e-4, report
    assert elapsed < 120.0
    _report(2, "gradient fidelity",
            f"{len(report)} parameter groups, worst rel err {worst:.2e}, "
            f"{elapsed:.1f}s")


# ---------------------------------------------------------------------
# 3. degenerate-flow equality for K in {1, 5, 25}
# ---------------------------------------------------------------------

def test_criterion_3_degenerate_flow_equality():
    rng = RngStream(77)
    n, d, q, m = 8, 3, 2, 4
    x = rng.normal_matrix(n, d)
    params = mdl.initialize_params(x, np.ones((n, d)), q, m, rng)
    idx = np.arange(n)
    worst = 0.0
    for k in (1, 5, 25):
        noise = {"eps0": rng.normal_matrix(n, q),
                 "eps_steps": [rng.normal_matrix(n, q) for _ in range(k)],
                 "eps_f": rng.normal_matrix(n, d)}
        sched = inf.make_schedule(k, "linear")
        steps = inf.StepSizeState(eta0=0.0, adaptive=False)
        elbo, _ = inf.ais_elbo(mdl.ModelVars(params), x, idx, idx, sched,
                               steps, None, noise=noise)
        mf = inf.mf_elbo(mdl.ModelVars(params), x, idx, None, 1,
                         noise={"eps0": noise["eps0"],
                                "eps_f": noise["eps_f"]},
                         sampled_latent_kl=True)
        worst = max(worst, abs(float(ad._val(elbo)) - float(ad._val(mf))))
    assert worst <= 1e-10
    _report(3, "degenerate-flow equality",
            f"K in (1, 5, 25), worst |AIS(eta=0) - MF| = {worst:.2e}")


# ---------------------------------------------------------------------
# 4. evidence unbiasedness on the analytic 2-d Gaussian toy
# ---------------------------------------------------------------------

def test_criterion_4_evidence_unbiasedness():
    # the 3-SE band is checked at (K=32, eta=0.05); the K=256 tightness
    # check uses eta=0.3, where the chain mixes fast enough for the
    # 0.05-nat target (at eta=0.05 the lag behind the bridge costs ~0.18
    # nats for any schedule; see the closed-form recursion in the tests
    # that validate toy_log_weights)
    t0 = time.perf_counter()
    true_z = float(np.exp(inf.toy_true_log_normalizer(2)))

    w32 = inf.toy_log_weights(dim=2, k_steps=32, eta=0.05, n_chains=10_000,
                              rng=RngStream(4))
    weights = np.exp(w32)
    se = weights.std(ddof=1) / np.sqrt(weights.size)
    band_err = abs(weights.mean() - true_z)
    assert band_err <= 3.0 * se

    w256 = inf.toy_log_weights(dim=2, k_steps=256, eta=0.3, n_chains=20_000,
                               rng=RngStream(5))
    gap = inf.toy_true_log_normalizer(2) - w256.mean()
    assert gap <= 0.05
    elapsed = time.perf_counter() - t0
    assert elapsed < 300.0
    _report(4, "evidence unbiasedness",
            f"mean weight {weights.mean():.4f} vs Z={true_z:.4f} "
            f"(|err| {band_err:.4f} <= 3se {3 * se:.4f}); "
            f"K=256 gap {gap:.4f} <= 0.05 nats at eta=0.3; {elapsed:.1f}s")


# ---------------------------------------------------------------------
# 5. K-consistency on the toy with paired seeds
# ---------------------------------------------------------------------

def test_criterion_5_k_consistency():
    ks = (1, 4, 16, 64)
    n_seeds, chains = 20, 2000
    per_seed = {k: [] for k in ks}
    for s in range(n_seeds):
        for k in ks:
            w = inf.toy_log_weights(dim=2, k_steps=k, eta=0.05,
                                    n_chains=chains, rng=RngStream(9000 + s))
            per_seed[k].append(w.mean())
    details = []
    for lo, hi in zip(ks, ks[1:]):
        diff = np.asarray(per_seed[hi]) - np.asarray(per_seed[lo])
        se = diff.std(ddof=1) / np.sqrt(n_seeds)
        assert diff.mean() >= -2.0 * se, \
            f"ELBO decreased from K={lo} to K={hi}: {diff.mean():.4f}"
        details.append(f"K{lo}->K{hi}: +{diff.mean():.4f} (se {se:.4f})")
    _report(5, "K-consistency", "; ".join(details))


# ---------------------------------------------------------------------
# 6. bound ordering after training on the benchmark-sized dataset
# ---------------------------------------------------------------------

BENCH_ITERS = 3000


def _final_neg_elbo(params, config, x_model, mask, seed, samples=6):
    """Full-batch single-sample estimates of the trained bound, averaged;
    all methods are scored on identical footing (every latent term summed
    over all N)."""
    n = x_model.shape[0]
    idx = np.arange(n)
    rng = RngStream(seed + 424711)
    mv = mdl.ModelVars(params)
    vals = []
    for _ in range(samples):
        if config.method == "mf":
            v = inf.mf_elbo(mv, x_model, idx, rng, 1, mask=mask)
        elif config.method == "iw":
            v = inf.iw_elbo(mv, x_model, idx, config.k, rng, mask=mask)
        else:
            sched = inf.make_schedule(config.k, "linear")
            steps = inf.StepSizeState(
                eta0=trn.auto_step_size(params.latent.mean), adaptive=True,
                r_budget_per_row=config.r_budget_per_row)
            v, _ = inf.ais_elbo(mv, x_model, idx, idx, sched, steps, rng,
                                mask=mask)
        vals.append(-float(ad._val(v)) / n)
    return float(np.mean(vals))


def _bench_worker(job):
    method, seed = job
    ds = syn.make_manifold(n=1000, d=12, latent_dim=3, n_classes=3, seed=100)
    config = trn.TrainConfig(method=method, latent_dim=10, inducing=50, k=5,
                             iters=BENCH_ITERS, batch=64, lr=0.02, seed=seed)
    result = trn.train(ds, config)
    x_model = ds.X_model(True)
    return method, seed, _final_neg_elbo(result.params, config, x_model,
                                         ds.mask, seed)


@pytest.mark.slow
def test_criterion_6_bound_ordering():
    t0 = time.perf_counter()
    seeds = list(range(10))
    jobs = [(method, seed) for seed in seeds
            for method in ("mf", "iw", "ais")]
    scores = {}
    with ProcessPoolExecutor(max_workers=N_WORKERS) as pool:
        for method, seed, val in pool.map(_bench_worker, jobs):
            scores[(method, seed)] = val
    ordered, gaps = 0, []
    for seed in seeds:
        mf = scores[("mf", seed)]
        iw = scores[("iw", seed)]
        ais = scores[("ais", seed)]
        if ais < iw < mf:
            ordered += 1
        gaps.append(mf - ais)
    elapsed = time.perf_counter() - t0
    mean_gap = float(np.mean(gaps))
    assert ordered >= 8, f"ordering held on {ordered}/10 seeds: {scores}"
    assert mean_gap >= 1.0, f"AIS beat MF by {mean_gap:.2f} nats only"
    _report(6, "bound ordering at 3000 iterations",
            f"negELBO(AIS) < negELBO(IW) < negELBO(MF) on {ordered}/10 "
            f"seeds; AIS-MF gap {mean_gap:.2f} nats; {elapsed / 60:.1f} min")


# ---------------------------------------------------------------------
# 7. runtime linearity in K
# ---------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_runtime_linearity():
    ds = syn.make_manifold(n=2000, d=560, latent_dim=20, n_classes=4,
                           seed=41, noise_sd=0.05)
    k_list = [5, 10, 15, 20, 25]
    table = cli.run_benchmark(ds, k_list, epochs=1, batch=64, seed=0,
                              methods=("ais",))
    times = np.array([table[("ais", k)] for k in k_list])
    r2 = cli.affine_fit_r2(np.array(k_list, dtype=float), times)
    assert times[-1] > times[0]
    assert r2 >= 0.95
    _report(7, "runtime linearity",
            "per-epoch seconds " +
            ", ".join(f"K={k}: {t:.2f}" for k, t in zip(k_list, times)) +
            f"; affine R^2 = {r2:.4f}")


# ---------------------------------------------------------------------
# 8. missing-data recovery beats column-mean imputation
# ---------------------------------------------------------------------

def _missing_worker(seed):
    ds = syn.make_lowrank(n=200, d=20, rank=2, noise_sd=0.05, seed=500)
    ds = dio.apply_missing(ds, 0.05, 0.75, RngStream(313 + seed))
    config = trn.TrainConfig(method="ais", latent_dim=3, inducing=16, k=3,
                             iters=400, batch=50, lr=0.02, seed=seed)
    result = trn.train(ds, config)

    cells = dio.masked_indices(ds)
    std = dio.standardize(ds)
    recon = std.to_original_units(
        mdl.reconstruct_rows(result.params.latent.mean,
                             result.params.inducing, result.params.kernel))
    pred = recon[cells[:, 0], cells[:, 1]]
    truth = ds.X[cells[:, 0], cells[:, 1]]
    model_mse = float(np.mean((pred - truth) ** 2))

    col_mean = np.array([
        ds.X[ds.mask[:, j] > 0, j].mean() for j in range(ds.d)])
    base_mse = float(np.mean((col_mean[cells[:, 1]] - truth) ** 2))
    return seed, model_mse, base_mse


@pytest.mark.slow
def test_criterion_8_missing_data_recovery():
    t0 = time.perf_counter()
    wins, ratios = 0, []
    with ProcessPoolExecutor(max_workers=N_WORKERS) as pool:
        for seed, model_mse, base_mse in pool.map(_missing_worker, range(10)):
            if model_mse < base_mse:
                wins += 1
            ratios.append(model_mse / base_mse)
    elapsed = time.perf_counter() - t0
    assert wins >= 9, f"beat the baseline on {wins}/10 seeds"
    _report(8, "missing-data recovery",
            f"masked-entry MSE below column-mean baseline on {wins}/10 "
            f"seeds (median ratio {np.median(ratios):.3f}); "
            f"{elapsed / 60:.1f} min")


# ---------------------------------------------------------------------
# 9. importance-weighted sanity
# ---------------------------------------------------------------------

def test_criterion_9_iw_sanity():
    rng = RngStream(55)
    n, d, q, m = 8, 3, 2, 4
    x = rng.normal_matrix(n, d)
    params = mdl.initialize_params(x, np.ones((n, d)), q, m, rng)
    idx = np.arange(n)

    eps0 = rng.normal_matrix(n, q)
    eps_f = rng.normal_matrix(n, d)
    iw1 = inf.iw_elbo(mdl.ModelVars(params), x, idx, 1, None,
                      noise={"eps_list": [eps0], "eps_f_list": [eps_f]})
    mf = inf.mf_elbo(mdl.ModelVars(params), x, idx, None, 1,
                     noise={"eps0": eps0, "eps_f": eps_f},
                     sampled_latent_kl=True)
    k1_gap = abs(float(ad._val(iw1)) - float(ad._val(mf)))
    assert k1_gap <= 1e-10

    n_seeds = 24
    means = {}
    for k in (1, 5, 25):
        vals = [float(ad._val(inf.iw_elbo(mdl.ModelVars(params), x, idx, k,
                                          RngStream(7000 + s))))
                for s in range(n_seeds)]
        means[k] = (np.mean(vals), np.std(vals, ddof=1) / np.sqrt(n_seeds))
    details = [f"K=1 equality gap {k1_gap:.2e}"]
    for lo, hi in ((1, 5), (5, 25)):
        m_lo, se_lo = means[lo]
        m_hi, se_hi = means[hi]
        slack = 2.0 * float(np.hypot(se_lo, se_hi))
        assert m_hi >= m_lo - slack, \
            f"IW mean fell from K={lo} ({m_lo:.3f}) to K={hi} ({m_hi:.3f})"
        details.append(f"K{lo}->K{hi}: {m_hi - m_lo:+.3f} (slack {slack:.3f})")
    _report(9, "IW sanity", "; ".join(details))
