"""Acceptance criteria, one test each.

Every test appends a single PASS/FAIL line (with the measured numbers) to the
terminal summary, then asserts. Criteria 6-8 share the trained desk-scale
models, so run them in one session to avoid retraining.
"""

import os
import time

import numpy as np
import pytest

from aspect.adversary import (AttackBudget, Perturbation, apply_perturbation, dice_attack,
                              pgd_attack, rayleigh_gap)
from aspect.cheb import (apply_filter, coeffs_from_gammas, rescaled_laplacian,
                         dense_filter_oracle, filter_response, spectral_grid)
from aspect.evaluation import (drop_percent, evaluate_poisoned, linear_probe, probe_split,
                               spearman)
from aspect.graphcore import (DatasetBundle, SpectralPerturbSpec, generate_mixed_graph,
                              load_dataset, local_homophily, make_splits, normalized_laplacian)
from aspect.model import fuse
from aspect.theory import verify_prop1, verify_theorem1
from aspect.trainer import TrainConfig, build_model, train

import conftest
from conftest import random_graph

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2, 3, 4)
VARIANTS = ("aspect", "no_gate", "no_rayleigh", "no_adversarial")

# desk-scale synthetic setting shared by criteria 5-8
GRAPH = dict(n_hom=200, n_het=200, classes=2, p_in=0.05, p_out=0.01, feat_dim=16, noise=3.0)
DESK = TrainConfig(epochs=100, tau=0.2, lr_encoder=0.005, eps_A=4.0, eps_X=4.0, eta=0.5)
DICE_RATE = 0.2


def report(n, ok, detail, elapsed, budget):
    within = elapsed < budget
    status = "PASS" if ok and within else "FAIL"
    line = f"criterion {n}: {status} | {detail} | {elapsed:.1f}s (budget {budget:.0f}s)"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
    assert within, line


# ---------------------------------------------------------------------------
# shared desk-scale runs


_CACHE = {}


def desk_data(seed):
    key = ("data", seed)
    if key not in _CACHE:
        b = generate_mixed_graph(seed=seed, **GRAPH)
        splits = make_splits(b.graph.n, 10, seed=seed)
        g2 = dice_attack(b.graph, b.labels, DICE_RATE, seed=seed)
        poisoned = DatasetBundle(g2, b.features, b.labels, name=b.name + "-dice")
        _CACHE[key] = (b, splits, poisoned)
    return _CACHE[key]


def clean_run(seed, variant):
    key = ("clean", seed, variant)
    if key not in _CACHE:
        b, splits, _ = desk_data(seed)
        cfg = DESK.replace(seed=seed).with_ablation(variant)
        model, hist = train(build_model(b.features.shape[1], cfg), b, cfg, splits=splits)
        Z = model.embed(b.graph, b.features)["Z"]
        _CACHE[key] = (model, hist, linear_probe(Z, b.labels, splits))
    return _CACHE[key]


def poisoned_run(seed, variant):
    key = ("poisoned", seed, variant)
    if key not in _CACHE:
        _, splits, poisoned = desk_data(seed)
        cfg = DESK.replace(seed=seed).with_ablation(variant)
        _CACHE[key] = evaluate_poisoned(cfg, poisoned, splits)[0]
    return _CACHE[key]


# ---------------------------------------------------------------------------


def test_criterion_1_filter_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_filter, worst_interp = 0.0, 0.0
    for _ in range(50):
        n = int(rng.integers(5, 201))
        g = random_graph(rng, n, float(rng.uniform(0.02, 0.3)))
        K = int(rng.integers(1, 11))
        w = rng.normal(size=K + 1)
        X = rng.normal(size=(n, 4))
        got = apply_filter(rescaled_laplacian(g), w, X)
        ref = dense_filter_oracle(normalized_laplacian(g), w, X)
        worst_filter = max(worst_filter, np.linalg.norm(got - ref) / np.linalg.norm(ref))
        gamma = rng.uniform(0, 2, K + 1)
        grid = spectral_grid(K)
        # grid points live on the rescaled axis x = lam - 1 (lam_max = 2)
        resp = filter_response(coeffs_from_gammas(gamma, grid), grid + 1.0)
        worst_interp = max(worst_interp, np.max(np.abs(resp - gamma)))
    ok = worst_filter <= 1e-8 and worst_interp <= 1e-10
    report(1, ok, f"max rel filter err {worst_filter:.2e} (<=1e-8), "
           f"max interpolation err {worst_interp:.2e} (<=1e-10)", time.perf_counter() - t0, 30)


def test_criterion_2_gradient_suite():
    import test_adversary
    import test_diffnet
    import test_trainer

    t0 = time.perf_counter()
    checks = {
        "primitives": test_diffnet.test_primitive_gradients,
        "info_nce": test_diffnet.test_info_nce_gradients,
        "total_loss": lambda: test_trainer.test_total_loss_gradient_matches_finite_differences(
            generate_mixed_graph(15, 15, classes=2, p_in=0.25, p_out=0.05, feat_dim=5,
                                 noise=1.0, seed=3)),
        "attack_J": lambda: test_adversary.test_attack_gradient_matches_finite_differences(
            np.random.default_rng(1234), False),
        "attack_J_frozen_degrees": lambda: test_adversary.test_attack_gradient_matches_finite_differences(
            np.random.default_rng(1234), True),
    }
    failed = []
    for name, fn in checks.items():
        try:
            fn()
        except AssertionError:
            failed.append(name)
    detail = "all finite-difference checks within 1e-4" if not failed else f"failed: {failed}"
    report(2, not failed, detail, time.perf_counter() - t0, 120)


def test_criterion_3_variance_amplification():
    t0 = time.perf_counter()
    parts = []
    ok = True
    for beta in (1.0, 2.0):
        rep = verify_prop1(100, spec=SpectralPerturbSpec(beta=beta), seed=3, mc_trials=5,
                           mc_samples=2000)
        mc_ok = all(r["pass"] for r in rep["monte_carlo"])
        ok &= rep["passed"] == 100 and mc_ok
        parts.append(f"beta={beta:g}: {rep['passed']}/100, min margin {rep['margin_min']:.3g}, "
                     f"MC {sum(r['pass'] for r in rep['monte_carlo'])}/{len(rep['monte_carlo'])}")
    report(3, ok, "; ".join(parts), time.perf_counter() - t0, 120)


def test_criterion_4_regret_bound():
    t0 = time.perf_counter()
    rep = verify_theorem1(100, seed=4)
    ok = rep["passed"] == 100 and rep["point_mass_pass"]
    report(4, ok, f"{rep['passed']}/100 landscapes, min gap {rep['min_gap']:.3g}, "
           f"point-mass gap {rep['point_mass_max_gap']:.1e}, argmin within one cell: "
           f"{rep['point_mass_pass']}", time.perf_counter() - t0, 60)


@pytest.mark.slow
def test_criterion_5_attack_validity():
    t0 = time.perf_counter()
    n_runs = 20
    budget_ok = True
    j_up = gap_up = j_up_big = gap_up_small = 0
    for seed in range(n_runs):
        b = generate_mixed_graph(50, 50, classes=2, p_in=0.15, p_out=0.03, feat_dim=16, noise=3.0,
                                 seed=100 + seed)
        cfg = DESK.replace(epochs=20, seed=seed, no_adversarial=True)
        model, _ = train(build_model(16, cfg), b, cfg)
        g, X = b.graph, b.features
        # default step size 0.01 * eps / sqrt(T), default lambda_spec 0.5
        pert = pgd_attack(model, g, X, AttackBudget(eps_A=4, eps_X=4, T=5), seed=seed)
        j_up += pert.history[-1] > pert.history[0]
        budget_ok &= pert.norm_A <= 4 + 1e-9 and pert.norm_X <= 4 + 1e-9
        zero = Perturbation.zeros(pert.candidates, X.shape)
        g0 = rayleigh_gap(model, g, X, zero)
        gap_up_small += rayleigh_gap(model, g, X, pert) >= g0
        # J sums InfoNCE over all nodes, so the Rayleigh weight is set on that scale
        p = pgd_attack(model, g, X, AttackBudget(eps_A=4, eps_X=4, T=10, lambda_spec=float(g.n)),
                       seed=seed)
        gap_up += rayleigh_gap(model, g, X, p) >= g0
        q = pgd_attack(model, g, X, DESK.budget, seed=seed)
        j_up_big += q.history[-1] > q.history[0]
        budget_ok &= q.norm_A <= 4 + 1e-9 and q.norm_X <= 4 + 1e-9
    ok = budget_ok and j_up >= 0.95 * n_runs and gap_up >= 0.9 * n_runs
    report(5, ok, f"budgets held: {budget_ok}; J rose {j_up}/{n_runs} (>=19); Rayleigh gap "
           f"not decreased {gap_up}/{n_runs} at lambda_spec=N (>=18) [info: gap "
           f"{gap_up_small}/{n_runs} at lambda_spec=0.5; J rose {j_up_big}/{n_runs} with the "
           f"training step size eta=0.5]", time.perf_counter() - t0, 300)


@pytest.mark.slow
def test_criterion_6_ablation_direction():
    t0 = time.perf_counter()
    clean = {v: [] for v in VARIANTS}
    pois = {v: [] for v in VARIANTS}
    for seed in SEEDS:
        for v in VARIANTS:
            clean[v].append(clean_run(seed, v)[2].mean)
            pois[v].append(poisoned_run(seed, v).mean)
    cm = {v: float(np.mean(clean[v])) for v in VARIANTS}
    pm = {v: float(np.mean(pois[v])) for v in VARIANTS}
    drops = {v: drop_percent(cm[v], pm[v]) for v in VARIANTS}
    best_pois = all(pm["aspect"] >= pm[v] for v in VARIANTS[1:])
    largest_drop = max(drops, key=drops.get) == "no_adversarial"
    fmt = lambda d: ", ".join(f"{k} {100 * x:.2f}" for k, x in d.items())
    detail = (f"poisoned acc % [{fmt(pm)}]; drop % [" +
              ", ".join(f"{k} {x:.2f}" for k, x in drops.items()) +
              f"]; ASPECT best poisoned: {best_pois}; w/o Adversarial largest drop: "
              f"{largest_drop} [info: clean acc % {fmt(cm)}]")
    report(6, best_pois and largest_drop, detail, time.perf_counter() - t0, 1200)


@pytest.mark.slow
def test_criterion_7_gate_mechanism():
    t0 = time.perf_counter()
    rhos, shifts = [], []
    for seed in SEEDS:
        b, _, _ = desk_data(seed)
        model = clean_run(seed, "aspect")[0]
        g, X = b.graph, b.features
        m = model.embed(g, X)["m"].ravel()
        rhos.append(spearman(m, local_homophily(g, b.labels)))
        pert = pgd_attack(model, g, X, DESK.budget, seed=seed, tau=DESK.tau)
        g2, X2 = apply_perturbation(g, X, pert)
        shifts.append(float(model.embed(g2, X2)["m"].mean() - m.mean()))
    rho, shift = float(np.mean(rhos)), float(np.mean(shifts))
    detail = (f"(a) mean Spearman(m, h) {rho:+.4f} (>0), per seed "
              f"{np.round(rhos, 3).tolist()}; (b) mean gate shift {shift:+.5f} (>0), per seed "
              f"{np.round(shifts, 5).tolist()}")
    report(7, rho > 0 and shift > 0, detail, time.perf_counter() - t0, 600)


def _val_risk(Z, y, tr, va):
    return probe_split(Z, y, tr, va, int(y.max()) + 1, return_loss=True)[1]


@pytest.mark.slow
def test_criterion_8_global_fusion_regret():
    t0 = time.perf_counter()
    wins, rows = 0, []
    for seed in SEEDS:
        b, splits, _ = desk_data(seed)
        model = clean_run(seed, "aspect")[0]
        out = model.embed(b.graph, b.features)
        tr, va, _ = splits[0]
        node = _val_risk(out["Z"], b.labels, tr, va)
        sweep = [_val_risk(fuse(out["Z_L"], out["Z_H"], np.full(b.graph.n, a)), b.labels, tr, va)
                 for a in np.linspace(0.0, 1.0, 101)]
        best = float(min(sweep))
        wins += node <= best
        rows.append(f"{node:.4f} vs {best:.4f}")
    report(8, wins >= 4, f"node-wise gate risk <= best global m in {wins}/5 seeds (>=4); "
           f"val risk node-wise vs best global: {rows}", time.perf_counter() - t0, 1800)


CORA_DIR = os.environ.get("ASPECT_CORA_DIR")


@pytest.mark.slow
@pytest.mark.skipif(not CORA_DIR, reason="set ASPECT_CORA_DIR to a Cora dataset directory")
def test_criterion_9_cora_smoke():
    t0 = time.perf_counter()
    b = load_dataset(CORA_DIR, "cora")
    cfg = TrainConfig(epochs=500, patience=180, lr_filters=0.00013, lr_encoder=0.00044,
                      lr_gate=0.00915, wd_filters=0.00134, wd_encoder=0.00158, wd_gate=0.00202,
                      eps_A=4.05399, eps_X=4.05399, lambda_spec=0.46024, attack_steps=9,
                      hidden=512, out_dim=512, K=5, dropout=0.34248, edge_drop_rate=0.45262,
                      feat_mask_rate=0.45262, tau=0.26108, activation="prelu", seed=0)
    splits = make_splits(b.graph.n, 10, seed=0)
    model, _ = train(build_model(b.features.shape[1], cfg), b, cfg, splits=splits)
    res = linear_probe(model.embed(b.graph, b.features)["Z"], b.labels, splits)
    report(9, res.mean >= 0.80, f"Cora clean accuracy {100 * res.mean:.2f} +- {100 * res.std:.2f} "
           f"(floor 80)", time.perf_counter() - t0, 7200)
