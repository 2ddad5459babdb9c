import csv

import numpy as np
import pytest

from aspect import diffnet as dn
from aspect.adversary import Perturbation, adv_objective, clean_reference, sample_candidates
from aspect.graphcore import generate_mixed_graph
from aspect.trainer import (TrainConfig, adversarial_terms, build_model, clean_loss, dump_config,
                            load_config, parse_config_lines, total_loss, train, _clean_terms)

from conftest import coord_rel_err, numeric_grad


def small_cfg(**kw):
    base = dict(hidden=8, out_dim=4, K=3, gate_hidden=6, tau=0.5, epochs=5, probe_steps=20,
                eps_A=1.0, eps_X=1.0, eta=0.1, attack_steps=2, lambda_spec=0.5)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return generate_mixed_graph(15, 15, classes=2, p_in=0.25, p_out=0.05, feat_dim=5,
                                noise=1.0, seed=3)


def test_clean_loss_finite_and_nonnegative(data):
    cfg = small_cfg()
    model = build_model(5, cfg)
    v = clean_loss(model, data.graph, data.features, cfg, seed=1).item()
    assert np.isfinite(v) and v >= 0


def test_identical_views(data):
    cfg = small_cfg(edge_drop_rate=0.0, feat_mask_rate=0.0)
    model = build_model(5, cfg)
    loss, es, _ = _clean_terms(model, data.graph, data.features, cfg, seed=0)
    Z = es.Z.data
    same = dn.info_nce(Z, Z, cfg.tau, reduction="sum").item()
    assert loss.item() == pytest.approx(same, rel=1e-12)
    # positives sit at cosine 1, the largest similarity any key can reach
    noisy = clean_loss(model, data.graph, data.features, cfg.replace(edge_drop_rate=0.5,
                                                                     feat_mask_rate=0.5), seed=0)
    assert np.isfinite(noisy.item())


def test_zero_lambda_total_equals_clean(data):
    cfg = small_cfg(lambda_adv=0.0)
    model = build_model(5, cfg)
    cand = sample_candidates(data.graph, 2, seed=0)
    pert = Perturbation(cand, np.full(len(cand), 0.2), np.ones_like(data.features))
    tot, _ = total_loss(model, data.graph, data.features, pert, cfg, seed=4)
    assert tot.item() == clean_loss(model, data.graph, data.features, cfg, seed=4).item()


def test_adversarial_terms_at_zero_perturbation(data):
    cfg = small_cfg(edge_drop_rate=0.0, feat_mask_rate=0.0)
    model = build_model(5, cfg)
    g, X = data.graph, data.features
    _, es, rng = _clean_terms(model, g, X, cfg, seed=0)
    zero = Perturbation.zeros(sample_candidates(g, 2, seed=0), X.shape)
    weighted, _, _ = adversarial_terms(model, g, X, zero, es, cfg, rng)
    anchor, m = clean_reference(model, g, X)
    J = adv_objective(model, anchor, m, g, X, zero, lambda_spec=0.0, tau=cfg.tau)
    assert weighted.item() == pytest.approx(J, rel=1e-10)


def _flat_params(model):
    P = model.parameters()
    names = sorted(P)
    return names, np.concatenate([P[k].data.ravel() for k in names])


def _set_flat(model, names, flat):
    P = model.parameters()
    i = 0
    for k in names:
        n = P[k].data.size
        P[k].data[...] = flat[i:i + n].reshape(P[k].shape)
        i += n


def test_gate_receives_gradient_through_adversarial_terms(data):
    cfg = small_cfg(edge_drop_rate=0.0, feat_mask_rate=0.0)
    g, X = data.graph, data.features
    model = build_model(5, cfg)
    cand = sample_candidates(g, 2, seed=0)
    pert = Perturbation(cand, np.full(len(cand), 0.3), 0.3 * np.ones_like(X))

    def gate_grad(m_detached=None):
        model.zero_grad()
        with dn.Tape() as tape:
            loss, _ = total_loss(model, g, X, pert, cfg, seed=2, m_detached=m_detached)
        tape.backward(loss)
        return model.parameters()["gate.W2"].grad.copy()

    live = gate_grad()
    _, m = clean_reference(model, g, X)
    frozen = gate_grad(m_detached=m)
    assert np.abs(live).max() > 0
    # numerical check of the gate column
    W2 = model.parameters()["gate.W2"]

    def f(w):
        old = W2.data.copy()
        W2.data[...] = w
        v = total_loss(model, g, X, pert, cfg, seed=2)[0].item()
        W2.data[...] = old
        return v

    num = numeric_grad(f, W2.data)
    assert np.all(coord_rel_err(num, live, floor=1e-4) < 1e-4)
    assert not np.allclose(live, frozen)


def test_total_loss_gradient_matches_finite_differences(data):
    cfg = small_cfg()
    g, X = data.graph, data.features
    model = build_model(5, cfg)
    cand = sample_candidates(g, 2, seed=0)
    r = np.random.default_rng(0)
    pert = Perturbation(cand, r.uniform(0.05, 0.3, len(cand)), 0.2 * r.normal(size=X.shape))
    # filter parameters start on the relu kink at zero; step off it
    for k in ("delta_L", "delta_H"):
        d = model.params[k].data
        d[np.abs(d) < 1e-2] = 0.05
    names, x0 = _flat_params(model)

    def f(x):
        _set_flat(model, names, x)
        return total_loss(model, g, X, pert, cfg, seed=6)[0].item()

    _set_flat(model, names, x0)
    model.zero_grad()
    with dn.Tape() as tape:
        loss, _ = total_loss(model, g, X, pert, cfg, seed=6)
    tape.backward(loss)
    P = model.parameters()
    ana = np.concatenate([(P[k].grad if P[k].grad is not None else np.zeros(P[k].shape)).ravel()
                          for k in names])
    num = numeric_grad(f, x0)
    _set_flat(model, names, x0)
    ok = coord_rel_err(num, ana, floor=1e-3) < 1e-4
    assert ok.all(), np.flatnonzero(~ok)


def test_zero_epochs_leave_model_unchanged(data):
    cfg = small_cfg(epochs=0)
    model = build_model(5, cfg)
    before = model.state_dict()
    model, hist = train(model, data, cfg)
    assert len(hist) == 0
    for k, v in model.state_dict().items():
        assert np.array_equal(v, before[k])


def test_training_is_deterministic(data):
    cfg = small_cfg(epochs=3)
    a, ha = train(build_model(5, cfg), data, cfg)
    b, hb = train(build_model(5, cfg), data, cfg)
    for k, v in a.state_dict().items():
        assert np.array_equal(v, b.state_dict()[k])
    assert np.array_equal(ha.column("l_total"), hb.column("l_total"))


def test_no_gate_gate_is_global(data):
    cfg = small_cfg(epochs=3).with_ablation("no_gate")
    model, _ = train(build_model(5, cfg), data, cfg)
    m = model.embed(data.graph, data.features)["m"]
    assert np.all(m == m[0, 0])
    with pytest.raises(ValueError):
        train(build_model(5, small_cfg()), data, cfg)


def test_history_and_curves(tmp_path, data):
    cfg = small_cfg(epochs=4)
    _, hist = train(build_model(5, cfg), data, cfg)
    assert 1 <= len(hist) <= 4
    hist.to_csv(tmp_path / "curves.csv")
    with open(tmp_path / "curves.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "l_clean", "l_total", "j_adv", "mean_gate", "val_acc"]
    assert len(rows) == len(hist) + 1
    assert np.all(np.isfinite(hist.column("j_adv")))


def test_no_adversarial_skips_attack(data):
    cfg = small_cfg(epochs=2).with_ablation("no_adversarial")
    _, hist = train(build_model(5, cfg), data, cfg)
    assert np.all(np.isnan(hist.column("j_adv")))
    assert np.array_equal(hist.column("l_clean"), hist.column("l_total"))


def test_no_rayleigh_zeroes_spectral_weight():
    assert small_cfg().with_ablation("no_rayleigh").budget.lambda_spec == 0.0
    with pytest.raises(ValueError):
        small_cfg().with_ablation("w/o everything")


def test_non_finite_loss_aborts(data):
    cfg = small_cfg(epochs=2)
    model = build_model(5, cfg)
    model.parameters()["proj.W1"].data[0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="non-finite"):
        train(model, data, cfg)


def test_config_roundtrip_and_errors(tmp_path):
    cfg = small_cfg(tau=0.3, no_gate=True)
    path = tmp_path / "a.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert parse_config_lines(["epochs = 7  # comment", "", "no_rayleigh = yes"]).epochs == 7
    with pytest.raises(ValueError, match="unknown key"):
        parse_config_lines(["learning_rate = 1"])
    with pytest.raises(ValueError):
        parse_config_lines(["epochs"])
    with pytest.raises(ValueError):
        parse_config_lines(["no_gate = maybe"])


@pytest.mark.parametrize("kw", [dict(tau=0), dict(lambda_adv=-1), dict(edge_drop_rate=1.0)])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


@pytest.mark.slow
def test_clean_loss_falls_over_training():
    b = generate_mixed_graph(100, 100, classes=2, p_in=0.05, p_out=0.01, feat_dim=16, noise=3.0,
                             seed=0)
    cfg = TrainConfig(epochs=200, patience=1000, tau=0.2, lr_encoder=0.005, no_adversarial=True,
                      eval_every=0, seed=0)
    _, hist = train(build_model(16, cfg), b, cfg)
    lc = hist.column("l_clean")
    assert lc[-10:].mean() <= 0.7 * lc[0]


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_best_epoch_improves_on_first(seed):
    b = generate_mixed_graph(60, 60, classes=2, p_in=0.08, p_out=0.015, feat_dim=16, noise=3.0,
                             seed=seed)
    cfg = TrainConfig(epochs=30, tau=0.2, lr_encoder=0.005, eps_A=2.0, eps_X=2.0, eta=0.5,
                      attack_steps=3, probe_steps=50, seed=seed)
    _, hist = train(build_model(16, cfg), b, cfg)
    lc = hist.column("l_clean")
    assert lc[hist.best_epoch] < lc[0] or hist.best_epoch == 0
