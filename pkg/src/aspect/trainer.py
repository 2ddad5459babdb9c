"""Alternating minimax training: PGD inner loop, reliability-weighted outer update."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffnet as dn
from .adversary import AttackBudget, Perturbation, clean_reference, pgd_attack, sample_candidates
from .adversary import AttackStructure
from .cheb import LaplacianOperator
from .evaluation import probe_split
from .graphcore import augment, make_splits
from .model import AspectModel, ModelConfig
from .seeds import derive_seed

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    patience: int = 50
    lr_encoder: float = 1e-3
    lr_filters: float = 1e-2
    lr_gate: float = 1e-2
    wd_encoder: float = 0.0
    wd_filters: float = 0.0
    wd_gate: float = 0.0
    lr_alpha: float = 0.0          # accepted for parity with published tables; unused
    lr_beta: float = 0.0           # accepted for parity with published tables; unused
    tau: float = 0.5
    lambda_adv: float = 1.0
    eps_A: float = 1.0
    eps_X: float = 1.0
    eta: float = 0.0               # 0 -> 0.01 * max(eps) / sqrt(attack_steps)
    attack_steps: int = 5
    lambda_spec: float = 0.5
    candidates_per_node: int = 2
    frozen_degrees: bool = False
    edge_drop_rate: float = 0.2
    feat_mask_rate: float = 0.2
    hidden: int = 64
    out_dim: int = 32
    K: int = 3
    gate_hidden: int = 0
    dropout: float = 0.0
    activation: str = "prelu"
    batch_norm: bool = False
    detach_anchor: bool = False
    max_negatives: int = 5000
    eval_every: int = 1
    probe_steps: int = 100
    seed: int = 0
    no_gate: bool = False
    no_rayleigh: bool = False
    no_adversarial: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be non-negative")
        for k in ("edge_drop_rate", "feat_mask_rate", "dropout"):
            if not 0 <= getattr(self, k) < 1:
                raise ValueError(f"{k} must lie in [0, 1)")
        if self.epochs < 0 or self.patience < 0:
            raise ValueError("epochs and patience must be non-negative")

    @property
    def budget(self):
        return AttackBudget(eps_A=self.eps_A, eps_X=self.eps_X, eta=self.eta or None,
                            T=self.attack_steps,
                            lambda_spec=0.0 if self.no_rayleigh else self.lambda_spec)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def with_ablation(self, name):
        if name in (None, "none", "aspect"):
            return self.replace()
        if name not in ("no_gate", "no_rayleigh", "no_adversarial"):
            raise ValueError(f"unknown ablation {name!r}")
        return self.replace(**{name: True})


def _parse_value(raw, typ):
    raw = raw.strip()
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


def parse_config_lines(lines, base=None):
    """Flat ``key = value`` lines over :class:`TrainConfig`; unknown keys are rejected."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {no}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in types:
            raise ValueError(f"line {no}: unknown key {k!r}")
        try:
            values[k] = _parse_value(v, types[k])
        except ValueError as e:
            raise ValueError(f"line {no}: {k}: {e}") from None
    base = base or TrainConfig()
    return dataclasses.replace(base, **values)


def load_config(path, overrides=None):
    with open(path) as fh:
        cfg = parse_config_lines(fh.readlines())
    return cfg.replace(**overrides) if overrides else cfg


def dump_config(cfg):
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("nan")
    stopped_early: bool = False

    COLUMNS = ("epoch", "l_clean", "l_total", "j_adv", "mean_gate", "val_acc")

    def append(self, **rec):
        self.records.append(rec)

    def column(self, key):
        return np.array([r[key] for r in self.records], dtype=np.float64)

    def __len__(self):
        return len(self.records)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([r["epoch"]] + [repr(float(r[k])) for k in self.COLUMNS[1:]])


def build_model(in_dim, config, seed=None):
    mc = ModelConfig(in_dim=in_dim, hidden=config.hidden, out_dim=config.out_dim, K=config.K,
                     gate_hidden=config.gate_hidden, dropout=config.dropout,
                     activation=config.activation, batch_norm=config.batch_norm,
                     global_gate=config.no_gate,
                     seed=derive_seed(config.seed, "model") if seed is None else seed)
    return AspectModel(mc)


def make_optimizer(model, config):
    groups = model.groups()
    P = model.parameters()
    spec = [("filters", config.lr_filters, config.wd_filters),
            ("encoder", config.lr_encoder, config.wd_encoder),
            ("gate", config.lr_gate, config.wd_gate)]
    return dn.Adam([{"params": [P[k] for k in groups[name]], "lr": lr, "weight_decay": wd}
                    for name, lr, wd in spec if groups[name]])


def _neg_cap(config, n):
    return config.max_negatives if config.max_negatives and n > config.max_negatives else None


def _clean_terms(model, g, X, config, seed):
    rng = np.random.default_rng(seed)
    op = LaplacianOperator.from_graph(g)
    es = model.encode(op, X, mode="train", rng=rng)
    g_aug, X_aug = augment(g, X, config.edge_drop_rate, config.feat_mask_rate,
                           seed=int(rng.integers(2**63 - 1)))
    es_aug = model.encode(LaplacianOperator.from_graph(g_aug), X_aug, mode="train", rng=rng)
    cap = _neg_cap(config, g.n)
    loss = dn.info_nce(es.Z, es_aug.Z, config.tau, reduction="sum", max_negatives=cap, rng=rng)
    return loss, es, rng


def clean_loss(model, g, X, config, seed=0):
    """Sum over nodes of InfoNCE between the fused view and an augmented fused view."""
    return _clean_terms(model, g, X, config, seed)[0]


def adversarial_terms(model, g, X, pert, es_clean, config, rng, m_detached=None):
    """Reliability-weighted InfoNCE of the perturbed channels against the clean anchor.

    Returns (weighted sum, per-node low-channel loss, per-node high-channel loss).
    """
    struct = AttackStructure(g, pert.candidates)
    op = struct.operator(pert.delta_A, frozen_degrees=config.frozen_degrees)
    es_adv = model.encode(op, np.asarray(X) + pert.delta_X, mode="train", rng=rng)
    anchor = es_clean.Z.detach() if config.detach_anchor else es_clean.Z
    m = es_clean.m if m_detached is None else dn.Tensor(np.asarray(m_detached).reshape(-1, 1))
    m = dn.reshape(m, (m.shape[0],))
    cap = _neg_cap(config, g.n)
    lL = dn.info_nce(es_adv.Z_L, anchor, config.tau, reduction="none", max_negatives=cap, rng=rng)
    lH = dn.info_nce(es_adv.Z_H, anchor, config.tau, reduction="none", max_negatives=cap, rng=rng)
    weighted = dn.add(dn.sum(dn.mul(m, lL)), dn.sum(dn.mul(dn.sub(1.0, m), lH)))
    return weighted, lL, lH


def total_loss(model, g, X, pert, config, seed=0, m_detached=None):
    """L_clean + lambda_adv * sum_v [m_v l(z_adv_L, z_v) + (1 - m_v) l(z_adv_H, z_v)].

    The gate values carry gradient (unless ``m_detached`` is given), which is
    what lets the outer update move the gate towards the channel whose
    adversarial loss is smaller. Returns ``(loss, parts)``.
    """
    lc, es, rng = _clean_terms(model, g, X, config, seed)
    parts = {"l_clean": lc, "adv": None, "es": es}
    if pert is None or config.lambda_adv == 0:
        return lc, parts
    adv, _, _ = adversarial_terms(model, g, X, pert, es, config, rng, m_detached)
    parts["adv"] = adv
    return dn.add(lc, dn.mul(adv, config.lambda_adv)), parts


def _diagnostic_dump(model, epoch, values):
    norms = {k: float(np.linalg.norm(p.data)) for k, p in model.parameters().items()}
    finite = {k: bool(np.all(np.isfinite(p.data))) for k, p in model.parameters().items()}
    return f"non-finite loss at epoch {epoch}: {values}; param norms {norms}; finite {finite}"


def validation_accuracy(model, g, X, labels, tr, va, steps=100):
    Z = model.embed(g, X)["Z"]
    if not np.all(np.isfinite(Z)):
        return float("nan")
    return probe_split(Z, labels, tr, va, steps=steps)


def train(model, data, config, splits=None, callback=None):
    """Fit ``model`` on ``data`` (a DatasetBundle). Returns (model, TrainHistory).

    Validation accuracy (a short softmax probe on split 0) drives early
    stopping; the best-scoring parameters are restored at the end.
    """
    if config.no_gate != model.config.global_gate:
        raise ValueError("no_gate ablation needs a model built with a global gate (see build_model)")
    g, X, y = data.graph, np.asarray(data.features, dtype=np.float64), data.labels
    hist = TrainHistory()
    if config.epochs == 0:
        return model, hist
    if splits is None:
        splits = make_splits(g.n, 1, derive_seed(config.seed, "splits"))
    tr, va, _ = splits[0]
    opt = make_optimizer(model, config)
    best_state, best_val, since = model.state_dict(), -np.inf, 0

    for epoch in range(config.epochs):
        eseed = derive_seed(config.seed, "epoch", epoch)
        pert, j_adv = None, float("nan")
        if not config.no_adversarial and config.lambda_adv > 0:
            anchor, m_fixed = clean_reference(model, g, X)
            if not np.all(np.isfinite(anchor)):
                raise FloatingPointError(_diagnostic_dump(model, epoch, {"anchor": "non-finite"}))
            cand = sample_candidates(g, config.candidates_per_node, derive_seed(eseed, "cand"))
            pert = pgd_attack(model, g, X, config.budget, cand, tau=config.tau, anchor=anchor,
                              m_fixed=m_fixed, frozen_degrees=config.frozen_degrees,
                              max_negatives=_neg_cap(config, g.n))
            j_adv = pert.history[-1]

        model.zero_grad()
        with dn.Tape() as tape:
            loss, parts = total_loss(model, g, X, pert, config, seed=derive_seed(eseed, "loss"))
        lc, lt = parts["l_clean"].item(), loss.item()
        if not (np.isfinite(lc) and np.isfinite(lt)):
            raise FloatingPointError(_diagnostic_dump(model, epoch, {"l_clean": lc, "l_total": lt}))
        tape.backward(loss)
        opt.step()
        mean_gate = float(parts["es"].m.data.mean())

        val = float("nan")
        if config.eval_every and (epoch % config.eval_every == 0 or epoch == config.epochs - 1):
            val = validation_accuracy(model, g, X, y, tr, va, config.probe_steps)
            if val > best_val:
                best_val, best_state, since = val, model.state_dict(), 0
                hist.best_epoch = epoch
            else:
                since += config.eval_every
        hist.append(epoch=epoch, l_clean=lc, l_total=lt, j_adv=j_adv, mean_gate=mean_gate, val_acc=val)
        if callback is not None:
            callback(epoch, hist.records[-1])
        if config.eval_every and since > config.patience:
            hist.stopped_early = True
            log.info("early stop at epoch %d (best %d, val %.4f)", epoch, hist.best_epoch, best_val)
            break

    if config.eval_every and np.isfinite(best_val):
        model.load_state_dict(best_state)
        hist.best_val = float(best_val)
    return model, hist
