"""Dual-channel spectral encoder with a node-wise reliability gate."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import diffnet as dn
from .cheb import (FilterBank, LaplacianOperator, chebyshev_terms, coeffs_from_gammas,
                   combine_terms, reconstruct_gammas, spectral_grid)

CHECKPOINT_FORMAT = "aspect-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    in_dim: int
    hidden: int = 64
    out_dim: int = 32
    K: int = 3
    gate_hidden: int = 0          # 0 -> max(out_dim // 2, 16)
    dropout: float = 0.0
    activation: str = "prelu"     # prelu | relu
    batch_norm: bool = False
    global_gate: bool = False     # single fusion scalar shared by every node
    seed: int = 0

    def __post_init__(self):
        if self.activation not in ("prelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.gate_hidden:
            self.gate_hidden = max(self.out_dim // 2, 16)


@dataclass
class EmbeddingSet:
    Z_L: dn.Tensor
    Z_H: dn.Tensor
    m: dn.Tensor        # (N, 1) gate values
    Z: dn.Tensor

    def numpy(self):
        return {k: getattr(self, k).data.copy() for k in ("Z_L", "Z_H", "m", "Z")}


def _glorot(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def fuse(Z_L, Z_H, m):
    """z_v = m_v z_L,v + (1 - m_v) z_H,v, row-wise."""
    md = np.asarray(getattr(m, "data", m))
    if np.any(md < 0) or np.any(md > 1):
        raise ValueError("gate values must lie in [0, 1]")
    if isinstance(Z_L, dn.Tensor) or isinstance(Z_H, dn.Tensor) or isinstance(m, dn.Tensor):
        m = dn.as_tensor(m)
        if m.data.ndim == 1:
            m = dn.reshape(m, (m.shape[0], 1))
        return dn.add(dn.mul(m, Z_L), dn.mul(dn.sub(1.0, m), Z_H))
    md = md.reshape(-1, 1) if md.ndim == 1 else md
    return md * np.asarray(Z_L) + (1.0 - md) * np.asarray(Z_H)


class AspectModel:
    def __init__(self, config):
        self.config = c = config
        rng = np.random.default_rng(c.seed)
        self.bank = FilterBank.init(c.K)

        def P(data, name):
            return dn.Tensor(data, requires_grad=True, name=name)

        self.params = {
            "delta_L": self.bank.delta_L,
            "delta_H": self.bank.delta_H,
            "proj.W1": P(_glorot(rng, c.in_dim, c.hidden), "proj.W1"),
            "proj.b1": P(np.zeros((1, c.hidden)), "proj.b1"),
            "proj.W2": P(_glorot(rng, c.hidden, c.out_dim), "proj.W2"),
            "proj.b2": P(np.zeros((1, c.out_dim)), "proj.b2"),
            "proj.alpha": P(np.array(0.25), "proj.alpha"),
            "gate.W1": P(_glorot(rng, 2 * c.out_dim, c.gate_hidden), "gate.W1"),
            "gate.b1": P(np.zeros((1, c.gate_hidden)), "gate.b1"),
            "gate.W2": P(_glorot(rng, c.gate_hidden, 1), "gate.W2"),
            "gate.b2": P(np.zeros((1, 1)), "gate.b2"),
            "gate.alpha": P(np.array(0.25), "gate.alpha"),
        }
        if c.batch_norm:
            self.params["proj.bn_scale"] = P(np.ones((1, c.hidden)), "proj.bn_scale")
            self.params["proj.bn_shift"] = P(np.zeros((1, c.hidden)), "proj.bn_shift")
        if c.global_gate:
            self.params["gate.global"] = P(np.array(0.0), "gate.global")
        self._grid = spectral_grid(c.K)

    # -- parameter bookkeeping -------------------------------------------------

    def parameters(self):
        return self.params

    def groups(self):
        """Names per optimiser group: filters, encoder (projector), gate."""
        out = {"filters": [], "encoder": [], "gate": []}
        for k in self.params:
            if k.startswith("delta_"):
                out["filters"].append(k)
            elif k.startswith("gate."):
                out["gate"].append(k)
            else:
                out["encoder"].append(k)
        return out

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state mismatch on {sorted(missing)}")
        for k, v in state.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data[...] = v

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- forward ---------------------------------------------------------------

    def filter_coefficients(self):
        gL, gH = reconstruct_gammas(self.bank)
        return coeffs_from_gammas(gL, self._grid), coeffs_from_gammas(gH, self._grid)

    def _act(self, x, alpha):
        if self.config.activation == "relu":
            return dn.relu(x)
        return dn.prelu(x, alpha)

    def project(self, X):
        """The shared projector f_theta (one hidden layer)."""
        p = self.params
        h = dn.add(dn.matmul(X, p["proj.W1"]), p["proj.b1"])
        if self.config.batch_norm:
            mu = dn.mean(h, axis=0, keepdims=True)
            hc = dn.sub(h, mu)
            var = dn.mean(dn.mul(hc, hc), axis=0, keepdims=True)
            h = dn.mul(hc, dn.power(dn.add(var, 1e-5), -0.5))
            h = dn.add(dn.mul(h, p["proj.bn_scale"]), p["proj.bn_shift"])
        h = self._act(h, p["proj.alpha"])
        return dn.add(dn.matmul(h, p["proj.W2"]), p["proj.b2"])

    def gate(self, Z_L, Z_H, logit=None):
        """Return (N, 1) gate values in (0, 1)."""
        p = self.params
        n = Z_L.shape[0]
        if logit is not None:
            return dn.sigmoid(dn.Tensor(np.full((n, 1), float(logit))))
        if self.config.global_gate:
            return dn.mul(dn.Tensor(np.ones((n, 1))), dn.sigmoid(p["gate.global"]))
        h = dn.add(dn.matmul(dn.concat_cols([Z_L, Z_H]), p["gate.W1"]), p["gate.b1"])
        h = self._act(h, p["gate.alpha"])
        return dn.sigmoid(dn.add(dn.matmul(h, p["gate.W2"]), p["gate.b2"]))

    def filtered_views(self, L_op, X):
        wL, wH = self.filter_coefficients()
        terms = chebyshev_terms(L_op, dn.as_tensor(X), self.config.K)
        return combine_terms(terms, wL), combine_terms(terms, wH)

    def encode(self, L_op, X, mode="eval", rng=None, gate_logit=None):
        """Full forward pass.

        ``L_op`` is a :class:`~aspect.cheb.LaplacianOperator` (or a Graph,
        converted on the fly). ``mode="train"`` applies dropout to the
        filtered views using ``rng``. ``gate_logit`` overrides the gate
        pre-activation for every node (test hook; +/-inf allowed).
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if not isinstance(L_op, LaplacianOperator):
            L_op = LaplacianOperator.from_graph(L_op)
        X = dn.as_tensor(X)
        if X.shape[1] != self.config.in_dim:
            raise ValueError(f"feature width {X.shape[1]} != projector input {self.config.in_dim}")
        XL, XH = self.filtered_views(L_op, X)
        p = self.config.dropout
        if mode == "train" and p > 0:
            rng = rng if rng is not None else np.random.default_rng()
            XL = dn.dropout(XL, dn.dropout_mask(rng, XL.shape, p))
            XH = dn.dropout(XH, dn.dropout_mask(rng, XH.shape, p))
        Z_L = self.project(XL)
        Z_H = self.project(XH)
        m = self.gate(Z_L, Z_H, logit=gate_logit)
        return EmbeddingSet(Z_L, Z_H, m, fuse(Z_L, Z_H, m))

    def embed(self, g, X):
        """Eval-mode numpy embeddings."""
        return self.encode(LaplacianOperator.from_graph(g), X).numpy()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, extra=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                   for k, v in sorted(model.state_dict().items())},
    }
    if extra:
        payload["extra"] = extra
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=None, sort_keys=True)


def load_checkpoint(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an ASPECT checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    model = AspectModel(ModelConfig(**payload["config"]))
    state = {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"])
             for k, v in payload["params"].items()}
    model.load_state_dict(state)
    return model
