"""Command-line entry point: ``aspect <subcommand> ...``.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

log = logging.getLogger("aspect")

ABLATIONS = ("none", "no_gate", "no_rayleigh", "no_adversarial")
N_SPLITS = 10


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# manifest


def _sha256_path(path):
    h = hashlib.sha256()
    if os.path.isdir(path):
        for name in sorted(os.listdir(path)):
            full = os.path.join(path, name)
            if os.path.isfile(full):
                h.update(name.encode())
                with open(full, "rb") as fh:
                    h.update(fh.read())
    else:
        with open(path, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


class RunManifest:
    """Written when a run starts and rewritten when it ends."""

    def __init__(self, out_dir, command, args, seed):
        self.path = os.path.join(out_dir, "manifest.json")
        self.t0 = time.time()
        self.data = {"command": command, "args": args, "seed": seed, "config": None,
                     "inputs": {}, "outputs": {}, "status": "running", "wall_time": None}

    def add_input(self, key, path):
        if path and os.path.exists(path):
            self.data["inputs"][key] = {"path": os.path.abspath(path), "sha256": _sha256_path(path)}

    def add_output(self, key, path):
        self.data["outputs"][key] = {"path": os.path.abspath(path), "sha256": _sha256_path(path)}

    def write(self):
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)

    def finish(self, status):
        self.data["status"] = status
        self.data["wall_time"] = round(time.time() - self.t0, 3)
        self.write()


# ---------------------------------------------------------------------------
# helpers


def _config(args, manifest=None):
    from .trainer import TrainConfig, load_config, parse_config_lines

    if getattr(args, "config", None):
        if not os.path.isfile(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        cfg = load_config(args.config)
    else:
        cfg = TrainConfig()
    if getattr(args, "set", None):
        cfg = parse_config_lines(args.set, base=cfg)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "ablation", None):
        cfg = cfg.with_ablation(args.ablation)
    if manifest is not None:
        from dataclasses import asdict
        manifest.data["config"] = asdict(cfg)
        manifest.add_input("config", getattr(args, "config", None))
    return cfg


def _data(path, manifest):
    from .graphcore import load_dataset

    if not path:
        raise UsageError("--data is required")
    if not os.path.isdir(path):
        raise FileNotFoundError(f"dataset directory not found: {path}")
    manifest.add_input("data", path)
    return load_dataset(path)


def _checkpoint(path, manifest):
    from .model import load_checkpoint

    if not os.path.isfile(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    manifest.add_input("checkpoint", path)
    return load_checkpoint(path)


def _splits(bundle, cfg):
    from .graphcore import make_splits
    from .seeds import derive_seed

    return make_splits(bundle.graph.n, N_SPLITS, derive_seed(cfg.seed, "splits"))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, man):
    from .graphcore import generate_mixed_graph, save_dataset
    from .seeds import derive_seed

    seed = 0 if args.seed is None else args.seed
    b = generate_mixed_graph(args.n_hom, args.n_het, classes=args.classes, p_in=args.p_in,
                             p_out=args.p_out, feat_dim=args.feat_dim, noise=args.noise,
                             seed=derive_seed(seed, "synth"))
    save_dataset(b, args.out)
    with open(os.path.join(args.out, "block.csv"), "w") as fh:
        fh.writelines(f"{int(v)}\n" for v in b.meta["block"])
    for name in ("edges.csv", "features.csv", "labels.csv", "block.csv"):
        man.add_output(name, os.path.join(args.out, name))
    print(f"wrote {b.graph.n} nodes, {b.graph.num_edges} edges to {args.out}")


def cmd_train(args, man):
    from .model import save_checkpoint
    from .trainer import build_model, dump_config, train

    cfg = _config(args, man)
    b = _data(args.data, man)
    model = build_model(b.features.shape[1], cfg)
    model, hist = train(model, b, cfg, splits=_splits(b, cfg))
    ck = os.path.join(args.out, "checkpoint.json")
    save_checkpoint(model, ck, extra={"train": {"no_gate": cfg.no_gate}})
    curves = os.path.join(args.out, "curves.csv")
    hist.to_csv(curves)
    cpath = os.path.join(args.out, "config.cfg")
    with open(cpath, "w") as fh:
        fh.write(dump_config(cfg))
    for k, p in (("checkpoint", ck), ("curves", curves), ("config", cpath)):
        man.add_output(k, p)
    print(f"trained {len(hist)} epochs (best epoch {hist.best_epoch}, val {hist.best_val:.4f})")


def cmd_attack(args, man):
    import numpy as np

    from .adversary import (apply_perturbation, dice_attack, pgd_attack, sample_candidates,
                            save_perturbation)
    from .graphcore import DatasetBundle, Graph, save_dataset
    from .seeds import derive_seed

    cfg = _config(args, man)
    b = _data(args.data, man)
    out_data = os.path.join(args.out, "poisoned")
    if args.attack == "dice":
        if args.rate is None:
            raise UsageError("--rate is required for --attack dice")
        g2, stats = dice_attack(b.graph, b.labels, args.rate, seed=derive_seed(cfg.seed, "dice"),
                                return_stats=True)
        X2 = b.features
        print(f"dice: removed {stats['deleted']}, added {stats['added']} edges")
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required for --attack pgd")
        model = _checkpoint(args.checkpoint, man)
        cand = sample_candidates(b.graph, cfg.candidates_per_node, derive_seed(cfg.seed, "candidates"))
        pert = pgd_attack(model, b.graph, b.features, cfg.budget, cand, tau=cfg.tau,
                          frozen_degrees=cfg.frozen_degrees)
        if not np.all(np.isfinite(pert.history)):
            raise FloatingPointError("attack objective became non-finite")
        pdir = os.path.join(args.out, "perturbation")
        save_perturbation(pert, pdir)
        man.add_output("perturbation", pdir)
        g2, X2 = apply_perturbation(b.graph, b.features, pert)
        # the dataset format is unweighted: keep entries that are at least half an edge
        keep = (g2.rows == g2.cols) | (g2.vals >= 0.5)
        g2 = Graph.from_entries(g2.n, g2.rows[keep], g2.cols[keep], np.ones(int(keep.sum())))
        print(f"pgd: J {pert.history[0]:.6g} -> {pert.history[-1]:.6g}, "
              f"|dA|={pert.norm_A:.4g}, |dX|={pert.norm_X:.4g}")
    save_dataset(DatasetBundle(g2, X2, b.labels, name=f"{b.name}-{args.attack}"), out_data)
    man.add_output("poisoned", out_data)


def cmd_eval(args, man):
    import numpy as np

    from .evaluation import linear_probe, drop_percent, write_metrics
    from .graphcore import edge_homophily, local_homophily
    from .trainer import build_model, train

    cfg = _config(args, man)
    b = _data(args.data, man)
    splits = _splits(b, cfg)
    if args.checkpoint:
        model = _checkpoint(args.checkpoint, man)
    else:
        model, _ = train(build_model(b.features.shape[1], cfg), b, cfg, splits=splits)
    Z = model.embed(b.graph, b.features)["Z"]
    if not np.all(np.isfinite(Z)):
        raise FloatingPointError("embeddings contain non-finite values")
    res = linear_probe(Z, b.labels, splits)
    drop = None
    if args.protocol == "poisoned":
        if args.clean_metrics:
            man.add_input("clean_metrics", args.clean_metrics)
            with open(args.clean_metrics) as fh:
                drop = drop_percent(float(json.load(fh)["accuracy_mean"]), res)
        else:
            log.warning("no --clean-metrics given: drop_percent omitted")
    path = os.path.join(args.out, "metrics.json")
    hom = {"edge_homophily": edge_homophily(b.graph, b.labels),
           "node_homophily": float(np.mean(local_homophily(b.graph, b.labels)))}
    write_metrics(path, b.name, args.protocol, res, drop, extra=hom)
    man.add_output("metrics", path)
    msg = f"{args.protocol}: accuracy {100 * res.mean:.2f} +- {100 * res.std:.2f}"
    print(msg + (f", drop {drop:.2f}%" if drop is not None else ""))


def cmd_diagnose(args, man):
    from .adversary import apply_perturbation, pgd_attack, sample_candidates
    from .evaluation import gate_diagnostics, write_gates_csv, write_histogram_csv
    from .graphcore import local_homophily
    from .seeds import derive_seed

    cfg = _config(args, man)
    b = _data(args.data, man)
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    model = _checkpoint(args.checkpoint, man)
    m_clean = model.embed(b.graph, b.features)["m"].ravel()
    cand = sample_candidates(b.graph, cfg.candidates_per_node, derive_seed(cfg.seed, "candidates"))
    pert = pgd_attack(model, b.graph, b.features, cfg.budget, cand, tau=cfg.tau,
                      frozen_degrees=cfg.frozen_degrees)
    g2, X2 = apply_perturbation(b.graph, b.features, pert)
    m_att = model.embed(g2, X2)["m"].ravel()
    h = local_homophily(b.graph, b.labels)
    diag = gate_diagnostics(m_clean, m_att, h)
    gates = os.path.join(args.out, "gates.csv")
    hist = os.path.join(args.out, "gate_histogram.csv")
    summ = os.path.join(args.out, "diagnostics.json")
    write_gates_csv(gates, m_clean, m_att, h)
    write_histogram_csv(hist, diag)
    with open(summ, "w") as fh:
        json.dump({"spearman_m_h": diag.spearman_rho, "mean_shift": diag.mean_shift,
                   "median_shift": diag.median_shift,
                   "bin_means": diag.bin_means.tolist(), "bin_stds": diag.bin_stds.tolist(),
                   "bin_sizes": diag.bin_sizes.tolist()}, fh, indent=2)
    for k, p in (("gates", gates), ("histogram", hist), ("diagnostics", summ)):
        man.add_output(k, p)
    print(f"spearman(m, h) = {diag.spearman_rho:.4f}, mean gate shift = {diag.mean_shift:+.4f}")


def cmd_verify(args, man):
    from .theory import theory_report

    seed = 0 if args.seed is None else args.seed
    rep = theory_report(seed=seed, n_trials=args.trials, n_landscapes=args.landscapes)
    path = os.path.join(args.out, "theory_report.json")
    with open(path, "w") as fh:
        json.dump(rep, fh, indent=2)
    man.add_output("theory_report", path)
    for name, c in rep["claims"].items():
        print(f"{name}: {'pass' if c['pass'] else 'FAIL'}")
    if not rep["all_pass"]:
        raise FloatingPointError("theory verification failed")


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="aspect", description="Adaptive spectral graph contrastive learning toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True, config=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="master seed")
        sp.add_argument("--threads", type=int, default=1)
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        if config:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="config override (repeatable, wins over --config)")
            sp.add_argument("--ablation", choices=ABLATIONS, default=None)

    sp = sub.add_parser("synth", help="generate a two-population mixed graph")
    common(sp, data=False, config=False)
    sp.add_argument("--n-hom", type=int, default=200)
    sp.add_argument("--n-het", type=int, default=200)
    sp.add_argument("--classes", type=int, default=2)
    sp.add_argument("--p-in", type=float, default=0.05)
    sp.add_argument("--p-out", type=float, default=0.01)
    sp.add_argument("--feat-dim", type=int, default=16)
    sp.add_argument("--noise", type=float, default=3.0)

    sp = sub.add_parser("train", help="fit a model; writes checkpoint.json and curves.csv")
    common(sp)

    sp = sub.add_parser("attack", help="PGD or DICE; writes a poisoned dataset")
    common(sp)
    sp.add_argument("--attack", choices=("pgd", "dice"), default="pgd")
    sp.add_argument("--rate", type=float, default=None, help="DICE edge modification rate")
    sp.add_argument("--checkpoint", help="trained model (pgd)")

    sp = sub.add_parser("eval", help="linear-probe evaluation; writes metrics.json")
    common(sp)
    sp.add_argument("--protocol", choices=("clean", "poisoned"), default="clean")
    sp.add_argument("--checkpoint", help="probe this model instead of training one")
    sp.add_argument("--clean-metrics", help="clean metrics.json, for the drop percentage")

    sp = sub.add_parser("diagnose", help="gate diagnostics; writes gates.csv and a histogram")
    common(sp)
    sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("verify", help="numerical theory checks; writes theory_report.json")
    common(sp, data=False, config=False)
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--landscapes", type=int, default=100)
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "attack": cmd_attack, "eval": cmd_eval,
            "diagnose": cmd_diagnose, "verify": cmd_verify}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("aspect: a subcommand is required")
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("aspect: --threads must be >= 1", file=sys.stderr)
        return 1
    if "numpy" not in sys.modules:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    else:
        log.debug("numpy already loaded; --threads not applied to BLAS")

    os.makedirs(args.out, exist_ok=True)
    man = RunManifest(args.out, args.command, argv, args.seed)
    man.write()
    try:
        COMMANDS[args.command](args, man)
    except (FloatingPointError, ArithmeticError) as e:
        man.finish("numerical failure")
        print(f"aspect: numerical failure: {e}", file=sys.stderr)
        return 2
    except (UsageError, FileNotFoundError, ValueError, KeyError) as e:
        man.finish("error")
        print(f"aspect: {e}", file=sys.stderr)
        return 1
    man.finish("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
