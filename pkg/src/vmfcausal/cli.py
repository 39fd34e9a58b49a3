"""
Command-line entry point: ``vmfcausal {gen,train,eval,intervene,bench}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
Every command writes its outputs into ``--out`` plus a ``run_info.json``
holding the only non-reproducible content (timestamp, argv).
"""

import argparse
import contextlib
import dataclasses
import datetime
import json
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics, scm, structure as st
from .config import load_config
from .data import gen_synthetic, read_dataset, write_dataset
from .exceptions import ConfigError
from .model import predict
from .training import (
    empirical_targets,
    init_state,
    load_checkpoint,
    save_checkpoint,
    split_times,
    train,
    write_trace,
)

__all__ = ["main", "cmd_gen", "cmd_train", "cmd_eval", "cmd_intervene", "cmd_bench"]

log = logging.getLogger("vmfcausal")


def _r(x):
    return repr(float(x))


def _write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def _write_run_info(out, argv):
    info = dict(timestamp=datetime.datetime.now(datetime.timezone.utc).isoformat(),
                argv=list(argv), pid=os.getpid())
    with open(os.path.join(out, "run_info.json"), "w", encoding="utf-8") as fh:
        json.dump(info, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _seed(cfg, args):
    return int(args.seed) if args.seed is not None else int(cfg.seed)


def _need(args, name):
    if getattr(args, name) is None:
        raise ConfigError(f"--{name} is required for this command")
    return getattr(args, name)


# ----------------------------------------------------------------------------
# commands


def cmd_gen(cfg, args):
    """Simulate a synthetic dataset with ground truth into ``--out``."""
    spec = dataclasses.replace(cfg.data, seed=_seed(cfg, args))
    data, truth = gen_synthetic(spec)
    write_dataset(args.out, data, truth)
    log.info("wrote N=%d T=%d dataset to %s", data.n_nodes, data.timesteps, args.out)


def cmd_train(cfg, args):
    """Train, then write ``checkpoint.json``, ``trace.csv`` and ``uncertainty.csv``."""
    data, _ = read_dataset(_need(args, "data"))
    tcfg = cfg.train
    if args.checkpoint:
        state, saved = load_checkpoint(args.checkpoint)
        tcfg = saved or tcfg
        if cfg.train.epochs != tcfg.epochs:
            tcfg = dataclasses.replace(tcfg, epochs=cfg.train.epochs)
    else:
        state = init_state(tcfg, data, _seed(cfg, args))
    model, trace = train(tcfg, data, cfg.loss, state=state)
    save_checkpoint(os.path.join(args.out, "checkpoint.json"), state, tcfg)
    write_trace(os.path.join(args.out, "trace.csv"), trace)
    _, val = split_times(data.timesteps, tcfg.val_fraction)
    if val.size:
        out = predict(model, data, val)
        U = empirical_targets(model, data, val, tcfg.window) if val.size > 1 else None
        rows = []
        for a, t in enumerate(val):
            for i in range(data.n_nodes):
                ue = "" if U is None else _r(U[t, i])
                rows.append((int(t), i, _r(out["u_epi"][a, i]), _r(out["u_alea"][a, i]),
                             _r(out["u_total"][a, i]), ue))
        _write_rows(os.path.join(args.out, "uncertainty.csv"),
                    ("t", "node", "u_epi", "u_alea", "u_total", "u_emp"), rows)


def _eval_report(model, data, extras, cfg):
    _, val = split_times(data.timesteps, 0.2 if cfg is None else cfg.train.val_fraction)
    times = val if val.size else np.arange(1, data.timesteps)
    out = predict(model, data, times)
    y = data.targets[times].ravel()
    rows = [("n_items", y.size)]
    bins = None
    if data.task == "regression":
        r = out["pred"].ravel() - y
        rows += [("mse", _r(np.mean(r * r))), ("mae", _r(np.mean(np.abs(r))))]
    else:
        P = out["pred"].reshape(-1, data.n_classes)
        pred = P.argmax(axis=1)
        conf = P.max(axis=1)
        correct = (pred == y.astype(int)).astype(float)
        rows += [("accuracy", _r(correct.mean())),
                 ("macro_f1", _r(metrics.macro_f1(pred, y, data.n_classes)))]
        if data.n_classes == 2 and 0 < y.sum() < y.size:
            rows.append(("auc", _r(metrics.auc(P[:, 1], y))))
        k = cfg.eval.k_bins
        rows.append(("ece", _r(metrics.ece(conf, correct, k))))
        bins = metrics.reliability_bins(conf, correct, k)
    rows += [("mean_u_epi", _r(out["u_epi"].mean())), ("mean_u_alea", _r(out["u_alea"].mean()))]
    if "truth_edges" in extras:
        H = model.encode(data.features)
        truth = [(e.src, e.dst) for e in extras["truth_edges"]]
        top_k = cfg.eval.top_k
        try:
            ranked = st.rank_edges(st.var_init(H))
            rows.append((f"p_at_{top_k}", _r(metrics.precision_at_k(ranked, truth, top_k))))
            base = st.marginal_correlation_ranking(H)
            rows.append((f"p_at_{top_k}_baseline",
                         _r(metrics.precision_at_k(base, truth, top_k))))
        except ValueError as exc:
            log.warning("precision@k skipped: %s", exc)
    return rows, bins, out["kappa"].ravel()


def cmd_eval(cfg, args):
    """Write ``metrics.csv``, ``kappa_hist.csv`` and (classification) ``reliability.csv``."""
    data, extras = read_dataset(_need(args, "data"))
    state, _ = load_checkpoint(_need(args, "checkpoint"))
    rows, bins, kappa = _eval_report(state.model, data, extras, cfg)
    _write_rows(os.path.join(args.out, "metrics.csv"), ("metric", "value"), rows)
    if bins is not None:
        _write_rows(os.path.join(args.out, "reliability.csv"),
                    ("bin_low", "bin_high", "count", "conf", "acc"),
                    [(_r(a), _r(b), c, _r(f), _r(g)) for a, b, c, f, g in bins.rows()])
    counts, edges = np.histogram(kappa, bins=cfg.eval.kappa_bins, range=(1.0, 200.0))
    _write_rows(os.path.join(args.out, "kappa_hist.csv"), ("bin_low", "bin_high", "count"),
                [(_r(edges[k]), _r(edges[k + 1]), int(counts[k])) for k in range(counts.size)])


def build_scm(model, data, sparsity=2, lam="cv-min"):
    """Structural model fitted to the checkpoint's encoder latents.

    Parent sets come from the trained mask, or from a fresh VAR + lasso
    pass when the checkpoint has none.
    """
    H = model.encode(data.features)
    N = data.n_nodes
    if model.has_structure:
        parents = [tuple(int(j) for j in np.flatnonzero(model.mask[i])) for i in range(N)]
        edges = None
    else:
        edges = st.var_init(H)
        if any(e.significant for e in edges):
            cs = st.lasso_refine(H, edges, lam, sparsity)
            parents = [cs.parents[i] for i in range(N)]
        else:
            parents = [()] * N
    W_c = model.params.get("Wc0", np.eye(model.spec.dim))
    Rw = model.params["Rw"]
    w = Rw[0] if Rw.shape[0] == 1 else Rw[-1] - Rw[0]
    return H, parents, edges, W_c, w


def cmd_intervene(cfg, args):
    """Monte Carlo do-intervention on the fitted structural model.

    Writes ``intervention.csv`` (baseline vs interventional entropy),
    ``samples.csv`` and ``identification.csv``.
    """
    data, _ = read_dataset(_need(args, "data"))
    state, tcfg = load_checkpoint(_need(args, "checkpoint"))
    icfg = cfg.intervention
    S = int(args.samples) if args.samples is not None else icfg.n_samples
    horizon = int(args.horizon) if args.horizon is not None else icfg.horizon
    seed = _seed(cfg, args)
    model = state.model
    tc = tcfg or cfg.train
    sparsity = tc.sparsity
    H, parents, edges, W_c, w = build_scm(model, data, sparsity, tc.structure_lam)
    N, T = data.n_nodes, data.timesteps
    outcome = N - 1 if icfg.outcome is None else int(icfg.outcome)
    if not 0 <= outcome < N:
        raise ConfigError(f"intervention.outcome {outcome} out of range")
    # encoder latents are a deterministic function of same-step features, so a
    # feature term would explain them exactly and leave no room for parents
    sm = scm.fit_structural_maps(H, parents, W_c, readout_nodes=[outcome],
                                 readout_w=w[None, :], sparsity_s=sparsity)
    if isinstance(icfg.targets, dict):
        targets = {}
        for k, v in icfg.targets.items():
            v = np.asarray(v, dtype=float)
            if not 0 <= int(k) < N or v.shape != (model.spec.dim,) or not np.linalg.norm(v) > 0:
                raise ConfigError(f"intervention target {k}: need a node id in range and "
                                  f"a nonzero vector of length {model.spec.dim}")
            targets[int(k)] = v / np.linalg.norm(v)
    else:
        targets = {}
        for j in icfg.targets:
            j = int(j)
            if not 0 <= j < N:
                raise ConfigError(f"intervention target {j} out of range")
            if icfg.value == "flip":
                m = H[:, j, :].mean(axis=0)
                targets[j] = -m / np.linalg.norm(m)
            else:
                targets[j] = np.eye(model.spec.dim)[0]
    if horizon >= T:
        raise ConfigError("horizon must be shorter than the series")
    t0 = T - horizon - 1
    init = H[t0]
    base_spec = scm.InterventionSpec({}, 1, horizon, S, icfg.mode)
    do_spec = scm.InterventionSpec(targets, 1, horizon, S, icfg.mode)
    # common random numbers: identical seeds isolate the effect of the pin
    y0 = scm.intervene(sm, base_spec, init, None, rng_seed=seed)
    y1 = scm.intervene(sm, do_spec, init, None, rng_seed=seed)
    h0, f0 = scm.causal_entropy(y0, icfg.entropy, return_flag=True)
    h1, f1 = scm.causal_entropy(y1, icfg.entropy, return_flag=True)
    anc = scm.ancestors(sm, outcome)
    rows = [("n_samples", S), ("horizon", horizon), ("outcome_node", outcome),
            ("targets", " ".join(str(k) for k in sorted(targets))),
            ("targets_are_ancestors", int(any(k in anc or k == outcome for k in targets))),
            ("h_causal", _r(h1)), ("h_baseline", _r(h0)),
            ("mean_intervened", _r(y1.mean())), ("mean_baseline", _r(y0.mean())),
            ("var_intervened", _r(np.var(y1, ddof=1))), ("var_baseline", _r(np.var(y0, ddof=1))),
            ("variance_floor_hit", int(f1)), ("variance_floor_hit_baseline", int(f0)),
            ("noise_kappa", _r(sm.noise_kappa)), ("entropy_method", icfg.entropy)]
    _write_rows(os.path.join(args.out, "intervention.csv"), ("quantity", "value"), rows)
    _write_rows(os.path.join(args.out, "samples.csv"), ("sample", "baseline", "intervened"),
                [(k, _r(a), _r(b)) for k, (a, b) in enumerate(zip(y0, y1))])
    if edges is None:
        edges = st.var_init(H)
    rep = scm.identification_confidence(H, edges, s=sparsity)
    id_rows = [(i, " ".join(map(str, p.candidates[0][0])), _r(p.map_confidence))
               for i, p in sorted(rep.per_node.items())]
    id_rows.append(("overall", "", _r(rep.overall)))
    _write_rows(os.path.join(args.out, "identification.csv"),
                ("node", "map_parents", "confidence"), id_rows)


def cmd_bench(cfg, args):
    """Timing and stability benchmarks into ``bench_*.csv``."""
    from . import bench

    seed = _seed(cfg, args)
    res_s, res_t = bench.bench_intervention_scaling(seed=seed)
    bench.write_results(os.path.join(args.out, "bench_scaling.csv"), [res_s, res_t])
    table = bench.bench_vmf_stability()
    bench.write_stability(os.path.join(args.out, "bench_stability.csv"), table)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "intervene": cmd_intervene, "bench": cmd_bench}


def build_parser():
    p = argparse.ArgumentParser(prog="vmfcausal", description=__doc__.strip().splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--samples", type=int, help="Monte Carlo samples (intervene)")
    p.add_argument("--horizon", type=int, help="intervention horizon (intervene)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS for bit-reproducible output")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        limits = threadpool_limits(1) if args.deterministic else contextlib.nullcontext()
        with limits:
            COMMANDS[args.command](cfg, args)
        _write_run_info(args.out, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level failure report
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
