"""Command-line front end: ``sgrpf simulate|filter|gradcheck|train|bench``.

Every command writes ``manifest.json`` into ``--out-dir`` before doing any
work.  ``--config FILE`` reads a JSON object of flag values (or a previous
manifest) and explicit flags override it.

Exit codes: 0 ok, 2 usage, 3 numeric failure, 4 training divergence.
"""

import argparse
import datetime
import gc
import json
import logging
import math
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__, _accel
from . import adcore as ad
from . import estimators as est
from . import learning
from ._io import dumps, fmt, write_csv, write_json
from .filters import FilterConfig, FilterError, canonical_variant, logzhat_gradient, run_filter, zhat_gradient
from .ssm import Dataset, LGSSM, get_model, kalman_loglik, simulate

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_DIVERGED = 0, 2, 3, 4
CHUNK = 20000

log = logging.getLogger("sgrpf")


class UsageError(Exception):
    pass


def _default_seed():
    raw = os.environ.get("SGRPF_SEED")
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"SGRPF_SEED must be an integer, got {raw!r}") from None


def _floats(text):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--config", help="JSON file of flag values (flags override it)")
    p.add_argument("--out-dir", default=".", help="directory for outputs and manifest.json")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (default: $SGRPF_SEED or 0)")
    p.add_argument("-v", "--verbose", action="store_true")


def _filter_flags(p, variant="dpf-sgr"):
    p.add_argument("--data", help="dataset CSV (t,y); simulated when omitted")
    p.add_argument("--model", choices=["lgssm", "sv"], default=None)
    p.add_argument("--theta", help="comma-separated parameters (default: generating values)")
    p.add_argument("--t", type=int, default=None, help="length of simulated data when --data is omitted")
    p.add_argument("--variant", default=variant)
    p.add_argument("--n", type=int, default=10, help="number of particles")
    p.add_argument("--scheme", choices=["multinomial", "stratified", "systematic"], default="systematic")
    p.add_argument("--ess-threshold", type=float, default=1.0, help="resample when ESS < value*N (1 = always)")
    p.add_argument("--proposal", choices=["bootstrap", "learned", "reparam"], default="bootstrap")


def build_parser():
    parser = argparse.ArgumentParser(prog="sgrpf", description="Differentiable particle filters with stop-gradient resampling.")
    parser.add_argument("--version", action="version", version=f"sgrpf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="sample a synthetic dataset")
    _common(p)
    p.add_argument("--model", choices=["lgssm", "sv"], default="lgssm")
    p.add_argument("--theta", help="comma-separated parameters")
    p.add_argument("--t", type=int, default=100)
    p.add_argument("--output", default="data.csv", help="CSV path (relative to --out-dir)")

    p = sub.add_parser("filter", help="run a particle filter and report log Z")
    _common(p)
    _filter_flags(p)
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--oracle", choices=["kalman"], default=None)
    p.add_argument("--output", default="filter.json")

    p = sub.add_parser("gradcheck", help="compare AD gradients with oracle estimators over seeds")
    _common(p)
    _filter_flags(p)
    p.add_argument("--pair", default="ad-dpf:fisher", help=f"one of {', '.join(PAIRS)}")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--output", default="gradcheck.csv")

    p = sub.add_parser("train", help="learn parameters by gradient ascent on log Z")
    _common(p)
    _filter_flags(p)
    p.add_argument("--test-data", help="held-out dataset CSV")
    p.add_argument("--theta0", help="initial parameters")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--estimator", choices=list(learning.ESTIMATORS), default="ad")
    p.add_argument("--seeds", type=int, default=1, help="independent training replicates")
    p.add_argument("--fixed-noise", action="store_true", help="reuse the same filter randomness every epoch")
    p.add_argument("--test-every", type=int, default=10, help="epochs between held-out log Z evaluations")
    p.add_argument("--test-replicates", type=int, default=10, help="filter runs averaged per held-out evaluation")
    p.add_argument("--output", default="trace.csv")

    p = sub.add_parser("bench", help="time forward+backward passes per variant")
    _common(p)
    p.add_argument("--model", choices=["lgssm", "sv"], default="sv")
    p.add_argument("--n", type=int, default=25)
    p.add_argument("--t", type=int, default=100)
    p.add_argument("--variants", default="sis,pf,pf-sf,dpf-sgr")
    p.add_argument("--ess-threshold", type=float, default=0.5)
    p.add_argument("--reps", type=int, default=25)
    p.add_argument("--mpf-n", default="16,64", help="particle counts for the marginal-filter scaling check")
    p.add_argument("--mpf-t", type=int, default=5)
    p.add_argument("--max-overhead", type=float, default=0.25)
    p.add_argument("--no-assert", action="store_true")
    p.add_argument("--backend", choices=["numba", "numpy"], default=None)
    p.add_argument("--output", default="bench.csv")
    return parser, sub


def _parse(argv):
    parser, sub = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read --config: {exc}")
        if isinstance(cfg, dict) and "config" in cfg and "command" in cfg:
            cfg = cfg["config"]
        if not isinstance(cfg, dict):
            parser.error("--config must hold a JSON object")
        subparser = sub.choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            parser.error(f"unknown keys in --config: {', '.join(unknown)}")
        cfg = {k: v for k, v in cfg.items() if k not in ("config", "out_dir", "command")}
        subparser.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return parser, args


def _manifest(args, artifacts):
    config = {k: v for k, v in vars(args).items() if k not in ("config", "out_dir", "verbose", "command")}
    return {
        "command": args.command,
        "config": config,
        "artifacts": artifacts,
        "version": __version__,
        "backend": _accel.backend(),
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }


def _out(args, name):
    return os.path.join(args.out_dir, name)


# ---------------------------------------------------------------------------
# shared setup


def _load_data(args):
    """Dataset, model and parameters for commands that filter."""
    if args.data:
        try:
            data = Dataset.load(args.data)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read dataset: {exc}") from None
        model_name = args.model or data.model or "lgssm"
    else:
        model_name = args.model or "lgssm"
        t = args.t if args.t is not None else 10
        if t < 1:
            raise UsageError("--t must be >= 1")
        model = get_model(model_name)
        data = simulate(model, model.true_theta, t, args.seed)
    model = get_model(model_name)
    theta = _floats(args.theta) or (data.theta if data.theta else list(model.true_theta))
    if len(theta) != model.dim_theta:
        raise UsageError(f"--theta needs {model.dim_theta} values for {model_name}")
    if args.t is not None and args.data and args.t < len(data):
        data = data.prefix(args.t)
    return data, model, theta


def _filter_config(args, **overrides):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    try:
        cfg = FilterConfig(
            variant=canonical_variant(args.variant),
            n_particles=args.n,
            scheme=args.scheme,
            ess_threshold=args.ess_threshold,
            seed=args.seed,
            proposal=args.proposal,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return replace(cfg, **overrides)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    if args.t < 1:
        raise UsageError("--t must be >= 1")
    model = get_model(args.model)
    theta = _floats(args.theta) or list(model.true_theta)
    if len(theta) != model.dim_theta:
        raise UsageError(f"--theta needs {model.dim_theta} values for {args.model}")
    path = _out(args, args.output)
    write_json(_out(args, "manifest.json"), _manifest(args, [path, os.path.splitext(path)[0] + ".json"]))
    try:
        data = simulate(model, theta, args.t, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    data.save(path)
    print(f"wrote {data.t_count} observations to {path}")
    return EXIT_OK


def _replicate_logz(model, data, theta, cfg, replicates):
    chunks = []
    for lane0 in range(0, replicates, CHUNK):
        lanes = min(CHUNK, replicates - lane0)
        run = run_filter(model, data, theta, replace(cfg, lanes=lanes, lane0=lane0))
        chunks.append(run.logZ_value.copy())
    return np.concatenate(chunks)


def cmd_filter(args):
    data, model, theta = _load_data(args)
    if args.replicates < 1:
        raise UsageError("--replicates must be >= 1")
    cfg = _filter_config(args)
    path = _out(args, args.output)
    write_json(_out(args, "manifest.json"), _manifest(args, [path]))
    run = run_filter(model, data, theta, cfg)
    result = {
        "variant": cfg.variant,
        "n_particles": cfg.n_particles,
        "T": int(data.t_count),
        "seed": cfg.seed,
        "theta": theta,
        "logZhat": float(run.logZ_value[0]),
        "logW": run.logW_values[:, 0].tolist(),
        "ess": run.ess_trace[:, 0].tolist(),
        "resample_count": int(run.resample_count[0]),
    }
    if args.replicates > 1:
        vals = _replicate_logz(model, data, theta, cfg, args.replicates)
        z = np.exp(vals)
        r = args.replicates
        result.update(
            replicates=r,
            mean_logZhat=float(vals.mean()),
            se_logZhat=float(vals.std(ddof=1) / math.sqrt(r)),
            mean_Zhat=float(z.mean()),
            se_Zhat=float(z.std(ddof=1) / math.sqrt(r)),
        )
    if args.oracle == "kalman":
        if not isinstance(model, LGSSM):
            raise UsageError("--oracle kalman needs the lgssm model")
        ll = kalman_loglik(model, data.y, theta)
        result.update(kalman_loglik=ll, kalman_Z=math.exp(ll))
    write_json(path, result)
    print(dumps(result), end="")
    return EXIT_OK


def _rel_diff(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b))), float(np.max(np.abs(a))), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def _pair_ad_fisher(model, data, theta, cfg):
    run = run_filter(model, data, theta, replace(cfg, variant="dpf_sgr"))
    return logzhat_gradient(run), est.fisher_score(run).value


def _pair_ad_fisher_phi(model, data, theta, cfg):
    run = run_filter(model, data, theta, replace(cfg, variant="dpf_sgr", proposal="learned"))
    return logzhat_gradient(run, "phi"), est.fisher_score(run, "phi").value


def _pair_ad_alpha(model, data, theta, cfg):
    run = run_filter(model, data, theta, replace(cfg, variant="dpf2", proposal="bootstrap"))
    return logzhat_gradient(run), est.alpha_recursion_score(run).value


def _pair_alpha_forms(model, data, theta, cfg):
    run = run_filter(model, data, theta, replace(cfg, variant="dpf2", proposal="bootstrap"))
    return est.alpha_recursion_score(run, "joint").value, est.alpha_recursion_score(run, "transition").value


def _pair_louis(model, data, theta, cfg):
    run = run_filter(model, data, theta, replace(cfg, variant="dpf_sgr"))
    return ad.hessian_values(run.logZhat, run.theta), est.louis_hessian(run).value


def _pair_backward(model, data, theta, cfg):
    run = run_filter(model, data, theta, replace(cfg, variant="dpf_sgr", ess_threshold=1.0))
    return zhat_gradient(run), est.explicit_backward_gradient(run).value


def _expect_pair(variant, node_key, oracle_key):
    def pair(model, data, theta, cfg):
        run = run_filter(model, data, theta, replace(cfg, variant=variant, ess_threshold=1.0, proposal="bootstrap"))
        nodes = est.expectation_nodes(run)
        return ad.grad_values(nodes[node_key], run.theta), est.posterior_expectation(run)[oracle_key]

    return pair


def _pair_iwae(model, data, theta, cfg):
    out = est.iwae_gradient(model, float(data.y[0]), theta, cfg.n_particles, cfg.seed)
    return out["stop_path"], out["oracle"]


PAIRS = {
    "ad-dpf:fisher": _pair_ad_fisher,
    "ad-dpf-phi:fisher-phi": _pair_ad_fisher_phi,
    "ad-dpf2:alpha": _pair_ad_alpha,
    "alpha-joint:alpha-transition": _pair_alpha_forms,
    "ad2-dpf:louis": _pair_louis,
    "ad-zdpf:backward": _pair_backward,
    "ad-dpf:expect-dpf": _expect_pair("dpf_sgr", "fbar", "expect_dpf"),
    "ad-zdpf:dpf-unbiased": _expect_pair("dpf_sgr", "unbiased", "dpf_unbiased"),
    "ad-pf:expect-pf": _expect_pair("pf", "dice", "expect_pf"),
    "ad-zpf:pf-unbiased": _expect_pair("pf", "dice_unbiased", "pf_unbiased"),
    "ad-iwae:iwae": _pair_iwae,
}


def cmd_gradcheck(args):
    if args.pair not in PAIRS:
        raise UsageError(f"unknown estimator pair {args.pair!r}; choose from {', '.join(PAIRS)}")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    data, model, theta = _load_data(args)
    base = _filter_config(args)
    path = _out(args, args.output)
    write_json(_out(args, "manifest.json"), _manifest(args, [path]))
    name_a, name_b = args.pair.split(":")
    rows = []
    ok = True
    for s in range(args.seed, args.seed + args.seeds):
        a, b = PAIRS[args.pair](model, data, theta, replace(base, seed=s))
        diff = _rel_diff(a, b)
        passed = bool(diff < args.tol)
        ok &= passed
        rows.append([s, name_a, name_b, diff, str(passed).lower()])
    write_csv(path, ["seed", "estimator_a", "estimator_b", "max_rel_diff", "pass"], rows)
    worst = max(r[3] for r in rows)
    print(f"{args.pair}: {sum(r[4] == 'true' for r in rows)}/{len(rows)} seeds pass, worst max_rel_diff {fmt(worst)}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_train(args):
    data, model, theta_true = _load_data(args)
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    if args.lr < 0:
        raise UsageError("--lr must be non-negative")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    if args.test_every < 1 or args.test_replicates < 1:
        raise UsageError("--test-every and --test-replicates must be >= 1")
    test = None
    if args.test_data:
        try:
            test = Dataset.load(args.test_data)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read test dataset: {exc}") from None
    theta0 = _floats(args.theta0) or list(theta_true)
    if len(theta0) != model.dim_theta:
        raise UsageError(f"--theta0 needs {model.dim_theta} values")
    cfg = _filter_config(args, lanes=args.seeds)
    stem, ext = os.path.splitext(args.output)
    paths = [_out(args, args.output)] if args.seeds == 1 else [_out(args, f"{stem}_seed{k}{ext}") for k in range(args.seeds)]
    write_json(_out(args, "manifest.json"), _manifest(args, paths))
    opt = learning.OptimizerState(args.optimizer, args.lr)
    code = EXIT_OK
    try:
        trace = learning.train(
            model,
            data,
            cfg,
            opt,
            args.epochs,
            theta0,
            test,
            args.estimator,
            theta_true,
            args.fixed_noise,
            test_replicates=args.test_replicates,
            test_every=args.test_every,
        )
    except learning.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        trace = exc.trace
        code = EXIT_DIVERGED
    for k, path in enumerate(paths):
        trace.write_csv(path, lane=k)
    if trace.final_theta is not None:
        for k in range(args.seeds):
            final = trace.final_theta[:, k]
            l1 = float(np.sum(np.abs(final - np.asarray(theta_true))))
            line = f"replicate {k}: theta = {', '.join(fmt(v) for v in final)}; L1 error = {fmt(l1)}"
            if trace.final_phi is not None:
                line += f"; phi = {', '.join(fmt(v) for v in trace.final_phi[:, k])}"
            print(line)
    return code


def _one_pass(model, data, theta, cfg):
    t0 = time.perf_counter()
    run = run_filter(model, data, theta, cfg)
    ad.grad_values(run.objective, run.theta)
    return time.perf_counter() - t0


def _time_interleaved(model, data, theta, cfgs, reps):
    """Median forward+backward seconds per config.

    Configs are timed round-robin so slow drift hits all of them alike, and
    the garbage collector is paused while timing, as ``timeit`` does.
    """
    for cfg in cfgs:  # warm caches and compiled kernels
        _one_pass(model, data, theta, cfg)
    times = [[] for _ in cfgs]
    enabled = gc.isenabled()
    gc.disable()
    try:
        for r in range(reps):
            for k, cfg in enumerate(cfgs):
                times[k].append(_one_pass(model, data, theta, replace(cfg, seed=cfg.seed + r + 1)))
                gc.collect()
    finally:
        if enabled:
            gc.enable()
    return [(float(np.median(t)), float(np.std(t))) for t in times]


def run_bench(model_name, n, t, variants, ess_threshold, reps, mpf_n, mpf_t, seed):
    model = get_model(model_name)
    data = simulate(model, model.true_theta, t, seed)
    theta = list(model.true_theta)
    cfgs = [FilterConfig(variant=v, n_particles=n, ess_threshold=ess_threshold, seed=seed) for v in variants]
    rows = []
    base = {}
    for cfg, (med, sd) in zip(cfgs, _time_interleaved(model, data, theta, cfgs, reps)):
        base[cfg.variant] = med
        rows.append([cfg.variant, n, t, med, sd])
    short = data.prefix(mpf_t)
    mcfgs = [FilterConfig(variant="mpf", n_particles=m, seed=seed) for m in mpf_n]
    mpf_times = {}
    for cfg, (med, sd) in zip(mcfgs, _time_interleaved(model, short, theta, mcfgs, max(1, reps // 2))):
        mpf_times[cfg.n_particles] = med
        rows.append(["mpf", cfg.n_particles, mpf_t, med, sd])
    pf = base.get("pf")
    out = [r + [r[3] / pf if pf and r[0] != "mpf" else float("nan")] for r in rows]
    return out, base, mpf_times


def cmd_bench(args):
    variants = [canonical_variant(v) for v in args.variants.split(",") if v.strip()]
    mpf_n = _ints(args.mpf_n)
    path = _out(args, args.output)
    write_json(_out(args, "manifest.json"), _manifest(args, [path]))
    if args.backend:
        with _accel.forced_backend(args.backend):
            rows, base, mpf_times = run_bench(args.model, args.n, args.t, variants, args.ess_threshold, args.reps, mpf_n, args.mpf_t, args.seed)
    else:
        rows, base, mpf_times = run_bench(args.model, args.n, args.t, variants, args.ess_threshold, args.reps, mpf_n, args.mpf_t, args.seed)
    write_csv(path, ["variant", "n", "t", "median_seconds", "sd_seconds", "ratio_to_pf"], rows)
    for r in rows:
        print(f"{r[0]:>8} N={r[1]:<4} T={r[2]:<4} {r[3]:.4f}s +- {r[4]:.4f}s")
    code = EXIT_OK
    if "dpf_sgr" in base and "pf" in base:
        ratio = base["dpf_sgr"] / base["pf"]
        print(f"dpf_sgr / pf = {ratio:.3f}")
        if ratio >= 1.0 + args.max_overhead and not args.no_assert:
            print(f"DPF-SGR overhead {ratio - 1:.1%} exceeds {args.max_overhead:.0%}", file=sys.stderr)
            code = EXIT_NUMERIC
    if len(mpf_n) >= 2:
        lo, hi = min(mpf_n), max(mpf_n)
        print(f"mpf t(N={hi}) / t(N={lo}) = {mpf_times[hi] / mpf_times[lo]:.2f}")
    return code


COMMANDS = {
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "bench": cmd_bench,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        parser, args = _parse(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is None:
            args.seed = _default_seed()
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        os.makedirs(args.out_dir, exist_ok=True)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sgrpf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FilterError as exc:
        print(f"sgrpf {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
