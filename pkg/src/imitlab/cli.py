"""Command-line entry point: ``python -m imitlab <subcommand>``.

Outputs go under ``$IMITLAB_OUT`` (default ``./runs``) unless a path is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import envs, harness
from .active import ActiveLearningConfig, collect_dart, collect_passive, collect_rand_on_policy, run_active_learning
from .control import ControllerConfig, FailureMonitorConfig, run_episodes
from .failure import evaluate_failure_prediction
from .models import DemoDataset, TrainConfig, bundle_from_dict, bundle_to_dict, train_all
from .numkit import Batch, gradcheck, init_mlp, make_rng
from .uncertainty import calibrate_threshold


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _out(path: str | None, default: str) -> Path:
    p = Path(path) if path else harness.output_root() / default
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    print(f"wrote {path}")


def _base_config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.load(args.config) if args.config else harness.ExperimentConfig()
    over = {}
    for name in ("env_kind", "method", "controller", "test_set_size", "n_seeds", "master_seed"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    cfg = replace(cfg, **over)
    al = {}
    for flag, fld in (("n_total", "n_total"), ("gamma", "active_ratio"), ("mu", "retrain_every"), ("u_thr_mult", "u_thr_mult")):
        v = getattr(args, flag, None)
        if v is not None:
            al[fld] = v
    if al:
        cfg = replace(cfg, active=replace(cfg.active, **al))
    if getattr(args, "beta", None) is not None:
        cfg = replace(cfg, control=replace(cfg.control, beta=args.beta))
    return cfg


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON; flags below override its fields")
    p.add_argument("--env", dest="env_kind", choices=envs.ENV_KINDS)
    p.add_argument("--method", choices=harness.METHODS)
    p.add_argument("--controller", choices=("bc_only", "hybrid"))
    p.add_argument("--n-total", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--mu", type=int)
    p.add_argument("--u-thr-mult", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--test-set-size", type=int)
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--master-seed", type=int)


def cmd_collect(args) -> int:
    tcfg = TrainConfig().with_seed(args.seed)
    log = None
    if args.method == "PL":
        ds = collect_passive(args.env, args.n, make_rng(args.seed, 1))
    elif args.method == "DART":
        ds = collect_dart(args.env, args.n, args.noise, make_rng(args.seed, 4))
    else:
        cfg = ActiveLearningConfig(args.n, args.gamma, args.mu, args.u_thr_mult, seed=args.seed)
        collect = run_active_learning if args.method == "AL" else collect_rand_on_policy
        res = collect(args.env, cfg, tcfg)
        ds, log = res.dataset, res.log
    out = _out(args.out, f"data/{args.env}_{args.method}_{args.seed}.jsonl")
    _write(out, ds.dumps(args.env))
    if log is not None:
        _write(out.with_suffix(".log.json"), json.dumps(log.to_dict(), indent=2) + "\n")
    return 0


def cmd_train(args) -> int:
    ds = DemoDataset.loads(Path(args.data).read_text())
    bundle = train_all(ds, TrainConfig().with_seed(args.seed))
    out = _out(args.out, f"models/{Path(args.data).stem}.json")
    _write(out, json.dumps(bundle_to_dict(bundle)) + "\n")
    return 0


def cmd_eval(args) -> int:
    models = bundle_from_dict(json.loads(Path(args.models).read_text()))
    test = harness.test_instances(args.env, args.master_seed, args.seed_index, args.test_set_size)
    ccfg = ControllerConfig(beta=args.beta)
    eps = run_episodes(args.env, test, args.controller, models, ccfg, None, args.seed_index)
    energy = [x for e in eps for x in e.energy_trace]
    result = {
        "successes": sum(e.success for e in eps),
        "test_set_size": len(eps),
        "mean_energy": float(np.mean(energy)) if energy else None,
    }
    if args.monitor_steps is not None:
        if not args.data:
            raise SystemExit("--monitor-steps needs --data to calibrate the threshold")
        ds = DemoDataset.loads(Path(args.data).read_text())
        thr = calibrate_threshold(models.dae, ds, args.u_thr_mult)
        rep = evaluate_failure_prediction(
            args.env, test, models, [FailureMonitorConfig(thr, args.monitor_steps)], args.controller, ccfg, args.seed_index
        )[0]
        result["failure"] = rep.to_dict()
    print(json.dumps(result, indent=2))
    return 0


def cmd_run(args) -> int:
    cfg = _base_config(args)
    if cfg.output_path is None:
        cfg = replace(cfg, output_path=str(harness.output_root() / f"{cfg.env_kind}_{cfg.method}_{cfg.controller}"))
    t0 = time.time()
    rep = harness.run_experiment(cfg)
    print(rep.metrics_csv(), end="")
    print(f"saved to {cfg.output_path} ({time.time() - t0:.0f}s)")
    return 1 if any(s.error for s in rep.seeds) else 0


def cmd_compare(args) -> int:
    a = harness.ExperimentReport.load(args.report_a)
    b = harness.ExperimentReport.load(args.report_b)
    table = harness.compare(a, b)
    print(table.to_csv(), end="")
    print(table.summary())
    return 0


def cmd_sweep_gamma(args) -> int:
    rows = harness.sweep_gamma(_base_config(args), _floats(args.gammas))
    text = harness.rows_to_csv(rows, harness.GAMMA_FIELDS)
    print(text, end="")
    if args.out:
        _write(Path(args.out), text)
    return 0


def cmd_sweep_uthr(args) -> int:
    sweep = harness.sweep_uthr(_base_config(args), _floats(args.mults))
    text = sweep.to_csv()
    print(text, end="")
    if args.out:
        _write(Path(args.out), text)
    return 0


def cmd_sweep_imagination(args) -> int:
    rows = harness.sweep_imagination(
        args.env, args.n_demos, _ints(args.steps), args.u_thr_mult, args.test_set_size, args.master_seed, args.n_seeds
    )
    text = harness.rows_to_csv(rows, harness.IMAGINATION_FIELDS)
    print(text, end="")
    if args.out:
        _write(Path(args.out), text)
    return 0


def cmd_gradcheck(args) -> int:
    rng = make_rng(args.seed)
    worst = 0.0
    t0 = time.time()
    for i in range(args.n):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 9)) for _ in range(depth + 1)]
        act = ("tanh", "relu", "identity")[i % 3]
        params = init_mlp(sizes, rng, act)
        n = int(rng.integers(1, 9))
        batch = Batch(rng.standard_normal((n, sizes[0])), rng.standard_normal((n, sizes[-1])))
        err = gradcheck(params, batch)
        worst = max(worst, err)
        print(f"{i:2d} sizes={sizes} act={act} batch={n} rel_err={err:.2e}")
    ok = worst < args.tol
    print(f"worst {worst:.2e} ({'ok' if ok else 'FAIL'}) in {time.time() - t0:.2f}s")
    return 0 if ok else 1


def cmd_selftest(args) -> int:
    """Fast exact checks; exits nonzero if any fails."""
    from .models import dae_error
    from .uncertainty import unc_rollout

    failures = []

    def check(name: str, ok: bool) -> None:
        print(f"{'PASS' if ok else 'FAIL'} {name}")
        if not ok:
            failures.append(name)

    rng = make_rng(0)
    worst = max(
        gradcheck(init_mlp([3, 5, 2], rng, act), Batch(rng.standard_normal((4, 3)), rng.standard_normal((4, 2))))
        for act in ("tanh", "relu", "identity")
    )
    check("gradient check", worst < 1e-4)

    kind = envs.POINT_REACH
    ds = collect_passive(kind, 6, make_rng(0, 1))
    small = TrainConfig().with_seed(0)
    small = replace(
        small,
        policy=replace(small.policy, epochs=5),
        dynamics=replace(small.dynamics, epochs=5),
        dae=replace(small.dae, epochs=5),
    )
    models = train_all(ds, small)
    s = ds.trajectories[0].observations[0]
    check("one-step imagination equals reconstruction error", unc_rollout(s, models.policy, models.dynamics, models.dae, 1).value == dae_error(models.dae, s))

    test = envs.sample_instances(make_rng(1), 3, kind)
    bc = run_episodes(kind, test, "bc_only", models, keep_observations=True)
    hy = run_episodes(kind, test, "hybrid", models, ControllerConfig(beta=0.0), keep_observations=True)
    check("beta=0 hybrid matches behaviour cloning", all(np.array_equal(a.observations, b.observations) for a, b in zip(bc, hy)))

    expert = run_episodes(kind, envs.sample_instances(make_rng(2), 20, kind), "expert")
    check("expert solves every instance", all(e.success for e in expert))
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imitlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", help="collect a demonstration dataset")
    c.add_argument("--method", choices=harness.METHODS, default="PL")
    c.add_argument("--env", choices=envs.ENV_KINDS, default=envs.PUSH_BLOCK)
    c.add_argument("--n", type=int, default=40)
    c.add_argument("--gamma", type=float, default=0.5)
    c.add_argument("--mu", type=int, default=5)
    c.add_argument("--u-thr-mult", type=float, default=1.5)
    c.add_argument("--noise", type=float, default=0.01, help="DART action-noise std")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(fn=cmd_collect)

    t = sub.add_parser("train", help="train policy, dynamics and DAE on a dataset")
    t.add_argument("data")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained model bundle on a seed-derived test set")
    e.add_argument("models")
    e.add_argument("--env", choices=envs.ENV_KINDS, default=envs.PUSH_BLOCK)
    e.add_argument("--controller", choices=("bc_only", "hybrid"), default="bc_only")
    e.add_argument("--beta", type=float, default=0.2)
    e.add_argument("--test-set-size", type=int, default=50)
    e.add_argument("--master-seed", type=int, default=0)
    e.add_argument("--seed-index", type=int, default=0)
    e.add_argument("--monitor-steps", type=int, help="enable the failure monitor with this imagination length")
    e.add_argument("--u-thr-mult", type=float, default=1.5)
    e.add_argument("--data", help="training dataset, used to calibrate the monitor threshold")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("run", help="full experiment: collect, train and evaluate for every seed")
    _add_experiment_flags(r)
    r.set_defaults(fn=cmd_run)

    cp = sub.add_parser("compare", help="per-seed win/loss/tie table of two reports")
    cp.add_argument("report_a")
    cp.add_argument("report_b")
    cp.set_defaults(fn=cmd_compare)

    g = sub.add_parser("sweep-gamma", help="AL success vs active-demo ratio")
    _add_experiment_flags(g)
    g.add_argument("--gammas", default="0.5,0.75,0.8")
    g.add_argument("--out")
    g.set_defaults(fn=cmd_sweep_gamma)

    u = sub.add_parser("sweep-uthr", help="AL vs PL across threshold multipliers")
    _add_experiment_flags(u)
    u.add_argument("--mults", default="1.1,1.5,2,3")
    u.add_argument("--out")
    u.set_defaults(fn=cmd_sweep_uthr)

    im = sub.add_parser("sweep-imagination", help="failure-prediction F1 and lead time vs imagination length")
    im.add_argument("--env", choices=envs.ENV_KINDS, default=envs.PUSH_BLOCK)
    im.add_argument("--n-demos", type=int, default=20)
    im.add_argument("--steps", default="0,1,5,10")
    im.add_argument("--u-thr-mult", type=float, default=1.5)
    im.add_argument("--test-set-size", type=int, default=50)
    im.add_argument("--master-seed", type=int, default=0)
    im.add_argument("--n-seeds", type=int, default=1)
    im.add_argument("--out")
    im.set_defaults(fn=cmd_sweep_imagination)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the MLP gradients")
    gc.add_argument("--n", type=int, default=20)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(fn=cmd_gradcheck)

    st = sub.add_parser("selftest", help="quick exact checks; nonzero exit on failure")
    st.set_defaults(fn=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
