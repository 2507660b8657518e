"""Command-line entry points.

Exit codes: 0 success, 2 config error, 3 transport error, 4 starvation or
partial failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

from flmm.errors import ConfigError, FlmmError, StarvationError, TransportError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="flmm",
                                     description="Federated adapter-fusion simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gendata", help="generate party and eval corpora")
    p.add_argument("--spec", required=True, help="scenario config file")
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="run the full in-process simulation")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shapley", action="store_true")

    p = sub.add_parser("server", help="federation server")
    server_sub = p.add_subparsers(dest="server_command", required=True)
    ps = server_sub.add_parser("start")
    ps.add_argument("--config", required=True)
    ps.add_argument("--port", type=int, required=True)
    ps.add_argument("--host", default="127.0.0.1")
    ps.add_argument("--log-dir", required=True)

    p = sub.add_parser("client", help="client agent")
    client_sub = p.add_subparsers(dest="client_command", required=True)
    pc = client_sub.add_parser("run")
    pc.add_argument("--config", required=True)
    pc.add_argument("--endpoint", required=True, help="host:port")
    pc.add_argument("--party", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)

    p = sub.add_parser("shapley", help="contribution measurement from a round log")
    p.add_argument("--log", required=True, help="server log directory")
    p.add_argument("--eval", required=True, help="eval corpus file")
    p.add_argument("--method", choices=("exact", "wtdp"), default="exact")
    p.add_argument("--budget", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=0.0)
    p.add_argument("--weights", default="", help="party=weight,...")
    p.add_argument("--seed", type=int, default=7)

    p = sub.add_parser("clean", help="model-scored corpus filtering")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--threshold", default="auto")
    p.add_argument("--out", default="")

    p = sub.add_parser("bench", help="compare numba and numpy RNG kernels")
    p.add_argument("--n", type=int, default=2_000_000)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except TransportError as e:
        print(f"transport error: {e}", file=sys.stderr)
        return 3
    except StarvationError as e:
        print(f"starvation: {e}", file=sys.stderr)
        return 4
    except FlmmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


def _dispatch(args) -> int:
    if args.command == "gendata":
        return _gendata(args)
    if args.command == "simulate":
        return _simulate(args)
    if args.command == "server":
        return _server(args)
    if args.command == "client":
        return _client(args)
    if args.command == "eval":
        return _eval(args)
    if args.command == "shapley":
        return _shapley(args)
    if args.command == "clean":
        return _clean(args)
    if args.command == "bench":
        return _bench(args)
    raise ConfigError(f"unknown command {args.command!r}")


def _gendata(args) -> int:
    from flmm.config import load_config
    from flmm.dataquality import generate_corpus, save_corpus
    cfg = load_config(args.spec)
    os.makedirs(args.out, exist_ok=True)
    for party in cfg.parties:
        records = generate_corpus(party.corpus)
        path = os.path.join(args.out, f"{party.party_id}.corpus")
        with open(path, "w") as f:
            f.write(save_corpus(records))
        print(f"wrote {len(records)} records to {path}")
    eval_records = generate_corpus(cfg.eval_spec)
    path = os.path.join(args.out, "eval.corpus")
    with open(path, "w") as f:
        f.write(save_corpus(eval_records))
    print(f"wrote {len(eval_records)} records to {path}")
    return 0


def _simulate(args) -> int:
    from flmm.config import load_config
    from flmm.simulate import run_simulation
    cfg = load_config(args.config)
    result = run_simulation(cfg, args.out, with_shapley=args.shapley)
    for rep in result.reports:
        print("\n".join(rep.lines()))
        print()
    if result.shapley is not None:
        for party, value in sorted(result.shapley.values.items()):
            print(f"shapley {party}={value:.6f}")
    if result.failure:
        print(f"partial failure: {result.failure}", file=sys.stderr)
        return 4
    return 0


def _server(args) -> int:
    from flmm.config import load_config
    from flmm.simulate import run_server
    cfg = load_config(args.config)
    run_server(cfg, args.host, args.port, args.log_dir)
    print("run complete")
    return 0


def _client(args) -> int:
    from flmm.config import load_config
    from flmm.simulate import run_client
    cfg = load_config(args.config)
    host, port = args.endpoint.rsplit(":", 1)
    rounds = run_client(cfg, args.party, host, int(port))
    print(f"client {args.party} finished after round {rounds}")
    return 0


def _load_model(path: str):
    from flmm.model import load_snapshot
    with open(path, "rb") as f:
        return load_snapshot(f.read())


def _eval(args) -> int:
    from flmm.dataquality import load_corpus
    from flmm.metrics import evaluate
    model = _load_model(args.model)
    with open(args.corpus) as f:
        records = load_corpus(f.read())
    rep = evaluate(model, records, eval_set_id=os.path.basename(args.corpus))
    print("\n".join(rep.lines()))
    return 0


def _shapley(args) -> int:
    from flmm.aggregation import AggregationPlan
    from flmm.contribution import exact_shapley, fl_value_function, wtdp_shapley
    from flmm.dataquality import load_corpus
    from flmm.orchestrator import RoundLog
    log = RoundLog(args.log)
    rounds = log.logged_rounds(AggregationPlan())
    with open(args.eval) as f:
        eval_set = load_corpus(f.read())
    parties = sorted({u.client_id for rec in rounds for u in rec.updates})
    initial = log.load_checkpoint(0)
    fn = fl_value_function(initial, rounds, eval_set, parties)
    if args.method == "exact":
        result = exact_shapley(fn)
    else:
        weights = {p: 1.0 for p in parties}
        for kv in args.weights.split(","):
            if kv:
                k, v = kv.split("=")
                weights[k] = float(v)
        result = wtdp_shapley(fn, weights, args.budget, args.tolerance, args.seed)
    v_grand = fn(frozenset(parties))
    v_empty = fn(frozenset())
    print(f"method={result.method}")
    print(f"samples={result.samples_used}")
    print(f"efficiency_residual={result.efficiency_residual(v_grand, v_empty):.3e}")
    for party, value in sorted(result.values.items()):
        print(f"value {party}={value:.6f}")
    return 0


def _clean(args) -> int:
    from flmm.dataquality import load_corpus, repair_corpus, save_corpus, \
        score_and_filter
    model = _load_model(args.model)
    with open(args.corpus) as f:
        records = load_corpus(f.read())
    records = repair_corpus(records)
    thr = "auto" if args.threshold == "auto" else float(args.threshold)
    kept, dropped = score_and_filter(model, records, thr)
    print(f"kept={len(kept)} dropped={len(dropped)}")
    if args.out:
        with open(args.out, "w") as f:
            f.write(save_corpus(kept))
        print(f"wrote kept records to {args.out}")
    return 0


def _bench(args) -> int:
    import numpy as np
    from flmm import _kernels
    n = args.n
    state = np.uint64(12345)
    # warm both paths (and JIT compile if available)
    a = _kernels._bulk_mix_numpy(state, 1000)
    if _kernels.USING_NUMBA:
        b = _kernels._bulk_mix_numba(state, 1000)
        assert np.array_equal(a, b), "paths disagree"

    t0 = time.perf_counter()
    ref = _kernels._bulk_mix_numpy(state, n)
    t_numpy = time.perf_counter() - t0
    print(f"numpy:  {n} outputs in {t_numpy * 1e3:.1f} ms")
    if _kernels.USING_NUMBA:
        t0 = time.perf_counter()
        jit = _kernels._bulk_mix_numba(state, n)
        t_numba = time.perf_counter() - t0
        print(f"numba:  {n} outputs in {t_numba * 1e3:.1f} ms")
        print(f"bit-identical: {np.array_equal(ref, jit)}")
        print(f"speedup numba/numpy: {t_numpy / t_numba:.2f}x")
    else:
        print("numba path disabled (FLMM_NO_NUMBA set or numba missing)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
