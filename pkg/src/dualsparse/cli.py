"""Command-line interface.

Exit codes: 0 success, 1 verification failure, 2 usage or input error, 3 internal error.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .errors import DualSparseError

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 3


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _sparsity_grid(text: str) -> list[float]:
    """'a:b:step' (inclusive of b) or a comma list."""
    try:
        if ":" in text:
            a, b, step = (float(v) for v in text.split(":"))
            n = int(round((b - a) / step)) + 1
            return [round(a + i * step, 10) for i in range(n)]
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sparsity grid {text!r}") from None


def cmd_compress(args) -> int:
    from .compression import compress_network
    from .network import load_real_network

    dims, layers = load_real_network(args.input)
    res = compress_network(dims, layers, args.bits, args.lam, args.epochs, args.seed)
    res.network.save(args.out)
    print(f"weight sparsity {res.weight_sparsity:.4f}")
    for i, chans in res.removed_channels.items():
        print(f"layer {i}: removed silent channels {chans}")
    if res.loss is not None:
        print(f"task loss {res.loss:.4f} (lambda=0 reference {res.baseline_loss:.4f})")
    return EXIT_OK


def cmd_compile(args) -> int:
    from .model_io import compile_model
    from .network import QuantizedNetwork
    from .pipeline import PipelineConfig, balance_parallelism, estimate_spike_sparsity

    net = QuantizedNetwork.load(args.model)
    n = len(net.layers)
    if args.parallelism == "auto":
        s1 = estimate_spike_sparsity(net, batches=args.spike_batches, rng=np.random.default_rng(args.seed))
        s2 = [1.0 - layer.weight_sparsity() for layer in net.layers]
        # a layer with no spikes or no weights still needs one unit
        s1 = [min(1.0, max(v, 1e-6)) for v in s1]
        s2 = [min(1.0, max(v, 1e-6)) for v in s2]
        p_co = balance_parallelism(net, s1, s2, budget=args.budget, target=args.target)
    else:
        p_co = _int_list(args.parallelism)
        if len(p_co) != n:
            raise DualSparseError(f"--parallelism lists {len(p_co)} values for {n} layers")
    p_ci = _int_list(args.p_ci) if args.p_ci else None
    if p_ci is not None and len(p_ci) == 1:
        p_ci = p_ci * n
    compile_model(net, PipelineConfig(p_co, p_ci)).save(args.out)
    print("P_Co " + ",".join(str(p) for p in p_co))
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .model_io import ModelFile, read_spikes
    from .pipeline import simulate, write_stats_csv, write_summary_json

    model = ModelFile.load(args.model)
    x = read_spikes(args.input)
    res = simulate(model, x, engine=args.engine)
    if args.report:
        write_stats_csv(res, args.report)
    if args.summary:
        write_summary_json(res, args.summary)
    print(f"class {res.classification}")
    print(json.dumps(res.summary()))
    return EXIT_OK


def cmd_analyze_formats(args) -> int:
    from .sparse_format import ConvConfig, analyze_ratio, write_ratio_csv

    cfg = ConvConfig.parse(args.config)
    rows = analyze_ratio(cfg, args.sparsities, args.segments, trials=args.trials, seed=args.seed)
    write_ratio_csv(rows, args.out)
    if args.plot:
        _plot_ratios(rows, args.plot)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def _plot_ratios(rows, path):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise DualSparseError("--plot needs matplotlib (install the 'plot' extra)") from None
    fig, ax = plt.subplots(figsize=(6, 4))
    series: dict = {}
    for r in rows:
        if r.format == "dense":
            continue
        label = f"bitmap/{r.segment_len}" if r.format == "bitmap" else r.format
        series.setdefault(label, []).append((r.sparsity, r.ratio))
    for label, pts in series.items():
        xs, ys = zip(*sorted(pts))
        ax.plot(xs, ys, label=label)
    ax.set_xlabel("shared sparsity")
    ax.set_ylabel("throughput / storage bit")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)


def cmd_verify(args) -> int:
    from .model_io import ModelFile
    from .neuron import SpikeTensor, run_network_dense
    from .pipeline import simulate

    model = ModelFile.load(args.model)
    net = model.to_network()
    rng = np.random.default_rng(args.seed)
    bad = 0
    for i in range(args.trials):
        x = SpikeTensor.random(model.input_dims, float(rng.uniform(0.05, 0.6)), rng)
        got = simulate(model, x).outputs
        want = run_network_dense(x, net)
        if not all(a == b for a, b in zip(got, want)):
            bad += 1
            if bad <= 5:
                print(f"trial {i}: mismatch", file=sys.stderr)
    print(f"{args.trials - bad}/{args.trials} trials match the dense reference")
    return EXIT_VERIFY if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualsparse", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="quantize and prune a real-valued network")
    p.add_argument("--input", required=True)
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("compile", help="pack a quantized network into an FFLS model file")
    p.add_argument("--model", required=True)
    p.add_argument("--parallelism", default="auto", help="'auto' or comma-separated P_Co per layer")
    p.add_argument("--p-ci", default=None, help="segment length, one value or one per layer")
    p.add_argument("--budget", type=int, default=None, help="total detector units for auto mode")
    p.add_argument("--target", type=float, default=None, help="per-unit workload goal for auto mode")
    p.add_argument("--spike-batches", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("simulate", help="run the pipeline model on a spike tensor file")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--report", default=None, help="per-layer stats CSV")
    p.add_argument("--summary", default=None, help="JSON summary")
    p.add_argument("--engine", choices=("fast", "cycle"), default="fast")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze-formats", help="throughput-to-storage study of sparse formats")
    p.add_argument("--config", default="4,64,32,16,16,3,3", help="T,Co,Ci,Fh,Fw,Kh,Kw")
    p.add_argument("--segments", type=_int_list, default=[16, 32, 64, 128])
    p.add_argument("--sparsities", type=_sparsity_grid, default=_sparsity_grid("0:0.99:0.01"))
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", default=None, help="optional image path (needs matplotlib)")
    p.set_defaults(func=cmd_analyze_formats)

    p = sub.add_parser("verify", help="random-input equivalence against the dense reference")
    p.add_argument("--model", required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (DualSparseError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
