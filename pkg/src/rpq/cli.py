"""``rpq`` command line: synth, gt, build, train and search.

Every artifact written here gets a ``<file>.manifest`` sidecar of ``key=value``
lines pinning shapes, seeds and format versions; ``search`` refuses to combine
artifacts whose manifests disagree.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .dataset import (
    compute_ground_truth,
    load_ground_truth,
    load_vectors,
    make_sift_like,
    make_synthetic,
    save_ground_truth,
    save_vectors,
)
from .graph import build_graph, load_graph, recall_at_k, save_graph
from .pq import load_codes, save_codes
from .scenarios import HybridStore, search_hybrid, search_in_memory, write_hybrid_files
from .trainer import TrainingConfig, TrainingDiverged, fit, init_model, load_checkpoint, save_checkpoint, write_loss_log

log = logging.getLogger("rpq")

EXIT_FAILURE = 1
EXIT_CONFIG = 3
EXIT_DIVERGED = 4
FORMAT_VERSION = 1


class ConfigError(Exception):
    """Artifacts that do not belong together."""


# ---------------------------------------------------------------------------
# Manifests


def manifest_path(path) -> str:
    return f"{os.fspath(path)}.manifest"


def write_manifest(path, **fields) -> None:
    fields = {"format_version": FORMAT_VERSION, "rpq_version": __version__, **fields}
    with open(manifest_path(path), "w") as fh:
        for key in sorted(fields):
            fh.write(f"{key}={fields[key]}\n")


def read_manifest(path) -> dict:
    try:
        with open(manifest_path(path)) as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError:
        return {}
    out = {}
    for line in lines:
        if line.strip() and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def _expect(label: str, found, expected) -> None:
    if found is not None and expected is not None and int(found) != int(expected):
        raise ConfigError(f"{label}: expected {expected}, found {found}")


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    make = make_sift_like if args.kind == "sift" else None
    total = args.n + args.queries
    if make is not None:
        data = make(total, args.dim, seed=args.seed).data
    else:
        data = make_synthetic(total, args.dim, args.clusters, args.seed).data
    save_vectors(args.out, data[: args.n], "fvecs")
    write_manifest(args.out, kind="vectors", n=args.n, D=args.dim, seed=args.seed, generator=args.kind)
    if args.queries_out:
        save_vectors(args.queries_out, data[args.n :], "fvecs")
        write_manifest(args.queries_out, kind="vectors", n=args.queries, D=args.dim, seed=args.seed,
                       generator=args.kind)
    print(f"wrote {args.n} base vectors (D={args.dim}) to {args.out}")
    return 0


def cmd_gt(args) -> int:
    base = load_vectors(args.base)
    queries = load_vectors(args.queries)
    if base.dim != queries.dim:
        raise ConfigError(f"base D={base.dim} and query D={queries.dim} differ")
    gt = compute_ground_truth(base, queries, args.k, workers=args.threads)
    save_ground_truth(args.out, gt)
    write_manifest(args.out, kind="ground_truth", n=base.count, queries=queries.count, k=args.k, D=base.dim)
    print(f"wrote {args.k}-NN ground truth for {queries.count} queries to {args.out}")
    return 0


def cmd_build(args) -> int:
    data = load_vectors(args.data)
    t0 = time.perf_counter()
    g = build_graph(data, args.max_degree, args.build_beam, args.alpha, args.seed)
    elapsed = time.perf_counter() - t0
    save_graph(args.out, g)
    write_manifest(args.out, kind="graph", n=g.n, D=data.dim, max_degree=args.max_degree,
                   build_beam=args.build_beam, alpha=args.alpha, seed=args.seed)
    print(f"built graph: n={g.n} entry={g.entry} mean_degree={g.degrees.mean():.2f} "
          f"max_degree={int(g.degrees.max())} seconds={elapsed:.2f}")
    return 0


def cmd_train(args) -> int:
    data = load_vectors(args.data)
    g = load_graph(args.graph)
    if g.n != data.count:
        raise ConfigError(f"graph has {g.n} vertices but data has {data.count} vectors")
    _expect("graph manifest D", read_manifest(args.graph).get("D"), data.dim)
    cfg = TrainingConfig(
        m=args.m, k=args.k, sigma=args.sigma, tau=args.tau, tau_final=args.tau_final, assign_tau=args.assign_tau,
        straight_through=args.straight_through, lr_max=args.lr, rotation_lr=args.rotation_lr,
        epochs=0 if args.baseline == "pq" else args.epochs, batch_size=args.batch_size,
        triplets_per_step=args.triplets, k_pos=args.kpos, k_neg=args.kneg, n_hops=args.nhops,
        beam_h=args.beam, queries_per_epoch=args.queries_per_epoch, train_size=args.train_size or None,
        kmeans_iters=args.kmeans_iters, alpha_init=args.alpha_init, learn_alpha=not args.fix_alpha,
        use_routing=not args.no_routing, seed=args.seed,
    )
    log_path = args.log or f"{args.out}.loss.csv"
    codes_path = args.codes or f"{args.out}.codes"
    if args.baseline == "pq":
        model = init_model(data, cfg.m, cfg.k, cfg.seed, cfg.kmeans_iters, cfg.train_size, alpha=None)
        save_checkpoint(args.out, model)
        write_loss_log(log_path, [])
        rows = []
    else:
        try:
            result = fit(data, g, cfg, checkpoint_path=args.out, log_path=log_path)
        except TrainingDiverged as exc:
            if exc.last_good is not None:
                save_checkpoint(args.out, exc.last_good)
            print(f"error: training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        model, rows = result.model, result.log
    codes = model.encode(data.data)
    save_codes(codes_path, codes, model.k)
    common = dict(D=data.dim, M=model.m, K=model.k, seed=args.seed, baseline=args.baseline)
    write_manifest(args.out, kind="model", epochs=len(rows), **common)
    write_manifest(codes_path, kind="codes", n=data.count, **common)
    last = rows[-1] if rows else None
    summary = f"model={args.out} codes={codes_path} epochs={len(rows)}"
    if last:
        summary += f" l_routing={last['l_routing']:.4f} l_neighborhood={last['l_neighborhood']:.4f} alpha={last['alpha']:.4f}"
    print(summary)
    return 0


@dataclass
class BenchReport:
    recall_at_k: float
    qps: float
    mean_hops: float
    mean_vector_fetches: float
    simulated_io_ms: float
    config: dict = field(default_factory=dict)

    def flat(self) -> dict:
        row = {k: v for k, v in asdict(self).items() if k != "config"}
        row.update(self.config)
        return row


def _check_search_artifacts(args, g, model, codes, k_codes, queries, gt) -> None:
    gm, mm, cm = read_manifest(args.graph), read_manifest(args.model), read_manifest(args.codes)
    _expect("codes rows vs graph size", len(codes), g.n)
    _expect("codes M vs model M", codes.shape[1], model.m)
    _expect("codes K vs model K", k_codes, model.k)
    _expect("query D vs model D", queries.dim, model.dim)
    _expect("graph manifest D", gm.get("D"), model.dim)
    _expect("model manifest D", mm.get("D"), model.dim)
    for key in ("M", "K"):
        _expect(f"codes manifest {key} vs model manifest", cm.get(key), mm.get(key))
    if gt is not None and len(gt.neighbors) != queries.count:
        raise ConfigError(f"ground truth has {len(gt.neighbors)} rows for {queries.count} queries")
    if gt is not None and gt.k < args.k:
        raise ConfigError(f"ground truth holds {gt.k} neighbors per query, need {args.k}")


def cmd_search(args) -> int:
    g = load_graph(args.graph)
    model, _ = load_checkpoint(args.model)
    codes, k_codes = load_codes(args.codes)
    queries = load_vectors(args.queries)
    gt = load_ground_truth(args.gt) if args.gt else None
    _check_search_artifacts(args, g, model, codes, k_codes, queries, gt)
    rerank = args.rerank or args.beam
    rot = model.rotation()
    store = None
    if args.mode == "hybrid":
        store_dir = args.store or f"{args.graph}.store"
        if not os.path.exists(os.path.join(store_dir, "vectors.raw")):
            if not args.data:
                raise ConfigError("hybrid mode needs --data the first time its store is laid out")
            data = load_vectors(args.data)
            _expect("data rows vs graph size", data.count, g.n)
            write_hybrid_files(store_dir, data, g)
        store = HybridStore(store_dir, model.dim, latency_us=args.latency_us)

    def one(q):
        if store is None:
            return search_in_memory(g, model, codes, q, args.beam, args.k, rot), None
        return search_hybrid(store, g, model, codes, q, args.beam, args.k, rerank,
                             progressive=args.progressive, rotation=rot)

    qps_runs, outcome = [], None
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        if args.threads > 1:
            with ThreadPoolExecutor(max_workers=args.threads) as pool:
                outcome = list(pool.map(one, queries.data))
        else:
            outcome = [one(q) for q in queries.data]
        elapsed = time.perf_counter() - t0
        qps_runs.append(len(queries.data) / elapsed if elapsed > 0 else float("inf"))
    if store is not None:
        store.close()

    results = [r for r, _ in outcome]
    stats = [s for _, s in outcome if s is not None]
    recall = float(np.mean([recall_at_k(r.ids, t[: args.k]) for r, t in zip(results, gt.neighbors)])) if gt else float("nan")
    report = BenchReport(
        recall_at_k=recall,
        qps=float(statistics.median(qps_runs)) if results else 0.0,
        mean_hops=float(np.mean([r.hops for r in results])) if results else 0.0,
        mean_vector_fetches=float(np.mean([s.vector_fetches for s in stats])) if stats else 0.0,
        simulated_io_ms=float(np.mean([s.simulated_us for s in stats]) / 1000.0) if stats else 0.0,
        config={"mode": args.mode, "beam": args.beam, "k": args.k, "rerank": rerank if store else 0,
                "progressive": bool(args.progressive), "repeats": args.repeats, "threads": args.threads,
                "queries": queries.count, "D": model.dim, "M": model.m, "K": model.k},
    )
    print(f"mode={args.mode} beam={args.beam} recall@{args.k}={report.recall_at_k:.4f} qps={report.qps:.1f} "
          f"hops={report.mean_hops:.2f} vector_fetches={report.mean_vector_fetches:.2f} "
          f"io_ms={report.simulated_io_ms:.3f}")
    if args.json:
        text = json.dumps(asdict(report), sort_keys=True)
        if args.json == "-":
            print(text)
        else:
            with open(args.json, "w") as fh:
                fh.write(text + "\n")
    if args.csv:
        row = report.flat()
        fresh = not os.path.exists(args.csv) or os.path.getsize(args.csv) == 0
        with open(args.csv, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row))
            if fresh:
                writer.writeheader()
            writer.writerow(row)
    if args.ids_out:
        np.savez(args.ids_out, ids=np.array([r.ids for r in results]), hops=np.array([r.hops for r in results]))
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rpq", description="Routing-guided product quantization for graph ANN search")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic base (and query) set as fvecs")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--dim", type=int, default=128)
    s.add_argument("--kind", choices=["sift", "blobs"], default="sift")
    s.add_argument("--clusters", type=int, default=16)
    s.add_argument("--queries", type=int, default=0)
    s.add_argument("--queries-out")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("gt", help="exact k-NN ground truth as ivecs")
    s.add_argument("--base", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_gt)

    s = sub.add_parser("build", help="build a proximity graph")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-degree", type=int, default=32)
    s.add_argument("--build-beam", type=int, default=64)
    s.add_argument("--alpha", type=float, default=1.2)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("train", help="train a quantizer (or fit the plain PQ baseline)")
    s.add_argument("--data", required=True)
    s.add_argument("--graph", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--codes", help="compact codes output (default: <out>.codes)")
    s.add_argument("--log", help="loss log CSV (default: <out>.loss.csv)")
    s.add_argument("--baseline", choices=["pq", "rpq"], default="rpq")
    s.add_argument("--m", type=int, default=16)
    s.add_argument("--k", type=int, default=256)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--tau", type=float, default=1.0)
    s.add_argument("--tau-final", type=float)
    s.add_argument("--assign-tau", type=float, help="codeword softmax temperature (default: --tau)")
    s.add_argument("--straight-through", action="store_true", help="decode to hard codewords while training")
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--rotation-lr", type=float, help="peak learning rate of the rotation (default: --lr)")
    s.add_argument("--batch-size", type=int, default=256)
    s.add_argument("--triplets", type=int, default=64, help="triplets per optimizer step")
    s.add_argument("--kpos", type=int, default=6)
    s.add_argument("--kneg", type=int, default=20)
    s.add_argument("--nhops", type=int, default=2)
    s.add_argument("--beam", type=int, default=16)
    s.add_argument("--queries-per-epoch", type=int, default=10000)
    s.add_argument("--train-size", type=int, default=500_000, help="0 = use every vector")
    s.add_argument("--kmeans-iters", type=int, default=20)
    s.add_argument("--alpha-init", type=float, default=1.0)
    s.add_argument("--fix-alpha", action="store_true", help="keep alpha at --alpha-init")
    s.add_argument("--no-routing", action="store_true", help="neighborhood loss only")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("search", help="run queries and report recall, QPS, hops and I/O")
    s.add_argument("--graph", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--codes", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--gt")
    s.add_argument("--mode", choices=["memory", "hybrid"], default="memory")
    s.add_argument("--beam", type=int, default=32)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--rerank", type=int, default=0, help="rerank depth (default: beam)")
    s.add_argument("--progressive", action="store_true", help="fetch raw vectors of every expanded vertex")
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--data", help="raw vectors, used to lay out the hybrid store")
    s.add_argument("--store", help="hybrid store directory (default: <graph>.store)")
    s.add_argument("--latency-us", type=float, default=100.0, help="simulated cost per disk read")
    s.add_argument("--json", help="write one JSON record here ('-' for stdout)")
    s.add_argument("--csv", help="append one CSV row here")
    s.add_argument("--ids-out", help="save result ids and hop counts as .npz")
    s.set_defaults(func=cmd_search)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "repeats", 1) < 1 or getattr(args, "threads", 1) < 1:
        parser.error("--repeats and --threads must be at least 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
