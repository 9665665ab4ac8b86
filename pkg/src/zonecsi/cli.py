"""Command-line entry point: ``zonecsi <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import pipeline
from .autoenc import LayerSpec, count_multiplications, count_parameters, gradient_check, init_model
from .config import ExperimentConfig, load_config
from .errors import ConfigError, ZoneCSIError
from .evaluation import evaluate, write_cdf_csv
from .formats import (
    ModelBundle,
    load_model,
    read_channel_csv,
    read_channel_npz,
    read_dataset,
    save_model,
    write_dataset,
    write_trajectory_csv,
)
from .mobility import KMH, POLICIES, MobilityConfig, compute_overhead, count_zone_switches, simulate_trajectory
from .transform import channels_to_vectors, fit_normalizer
from .zoning import kmeans_positions, partition_dataset

log = logging.getLogger("zonecsi")


def _out(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _dataset(args, cfg):
    if getattr(args, "dataset", None):
        return read_dataset(args.dataset)
    pos, h, _ = pipeline.load_or_generate(cfg)
    return pos, h


def cmd_generate(args):
    cfg = _config(args)
    pos, h, _ = pipeline.load_or_generate(replace(cfg, data=replace(cfg.data, dataset="")))
    ret = pipeline.aggregate_retention(h, cfg.transform.n_c)
    path = _out(args) / args.name
    write_dataset(path, pos, h)
    print(f"wrote {len(pos)} samples (N_t={h.shape[1]}, K={h.shape[2]}) to {path}")
    print(f"energy in first {cfg.transform.n_c} delay taps: {ret:.4f}")
    if ret < pipeline.MIN_RETENTION:
        print("warning: delay truncation keeps less than 99% of the energy", file=sys.stderr)


def cmd_ingest(args):
    if Path(args.source).suffix == ".npz":
        pos, h = read_channel_npz(args.source)
    else:
        pos, h = read_channel_csv(args.source, args.n_t, args.subcarriers)
    path = _out(args) / args.name
    write_dataset(path, pos, h)
    print(f"wrote {len(pos)} samples to {path}")


def cmd_partition(args):
    cfg = _config(args)
    pos, _ = _dataset(args, cfg)
    b = args.b if args.b is not None else max(cfg.zones.b)
    km = kmeans_positions(pos, b, seed=cfg.zones.seed, max_iters=cfg.zones.max_iters)
    sizes = partition_dataset(pos, km.partition).sizes
    doc = dict(B=b, centroids=km.partition.centroids.tolist(), sizes=sizes, iterations=km.iterations, inertia=km.inertia)
    path = _out(args) / f"partition_B{b}.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    for i, (c, n) in enumerate(zip(km.partition.centroids, sizes), start=1):
        print(f"zone {i}: centroid ({c[0]:.2f}, {c[1]:.2f})  {n} samples")


def cmd_train(args):
    cfg = _config(args)
    pos, h = _dataset(args, cfg)
    b = args.b if args.b is not None else max(cfg.zones.b)
    tr, _ = pipeline.split_indices(len(pos), cfg.train.split_train_count, cfg.train.seed)
    x = channels_to_vectors(h[tr], cfg.transform.n_c)
    normalizer = fit_normalizer(x, cfg.transform.normalizer)
    spec = LayerSpec(h.shape[1], cfg.transform.n_c, cfg.model.l, cfg.model.beta, cfg.model.activation)
    km = kmeans_positions(pos[tr], b, seed=cfg.zones.seed, max_iters=cfg.zones.max_iters)
    partition_dataset(pos[tr], km.partition)
    labels = km.partition.classify(pos[tr])
    models = pipeline.train_zone_models(spec, normalizer.apply(x).astype(cfg.train.dtype), labels, b, cfg)
    path = _out(args) / f"bundle_B{b}.zcm1"
    save_model(path, ModelBundle(spec, km.partition, normalizer, models, cfg.train.bn_eps))
    print(f"wrote {b}-zone bundle to {path}")


def cmd_evaluate(args):
    cfg = _config(args)
    bundle = load_model(args.bundle)
    pos, h = _dataset(args, cfg)
    if not args.all_samples:
        _, te = pipeline.split_indices(len(pos), cfg.train.split_train_count, cfg.train.seed)
        pos, h = pos[te], h[te]
    x = channels_to_vectors(h, bundle.spec.n_c)
    reports = {}
    for routing in ("position", "oracle"):
        rep = evaluate(bundle.models, bundle.partition, x, pos, bundle.normalizer, routing)
        reports[routing] = rep
        print(f"{routing:>8} routing: mean NMSE {rep.mean_nmse_db:.2f} dB over {len(x)} samples")
    write_cdf_csv(_out(args) / "cdf.csv", reports)


def _mobility_config(cfg, region, seed=None) -> MobilityConfig:
    m = cfg.mobility
    return MobilityConfig(m.speed_kmh * KMH, m.horizon_s, m.dt_s, region[0], region[1], m.seed if seed is None else seed)


def cmd_mobility(args):
    cfg = _config(args)
    bundle = load_model(args.bundle)
    pos, _ = _dataset(args, cfg)
    region = pipeline.mobility_region(pos)
    traj = simulate_trajectory(_mobility_config(cfg, region))
    stats = count_zone_switches(traj, bundle.partition.classify)
    v = count_parameters(bundle.spec).encoder
    B = bundle.partition.B
    extra = 2 * B if cfg.mobility.include_classifier else 0
    print(f"path length {traj.path_length:.1f} m over {stats.horizon:.0f} s")
    print(f"zone switches N_zs={stats.n_zs}  r_zs={stats.r_zs:.6f}/s  MPUR={stats.r_zs:.6f}/s")
    for policy in POLICIES:
        caps = range(1, B + 1) if policy == "cache" else [None]
        for c in caps:
            rep = compute_overhead(v, B, stats, policy, cfg.mobility.horizon_s, c, extra)
            label = policy if c is None else f"cache({c})"
            print(f"{label:>18}: MPTR {rep.mptr:.2f} param/s, {rep.downloads} downloads")
    if args.out:
        write_trajectory_csv(_out(args) / "trajectory.csv", traj, bundle.partition.classify(traj.positions))


def cmd_report(args):
    cfg = _config(args)
    result = pipeline.run_experiment(cfg, _out(args), save_dataset=args.save_dataset)
    print((result.out_dir / "report.txt").read_text(), end="")
    for m in result.methods:
        print(f"{m.result.name}: oracle routing {m.oracle.mean_nmse_db:.2f} dB")


def cmd_gradcheck(args):
    spec = LayerSpec(args.n_t, args.n_c, args.l, args.beta, args.activation)
    model = init_model(spec, args.seed or 0)
    # perturb batch-norm parameters away from identity so their gradients are exercised
    rng = np.random.default_rng(args.seed or 0)
    for part in ("enc", "dec"):
        model.tensors[f"{part}.bn.scale"] += rng.uniform(-0.5, 0.5, spec.hidden)
        model.tensors[f"{part}.bn.shift"] += rng.uniform(-0.5, 0.5, spec.hidden)
    batch = rng.standard_normal((args.batch, spec.input_dim))
    res = gradient_check(model, batch, n_probes=args.probes, step=args.step, seed=args.seed or 0)
    worst = max(r[4] for r in res)
    groups = sorted({r[0] for r in res})
    print(f"{len(res)} probes over {len(groups)} tensors, max relative error {worst:.3e}")
    ok = worst < args.tol
    print("PASS" if ok else "FAIL")
    return 0 if ok else 4


def cmd_count(args):
    spec = LayerSpec(args.n_t, args.n_c, args.l, args.beta)
    pc = count_parameters(spec)
    mc = count_multiplications(spec)
    B = args.b
    print(f"spec: N_t={spec.n_t} N_c={spec.n_c} L={spec.codeword_len} beta={spec.width_factor} B={B}")
    print(f"compression rate: {spec.codeword_len}/{spec.input_dim}")
    print(f"parameters per zone: encoder {pc.encoder:,}  decoder {pc.decoder:,}  total {pc.total:,}")
    print(f"parameters, all zones: encoder {B * pc.encoder:,}  total {B * pc.total:,}")
    print(f"multiplications per feedback (encoder): {mc.encoder:,}")
    print(f"MPTR, download all once over {args.horizon:g} s: {B * pc.encoder / args.horizon:.2f} param/s")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zonecsi", description="Zone-specific CSI feedback simulation suite.")
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--threads", type=int, help="cap BLAS/OpenMP worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", help="synthesize a scene dataset to ZCD1")
    s.add_argument("--name", default="dataset.zcd1")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("ingest", help="convert an external channel export (CSV or .npz) to ZCD1")
    s.add_argument("source", help="CSV rows (see docs/formats.md) or .npz with positions and channels")
    s.add_argument("--n-t", type=int, default=64, help="antennas per CSV row")
    s.add_argument("--subcarriers", type=int, default=64, help="subcarriers per CSV row")
    s.add_argument("--name", default="dataset.zcd1")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("partition", help="k-means zones over UE positions")
    s.add_argument("--dataset")
    s.add_argument("--b", type=int)
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("train", help="train one zone-model bundle")
    s.add_argument("--dataset")
    s.add_argument("--b", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a bundle on the test split of a dataset")
    s.add_argument("--bundle", required=True)
    s.add_argument("--dataset")
    s.add_argument("--all-samples", action="store_true", help="use every sample, not just the test split")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("mobility", help="zone switches and download overhead for a bundle's zones")
    s.add_argument("--bundle", required=True)
    s.add_argument("--dataset", help="dataset whose position bounding box is the walking region")
    s.set_defaults(func=cmd_mobility)

    s = sub.add_parser("report", help="run the full experiment and write reports")
    s.add_argument("--save-dataset", action="store_true")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    s.add_argument("--n-t", type=int, default=4)
    s.add_argument("--n-c", type=int, default=2)
    s.add_argument("--l", type=int, default=4)
    s.add_argument("--beta", type=int, default=5)
    s.add_argument("--activation", default="tanh")
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--probes", type=int, default=200)
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--step", type=float, default=1e-5, help="central-difference step")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("count", help="parameter, multiplication and MPTR accounting")
    s.add_argument("--n-t", type=int, default=64)
    s.add_argument("--n-c", type=int, default=32)
    s.add_argument("--l", type=int, default=64)
    s.add_argument("--beta", type=int, default=16)
    s.add_argument("--b", type=int, default=1)
    s.add_argument("--horizon", type=float, default=3600.0)
    s.set_defaults(func=cmd_count)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            with threadpool_limits(limits=args.threads):
                rc = args.func(args)
        else:
            rc = args.func(args)
    except ZoneCSIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
