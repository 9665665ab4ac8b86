"""End-to-end experiment: data, split, zones, per-zone training, evaluation, overhead, reports."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autoenc import LayerSpec, TrainConfig, count_parameters, init_model, train
from .config import REFERENCE_TRAIN_FRACTION, ExperimentConfig
from .errors import ConfigError, DataError, ZoneCSIError
from .evaluation import EvalReport, MethodResult, comparison_report, evaluate, write_cdf_csv, write_report_csv
from .formats import ModelBundle, read_dataset, save_model, write_dataset, write_trajectory_csv
from .mobility import (
    KMH,
    MobilityConfig,
    compute_overhead,
    count_zone_switches,
    simulate_trajectory,
    switch_rate_over_seeds,
)
from .scene import ArrayGeometry, SceneConfig, generate_scene, synthesize_dataset
from .transform import channels_to_vectors, fit_normalizer, to_angular_delay
from .zoning import kmeans_positions, partition_dataset

log = logging.getLogger(__name__)

MIN_RETENTION = 0.99


class StageError(ZoneCSIError):
    """Wraps a module error with the pipeline stage it came from; keeps the exit code."""

    def __init__(self, stage: str, cause: ZoneCSIError):
        self.stage = stage
        self.cause = cause
        self.exit_code = cause.exit_code
        super().__init__(f"[{stage}] {cause}")


def scene_config(cfg: ExperimentConfig) -> SceneConfig:
    s = cfg.scene
    return SceneConfig(
        cell_origin=s.cell_origin,
        cell_size=s.cell_size,
        ue_height=s.ue_height,
        grid_shape=tuple(int(v) for v in s.grid_shape),
        bs_position=s.bs_position,
        array=ArrayGeometry(s.n_horizontal, s.n_vertical, s.element_spacing),
        num_generator_zones=s.num_generator_zones,
        scatterers_per_zone=s.scatterers_per_zone,
        scatterer_height=s.scatterer_height,
        carrier_frequency=s.carrier_frequency,
        bandwidth=s.bandwidth,
        num_subcarriers=s.num_subcarriers,
        delay_taps=cfg.transform.n_c,
        pathloss_exponent=s.pathloss_exponent,
        max_paths=s.max_paths,
        rng_seed=s.seed,
    )


def aggregate_retention(channels, n_c: int) -> float:
    """Share of total dataset energy inside the first ``n_c`` delay taps."""
    e = np.abs(to_angular_delay(channels)) ** 2
    return float(e[..., :n_c].sum() / e.sum())


def mobility_region(positions) -> tuple[tuple, tuple]:
    """(origin, size) of the bounding box of the sample positions on the ground plane."""
    p = np.asarray(positions, dtype=float)[:, :2]
    lo = p.min(axis=0)
    size = p.max(axis=0) - lo
    if np.any(size <= 0):
        raise DataError("sample positions span no area; cannot place a mobility region")
    return tuple(float(v) for v in lo), tuple(float(v) for v in size)


def load_or_generate(cfg: ExperimentConfig):
    """Positions (U, 3), complex64 channels (U, N_t, K), and the mobility region.

    The region is the positions' bounding box in both cases, so a generated
    dataset and the same dataset read back from disk give identical reports.
    """
    if cfg.data.dataset:
        pos, h = read_dataset(cfg.data.dataset)
    else:
        pos, h = synthesize_dataset(generate_scene(scene_config(cfg)))
        h = h.astype(np.complex64)  # stored precision
    return pos, h, mobility_region(pos)


def split_indices(n: int, train_count: int, seed) -> tuple[np.ndarray, np.ndarray]:
    if train_count == 0:
        train_count = int(round(n * REFERENCE_TRAIN_FRACTION))
    if not 2 <= train_count < n:
        raise ConfigError(f"train count {train_count} must lie in [2, {n - 1}] for {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    return perm[:train_count], perm[train_count:]


def train_config(cfg: ExperimentConfig, seed) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        learning_rate=t.lr,
        beta1=t.beta1,
        beta2=t.beta2,
        adam_eps=t.adam_eps,
        batch_size=t.batch,
        epochs=t.epochs,
        seed=seed,
        bn_momentum=t.bn_momentum,
        bn_eps=t.bn_eps,
        lr_schedule=t.schedule,
        final_lr_fraction=t.final_lr_fraction,
        recalibrate_bn=t.recalibrate_bn,
    )


@dataclass
class MethodRun:
    result: MethodResult
    bundle: ModelBundle
    oracle: EvalReport
    zone_sizes: list


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    methods: list = field(default_factory=list)  # MethodRun
    retention: Optional[float] = None
    out_dir: Optional[Path] = None

    def method(self, B: int) -> MethodRun:
        for m in self.methods:
            if m.result.B == B:
                return m
        raise KeyError(B)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except ZoneCSIError as exc:
        raise StageError(name, exc) from exc


def train_zone_models(spec, x_train, labels, B, cfg: ExperimentConfig):
    dtype = np.dtype(cfg.train.dtype)
    models = []
    for b in range(1, B + 1):
        seed = [cfg.train.seed, B, b]
        m = init_model(spec, seed, dtype)
        data = x_train[labels == b]
        log.info("training zone %d/%d on %d samples", b, B, len(data))
        train(m, data, train_config(cfg, seed))
        models.append(m)
    return models


def run_method(cfg, spec, B, pos_tr, x_tr, pos_te, x_te_raw, normalizer, region) -> MethodRun:
    km = _stage("partition", kmeans_positions, pos_tr, B, seed=cfg.zones.seed, max_iters=cfg.zones.max_iters)
    zoned = _stage("partition", partition_dataset, pos_tr, km.partition)
    labels = km.partition.classify(pos_tr)
    models = _stage("train", train_zone_models, spec, x_tr, labels, B, cfg)
    bundle = ModelBundle(spec, km.partition, normalizer, models, cfg.train.bn_eps)
    rep = _stage("evaluate", evaluate, models, km.partition, x_te_raw, pos_te, normalizer, "position")
    oracle = _stage("evaluate", evaluate, models, km.partition, x_te_raw, pos_te, normalizer, "oracle")

    mob = cfg.mobility
    mcfg = MobilityConfig(
        speed=mob.speed_kmh * KMH,
        horizon=mob.horizon_s,
        dt=mob.dt_s,
        region_origin=region[0],
        region_size=region[1],
        seed=mob.seed,
    )
    stats = _stage("mobility", count_zone_switches, simulate_trajectory(mcfg), km.partition.classify)
    policy = mob.policy
    cap = min(mob.cache_capacity, B) if policy == "cache" else None
    extra = 2 * B if mob.include_classifier else 0
    overhead = _stage(
        "mobility", compute_overhead, count_parameters(spec).encoder, B, stats, policy, mob.horizon_s, cap, extra
    )
    name = f"{B}-zone beta={spec.width_factor}"
    return MethodRun(MethodResult(name, spec, B, rep, overhead), bundle, oracle, zoned.sizes)


def run_experiment(cfg: ExperimentConfig, out_dir=None, save_dataset: bool = False) -> ExperimentResult:
    """Run every method listed in ``zones.b`` on one shared split and write the reports.

    All methods train on the same training samples, so the total sample
    budget is equal regardless of the zone count.
    """
    pos, h, region = _stage("data", load_or_generate, cfg)
    n_c = cfg.transform.n_c
    retention = aggregate_retention(h, n_c)
    if not cfg.data.dataset and retention < MIN_RETENTION:
        raise StageError("data", DataError(f"only {retention:.4f} of the channel energy lies in {n_c} delay taps"))
    tr, te = _stage("split", split_indices, len(pos), cfg.train.split_train_count, cfg.train.seed)
    x = _stage("transform", channels_to_vectors, h, n_c)
    normalizer = _stage("transform", fit_normalizer, x[tr], cfg.transform.normalizer)
    x_tr = normalizer.apply(x[tr]).astype(cfg.train.dtype)
    spec = _stage(
        "model",
        LayerSpec,
        n_t=h.shape[1],
        n_c=n_c,
        codeword_len=cfg.model.l,
        width_factor=cfg.model.beta,
        activation=cfg.model.activation,
    )
    result = ExperimentResult(cfg, retention=retention)
    for B in cfg.zones.b:
        log.info("method: %d zone(s)", B)
        result.methods.append(run_method(cfg, spec, B, pos[tr], x_tr, pos[te], x[te], normalizer, region))

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.out_dir = out
        write_outputs(result, out, pos, h, region, save_dataset)
    return result


def write_outputs(result: ExperimentResult, out: Path, pos, h, region, save_dataset: bool):
    cfg = result.config
    runs = result.methods
    table = comparison_report([m.result for m in runs])
    write_report_csv(out / "report.csv", table)
    stamp = f"config {cfg.experiment.name} sha256 {cfg.digest()}"
    (out / "report.txt").write_text(f"{stamp}\n{table.render()}\n")
    write_cdf_csv(out / "cdf.csv", {m.result.name: m.result.evaluation for m in runs})
    write_cdf_csv(out / "cdf_oracle.csv", {m.result.name: m.oracle for m in runs})
    for m in runs:
        save_model(out / f"bundle_B{m.result.B}.zcm1", m.bundle)
    if save_dataset:
        write_dataset(out / "dataset.zcd1", pos, h)

    mob = cfg.mobility
    mcfg = MobilityConfig(mob.speed_kmh * KMH, mob.horizon_s, mob.dt_s, region[0], region[1], mob.seed)
    traj = simulate_trajectory(mcfg)
    methods = []
    for m in runs:
        part = m.bundle.partition
        zones = part.classify(traj.positions)
        write_trajectory_csv(out / f"trajectory_B{m.result.B}.csv", traj, zones)
        rate_mean, rate_std = switch_rate_over_seeds(mcfg, part.classify, mob.repeats)
        ev, orc = m.result.evaluation, m.oracle
        methods.append(
            dict(
                name=m.result.name,
                B=m.result.B,
                zone_sizes=m.zone_sizes,
                centroids=part.centroids.tolist(),
                mean_nmse_db_position=ev.mean_nmse_db,
                mean_nmse_db_oracle=orc.mean_nmse_db,
                mean_of_db_position=ev.mean_of_db,
                oracle_agreement=float(np.mean(ev.zones == orc.zones)),
                routing_fallbacks=ev.fallbacks,
                zone_breakdown={str(k): v for k, v in ev.zone_breakdown().items()},
                n_zs=m.result.overhead.mpur * mob.horizon_s,
                r_zs_mean=rate_mean,
                r_zs_std=rate_std,
                mptr=m.result.overhead.mptr,
                downloads=m.result.overhead.downloads,
                init_seeds=[[cfg.train.seed, m.result.B, b] for b in range(1, m.result.B + 1)],
            )
        )
    written = ["report.csv", "report.txt", "cdf.csv", "cdf_oracle.csv"]
    written += [f"{kind}_B{m.result.B}.{ext}" for m in runs for kind, ext in (("bundle", "zcm1"), ("trajectory", "csv"))]
    if save_dataset:
        written.append("dataset.zcd1")
    artifacts = {name: hashlib.sha256((out / name).read_bytes()).hexdigest() for name in sorted(written)}
    manifest = dict(
        artifacts_sha256=artifacts,
        config=cfg.to_dict(),
        config_sha256=cfg.digest(),
        seeds=dict(
            scene=cfg.scene.seed,
            split=cfg.train.seed,
            zones=cfg.zones.seed,
            train=cfg.train.seed,
            mobility=cfg.mobility.seed,
        ),
        delay_energy_retention=result.retention,
        normalizer_scale=runs[0].bundle.normalizer.scale if runs else None,
        methods=methods,
    )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
