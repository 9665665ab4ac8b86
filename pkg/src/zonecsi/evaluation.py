"""NMSE, empirical CDFs, routed evaluation of zone models and comparison tables.

Headline "mean NMSE" is the dB value of the mean linear ratio. Exact
reconstructions have NMSE 0, i.e. -inf dB; CSV files write that as -400.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autoenc import LayerSpec, count_multiplications, count_parameters, reconstruct
from .errors import ConfigError, DegenerateInputError
from .mobility import OverheadReport
from .transform import Normalizer
from .zoning import ZonePartition

NEG_INF_DB = -400.0
ROUTINGS = ("position", "oracle")


def _to_db(linear):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(linear)


def nmse_per_sample(targets, estimates) -> np.ndarray:
    t = np.atleast_2d(np.asarray(targets, dtype=float))
    e = np.atleast_2d(np.asarray(estimates, dtype=float))
    if t.shape != e.shape:
        raise ConfigError(f"target shape {t.shape} != estimate shape {e.shape}")
    power = (t * t).sum(axis=1)
    if np.any(power == 0):
        raise DegenerateInputError("NMSE is undefined for an all-zero target")
    return ((t - e) ** 2).sum(axis=1) / power


def nmse(target, estimate) -> tuple[float, float]:
    """(linear, dB) normalized squared error of one vector."""
    lin = float(nmse_per_sample(target, estimate)[0])
    return lin, float(_to_db(lin))


def build_cdf(values) -> tuple[np.ndarray, np.ndarray]:
    """Sorted values and right-continuous step heights k/n."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ConfigError("cannot build a CDF from no values")
    n = len(v)
    return v, np.arange(1, n + 1) / n


@dataclass
class EvalReport:
    routing: str
    nmse_linear: np.ndarray
    zones: np.ndarray  # zone used for each sample, 1-based
    fallbacks: int = 0  # samples whose own zone had no model

    @property
    def nmse_db(self) -> np.ndarray:
        return _to_db(self.nmse_linear)

    @property
    def mean_nmse_linear(self) -> float:
        return float(self.nmse_linear.mean())

    @property
    def mean_nmse_db(self) -> float:
        return float(_to_db(self.mean_nmse_linear))

    @property
    def mean_of_db(self) -> float:
        return float(self.nmse_db.mean())

    def cdf(self):
        return build_cdf(self.nmse_db)

    def zone_breakdown(self) -> dict:
        """zone id -> (sample count, mean NMSE dB)."""
        out = {}
        for b in np.unique(self.zones):
            sel = self.nmse_linear[self.zones == b]
            out[int(b)] = (int(sel.size), float(_to_db(sel.mean())))
        return out


def _reconstruct_raw(model, normalizer: Optional[Normalizer], v):
    if normalizer is None:
        return reconstruct(model, v)
    return normalizer.invert(reconstruct(model, normalizer.apply(v)))


def evaluate(
    models: Sequence,
    partition: ZonePartition,
    vectors,
    positions,
    normalizer: Optional[Normalizer] = None,
    routing: str = "position",
) -> EvalReport:
    """Route every test vector to one zone model and score the reconstruction.

    ``vectors`` are unnormalized truncated angular-delay vectors; the models
    operate on ``normalizer.apply(vectors)``. A ``None`` entry in ``models``
    marks a zone without a trained model: position routing then falls back to
    the nearest centroid that has one and counts the event.
    """
    if routing not in ROUTINGS:
        raise ConfigError(f"routing must be one of {ROUTINGS}, got {routing!r}")
    if len(models) != partition.B:
        raise ConfigError(f"got {len(models)} models for B={partition.B} zones")
    available = [i for i, m in enumerate(models) if m is not None]
    if not available:
        raise ConfigError("no trained zone models to evaluate")
    v = np.atleast_2d(np.asarray(vectors, dtype=float))
    if len(v) == 0:
        raise ConfigError("empty test set")
    dims = {models[i].spec.input_dim for i in available}
    if dims != {v.shape[1]}:
        raise ConfigError(f"model input dimensions {sorted(dims)} do not match vectors of length {v.shape[1]}")
    power = (v * v).sum(axis=1)
    if np.any(power == 0):
        raise DegenerateInputError("NMSE is undefined for an all-zero target")

    if routing == "oracle":
        err = np.full((len(v), partition.B), np.inf)
        for i in available:
            err[:, i] = ((_reconstruct_raw(models[i], normalizer, v) - v) ** 2).sum(axis=1)
        idx = np.argmin(err, axis=1)  # first minimum: smallest zone id on ties
        return EvalReport(routing, err[np.arange(len(v)), idx] / power, idx + 1, 0)

    own = partition.classify(positions) - 1
    if len(own) != len(v):
        raise ConfigError("positions and vectors differ in length")
    routed = own.copy()
    missing = np.array([models[b] is None for b in own])
    if missing.any():
        # nearest centroid among zones that do have a model
        p = np.atleast_2d(np.asarray(positions, dtype=float))[missing, :2]
        c = partition.centroids[available]
        d2 = ((p[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)
        routed[missing] = np.asarray(available)[np.argmin(d2, axis=1)]
    lin = np.empty(len(v))
    for i in available:
        sel = routed == i
        if sel.any():
            est = _reconstruct_raw(models[i], normalizer, v[sel])
            lin[sel] = ((v[sel] - est) ** 2).sum(axis=1) / power[sel]
    return EvalReport(routing, lin, routed + 1, int(missing.sum()))


@dataclass
class MethodResult:
    """One row of a comparison: a trained configuration and its overhead."""

    name: str
    spec: LayerSpec
    B: int
    evaluation: Optional[EvalReport]
    overhead: OverheadReport


REPORT_COLUMNS = (
    "method",
    "mean_nmse_db",
    "mptr_params_per_s",
    "mpur_per_s",
    "multiplications",
    "params_encoder",
    "params_total",
)


@dataclass
class ComparisonTable:
    rows: list = field(default_factory=list)  # dicts keyed by REPORT_COLUMNS

    def render(self) -> str:
        if not self.rows:
            return "(no methods)"
        cells = [list(REPORT_COLUMNS)]
        for r in self.rows:
            db = r["mean_nmse_db"]
            cells.append(
                [
                    r["method"],
                    "n/a" if db is None else f"{db:.2f}",
                    f"{r['mptr_params_per_s']:.2f}",
                    f"{r['mpur_per_s']:.4f}",
                    f"{r['multiplications']:,}",
                    f"{r['params_encoder']:,}",
                    f"{r['params_total']:,}",
                ]
            )
        widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_COLUMNS))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells)


def comparison_report(results: Sequence[MethodResult]) -> ComparisonTable:
    """Accuracy, overhead and complexity columns for each method.

    Parameter columns are B times the per-zone counts; multiplications are
    per feedback, i.e. one encoder pass.
    """
    if not results:
        return ComparisonTable([])
    dims = {r.spec.input_dim for r in results}
    if len(dims) != 1:
        raise ConfigError(f"methods disagree on input dimension: {sorted(dims)}")
    rows = []
    for r in results:
        pc = count_parameters(r.spec)
        if r.overhead.v_encoder != pc.encoder:
            raise ConfigError(f"{r.name}: overhead payload {r.overhead.v_encoder} != encoder size {pc.encoder}")
        rows.append(
            dict(
                method=r.name,
                mean_nmse_db=None if r.evaluation is None else r.evaluation.mean_nmse_db,
                mptr_params_per_s=r.overhead.mptr,
                mpur_per_s=r.overhead.mpur,
                multiplications=count_multiplications(r.spec).encoder,
                params_encoder=r.B * pc.encoder,
                params_total=r.B * pc.total,
            )
        )
    return ComparisonTable(rows)


def _fmt(x: float) -> str:
    if x == -np.inf:
        return f"{NEG_INF_DB:.6f}"
    return f"{x:.6f}"


def write_report_csv(path, table: ComparisonTable):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in table.rows:
            db = r["mean_nmse_db"]
            w.writerow(
                [
                    r["method"],
                    "" if db is None else _fmt(db),
                    _fmt(r["mptr_params_per_s"]),
                    _fmt(r["mpur_per_s"]),
                    r["multiplications"],
                    r["params_encoder"],
                    r["params_total"],
                ]
            )


def write_cdf_csv(path, reports: dict):
    """``reports`` maps method name -> EvalReport. One block of rows per method."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("method", "nmse_db", "cdf"))
        for name, rep in reports.items():
            vals, frac = rep.cdf()
            for x, p in zip(vals, frac):
                w.writerow((name, _fmt(float(x)), f"{p:.6f}"))
