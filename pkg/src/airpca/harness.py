"""Config-driven AirPCA experiment driver."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import channel as ch
from .controller import (
    DetectorConfig,
    DetectorState,
    Gradual,
    OneShot,
    PowerLedger,
    Region,
    detect_region,
    power_for_round,
)
from .dataset import DataMatrix, center, load_mnist_idx, merge_shards, partition, synthesize_spectrum_dataset
from .pca import (
    StationaryPointSpec,
    centralized_pca,
    full_gradient,
    initial_subspace,
    local_gradient,
    local_gradients,
    make_stationary_point,
)

log = logging.getLogger(__name__)

VARIANTS = ("AdaptivePower", "FixedPower", "NoiseFree", "Centralized")
METRIC_COLUMNS = (
    "round",
    "objective",
    "grad_norm",
    "region",
    "p_rx",
    "mean_active_count",
    "mean_tx_power",
    "savings",
)


def desk_spectrum(D: int = 20) -> list[float]:
    top = [4.0, 3.6, 3.3, 2.0]
    tail = np.geomspace(0.5, 0.05, D - len(top))
    return top + [round(float(t), 6) for t in tail]


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # "synthetic" or "mnist"
    D: int = 20
    L: int = 400
    d: int = 3
    seed: int = 0
    spectrum: list | None = None
    path: str | None = None
    center: bool = False


@dataclass
class ChannelSpec:
    M: int = 1000
    G: float = 0.2
    p_bar_dbm: float = 26.0
    noise_power_dbm: float = -100.0
    p_outage: float = 0.0

    def build(self) -> ch.ChannelConfig:
        return ch.ChannelConfig.from_dbm(self.M, self.G, self.p_bar_dbm, self.noise_power_dbm, self.p_outage)


@dataclass
class DetectorSpec:
    epsilon_rel: float = 0.05
    epsilon: float | None = None  # absolute override
    n0: int = 50
    f0_rel: float = 0.01
    f0: float | None = None  # absolute override
    input: str = "true"  # "true" gradient norm or "noisy" aggregate


@dataclass
class PowerSpec:
    scheme: str = "gradual"  # "gradual" or "oneshot"
    q: float = 0.8
    p_rx_min_frac: float = 0.1


@dataclass
class InitSpec:
    mode: str = "identity"  # identity | saddle | saddle_approach | optimum
    indices: list | None = None  # eigen indices for saddle modes; default skips the top one
    scale: float = 0.5  # saddle_approach starts at scale * saddle


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    K: int = 20
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    mu: float = 0.005
    rounds: int = 5000
    detector: DetectorSpec = field(default_factory=DetectorSpec)
    power: PowerSpec = field(default_factory=PowerSpec)
    variant: str = "AdaptivePower"
    batch_size: int | None = None
    init: InitSpec = field(default_factory=InitSpec)
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0])
    targets: list = field(default_factory=lambda: [0.07, 0.02])
    early_stop: bool = False

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be > 0")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.power.scheme not in ("gradual", "oneshot"):
            raise ValueError(f"unknown power scheme {self.power.scheme!r}")
        if self.detector.input not in ("true", "noisy"):
            raise ValueError("detector.input must be 'true' or 'noisy'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        nested = {
            "dataset": DatasetSpec,
            "channel": ChannelSpec,
            "detector": DetectorSpec,
            "power": PowerSpec,
            "init": InitSpec,
        }
        for key, typ in nested.items():
            if key in raw:
                raw[key] = _build(typ, raw[key])
        return _build(cls, raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. replace(**{"channel.G": 0.5})."""
        raw = self.to_dict()
        for key, value in changes.items():
            set_path(raw, key, value)
        return ExperimentConfig.from_dict(raw)


def _build(typ, raw):
    if isinstance(raw, typ):
        return raw
    names = {f.name for f in dataclasses.fields(typ)}
    unknown = set(raw) - names
    if unknown:
        raise ValueError(f"unknown {typ.__name__} keys: {sorted(unknown)}")
    return typ(**raw)


def set_path(raw: dict, dotted: str, value):
    parts = dotted.split(".")
    node = raw
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ValueError(f"unknown config field {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ValueError(f"unknown config field {dotted!r}")
    node[parts[-1]] = value


def desk_config(**overrides) -> ExperimentConfig:
    """Small synthetic setup that runs in about a second per 5000 rounds.

    The band noise is raised far above a realistic receiver floor so that
    channel noise, not only the truncation-induced data noise, drives the
    escape from the skip-top saddle at this tiny problem size.
    """
    cfg = ExperimentConfig(
        dataset=DatasetSpec(D=20, L=400, d=3, seed=7, spectrum=desk_spectrum(20)),
        K=20,
        channel=ChannelSpec(M=1000, G=0.2, p_bar_dbm=26.0, noise_power_dbm=43.0),
        mu=0.001,
        rounds=5000,
        detector=DetectorSpec(epsilon_rel=0.25, n0=2000, f0_rel=0.01),
        power=PowerSpec(scheme="gradual", q=0.8, p_rx_min_frac=0.05),
        init=InitSpec(mode="saddle"),
    )
    return cfg.replace(**overrides) if overrides else cfg


@dataclass
class RoundMetrics:
    round: int
    objective: float
    grad_norm: float
    region: str
    p_rx: float
    mean_active_count: float
    mean_tx_power: float
    savings: float


@dataclass
class RunSummary:
    final_objective: float
    centralized_objective: float
    error_ratio: float
    latency_to_target: dict
    energy_per_device: list
    mean_energy_per_device: float
    rounds_run: int
    diverged: bool = False
    empty_element_events: int = 0
    epsilon: float = float("nan")
    p_rx_max_avg: float = float("nan")
    total_p_rx: float = 0.0

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["latency_to_target"] = {str(k): v for k, v in self.latency_to_target.items()}
        return out


@dataclass
class Problem:
    """Data-dependent pieces shared by every run on the same dataset spec."""

    data: DataMatrix
    covs: np.ndarray
    sizes: np.ndarray
    shards: list
    global_cov: np.ndarray
    trace: float
    centralized_objective: float
    d: int


def build_dataset(spec: DatasetSpec) -> DataMatrix:
    if spec.source == "synthetic":
        spectrum = spec.spectrum if spec.spectrum is not None else desk_spectrum(spec.D)
        data = synthesize_spectrum_dataset(spec.D, spec.L, spectrum, spec.seed)
    elif spec.source == "mnist":
        if spec.path is None:
            raise ValueError("mnist dataset needs a path")
        data = load_mnist_idx(spec.path, spec.L, seed=spec.seed)
    else:
        raise ValueError(f"unknown dataset source {spec.source!r}")
    return center(data) if spec.center else data


def build_problem(cfg: ExperimentConfig) -> Problem:
    data = build_dataset(cfg.dataset)
    shards = partition(data, cfg.K, seed=cfg.dataset.seed)
    trimmed = merge_shards(shards)
    gcov = trimmed.covariance()
    central = centralized_pca(trimmed, cfg.dataset.d)
    if central.rank_deficient:
        log.warning("data rank is below d=%d; oracle padded with null-space directions", cfg.dataset.d)
    return Problem(
        data=trimmed,
        covs=np.stack([s.covariance for s in shards]),
        sizes=np.array([s.size for s in shards], dtype=float),
        shards=shards,
        global_cov=gcov,
        trace=float(np.trace(gcov)),
        centralized_objective=central.objective,
        d=cfg.dataset.d,
    )


def fast_objective(w, problem: Problem) -> float:
    """Objective via the cached scatter matrix; equals pca.objective on the trimmed data."""
    rw = problem.global_cov @ w
    wtrw = w.T @ rw
    val = problem.trace - 2.0 * np.trace(wtrw) + np.sum((w.T @ w) * wtrw)
    return float(max(val, 0.0) / problem.data.L)


def initial_point(cfg: ExperimentConfig, problem: Problem) -> np.ndarray:
    D, d = problem.data.D, problem.d
    mode = cfg.init.mode
    if mode == "identity":
        return initial_subspace(D, d)
    if mode == "optimum":
        return make_stationary_point(problem.data, StationaryPointSpec(tuple(range(d))))
    if mode in ("saddle", "saddle_approach"):
        idx = tuple(cfg.init.indices) if cfg.init.indices is not None else tuple(range(1, d + 1))
        w = make_stationary_point(problem.data, StationaryPointSpec(idx))
        return w if mode == "saddle" else cfg.init.scale * w
    raise ValueError(f"unknown init mode {mode!r}")


def detector_epsilon(cfg: ExperimentConfig, problem: Problem) -> float:
    """Gradient-norm threshold, relative to the gradient at the identity start.

    The identity start is used as the scale reference because a run started
    at an exact stationary point has no gradient to scale against.
    """
    if cfg.detector.epsilon is not None:
        return float(cfg.detector.epsilon)
    ref = np.linalg.norm(full_gradient(initial_subspace(problem.data.D, problem.d), problem.data))
    return float(cfg.detector.epsilon_rel * ref)


def latency_to_target(metrics, centralized_objective: float, varpi_target: float):
    """First round whose objective is within (1 + target) of the centralized optimum."""
    if not varpi_target > 0:
        raise ValueError("varpi_target must be > 0")
    limit = (1.0 + varpi_target) * centralized_objective
    for m in metrics:
        if m.objective <= limit:
            return m.round
    return None


def run(cfg: ExperimentConfig, seed: int | None = None, problem: Problem | None = None):
    """Execute one experiment; returns (list[RoundMetrics], RunSummary)."""
    seed = cfg.seed if seed is None else seed
    problem = problem or build_problem(cfg)
    f_star = problem.centralized_objective
    K = cfg.K

    if cfg.variant == "Centralized":
        summary = RunSummary(
            final_objective=f_star,
            centralized_objective=f_star,
            error_ratio=0.0,
            latency_to_target={t: 0 for t in cfg.targets},
            energy_per_device=[0.0] * K,
            mean_energy_per_device=0.0,
            rounds_run=0,
        )
        return [], summary

    chan_cfg = cfg.channel.build()
    p_max = ch.max_avg_receive_power(chan_cfg)
    eps = detector_epsilon(cfg, problem)
    det_cfg = DetectorConfig(
        epsilon=eps,
        f0=cfg.detector.f0 if cfg.detector.f0 is not None else cfg.detector.f0_rel,
        n0=cfg.detector.n0,
        f0_relative=cfg.detector.f0 is None,
    )
    state = DetectorState(det_cfg)
    ledger = None
    if cfg.variant == "AdaptivePower":
        scheme = OneShot() if cfg.power.scheme == "oneshot" else Gradual(cfg.power.q)
        ledger = PowerLedger(cfg.power.p_rx_min_frac * p_max, p_max, scheme)

    root = np.random.SeedSequence(seed)
    chan_rng, batch_rng = (np.random.default_rng(s) for s in root.spawn(2))

    w = initial_point(cfg, problem)
    D, d = w.shape
    c = (D * d + 1) // 2
    history: list[float] = []
    metrics: list[RoundMetrics] = []
    energy = np.zeros(K)
    total_p = 0.0
    empty_events = 0
    diverged = False
    calm_since = None

    # overflow on a diverging run is detected and flagged below, not warned about
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(cfg.rounds):
            f_n = fast_objective(w, problem)
            if not math.isfinite(f_n) or not np.all(np.isfinite(w)):
                diverged = True
                log.warning("run diverged at round %d", n)
                break
            history.append(f_n)
            region = state.label

            if cfg.batch_size is None:
                grads = local_gradients(w, problem.covs, problem.sizes)
            else:
                grads = np.stack([local_gradient(w, s, cfg.batch_size, batch_rng) for s in problem.shards])
            g = grads.mean(axis=0)

            if cfg.variant == "NoiseFree":
                p_rx = float("nan")
                g_hat = g
                active, tx = float(K), 0.0
            else:
                p_rx = power_for_round(ledger, region) if ledger is not None else p_max
                stats = ch.compute_normalization(grads)
                real = ch.sample_channel(chan_cfg, K, c, chan_rng)
                out = ch.transmit_and_aggregate(grads, stats, real, p_rx)
                g_hat = out.noisy_gradient
                active = float(real.active_count.mean())
                tx = float(out.per_device_tx_power.mean())
                energy += out.per_device_tx_power
                empty_events += out.empty_elements
                total_p += p_rx

            ghat_norm = float(np.linalg.norm(g_hat))
            metrics.append(
                RoundMetrics(
                    round=n,
                    objective=f_n,
                    grad_norm=ghat_norm,
                    region=region.value,
                    p_rx=p_rx,
                    mean_active_count=active,
                    mean_tx_power=tx,
                    savings=ledger.savings if ledger is not None else 0.0,
                )
            )

            probe = float(np.linalg.norm(g)) if cfg.detector.input == "true" else ghat_norm
            detect_region(state, probe, history.__getitem__, n)

            if cfg.early_stop and state.label is Region.OPTIMUM and n >= 100:
                if abs(history[n - 100] - f_n) <= 1e-6 * max(f_n, 1e-300):
                    calm_since = n
                    break

            if not np.all(np.isfinite(g_hat)):
                diverged = True
                break
            w = w - cfg.mu * g_hat

    final = fast_objective(w, problem) if not diverged else float("nan")
    if not math.isfinite(final):
        diverged = True
    summary = RunSummary(
        final_objective=final,
        centralized_objective=f_star,
        error_ratio=final / f_star - 1.0 if f_star > 0 else float("nan"),
        latency_to_target={t: latency_to_target(metrics, f_star, t) for t in cfg.targets},
        energy_per_device=energy.tolist(),
        mean_energy_per_device=float(energy.mean()),
        rounds_run=len(metrics),
        diverged=diverged,
        empty_element_events=empty_events,
        epsilon=eps,
        p_rx_max_avg=p_max,
        total_p_rx=total_p,
    )
    if calm_since is not None:
        log.info("early stop at round %d", calm_since)
    return metrics, summary


def write_metrics_csv(metrics, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for m in metrics:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in dataclasses.astuple(m)])


def write_run_outputs(metrics, summary: RunSummary, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(metrics, out / "metrics.csv")
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2))


SWEEP_COLUMNS = (
    "axis",
    "value",
    "n_seeds",
    "final_objective_mean",
    "final_objective_std",
    "error_ratio_mean",
    "error_ratio_std",
    "centralized_objective",
    "diverged_runs",
)


def _sweep_cell(args):
    cfg, seed, targets = args
    _, summary = run(cfg, seed=seed)
    return summary


def sweep(base: ExperimentConfig, axis: str, values, seeds, workers: int = 1):
    """Run the cross product values x seeds and aggregate per value.

    Returns a list of dict rows; latency columns are medians over the seeds
    that reached the target (NaN when none did).
    """
    try:
        cells = [(base.replace(**{axis: v}), v) for v in values]
    except (ValueError, TypeError) as err:
        raise ValueError(f"cannot sweep axis {axis!r}: {err}") from None
    jobs = [(cfg, s, base.targets) for cfg, _ in cells for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_sweep_cell, jobs))
    else:
        summaries = [_sweep_cell(j) for j in jobs]

    rows = []
    for i, (cfg, value) in enumerate(cells):
        chunk = summaries[i * len(seeds) : (i + 1) * len(seeds)]
        finals = np.array([s.final_objective for s in chunk])
        ratios = np.array([s.error_ratio for s in chunk])
        row: dict[str, Any] = {
            "axis": axis,
            "value": value,
            "n_seeds": len(chunk),
            "final_objective_mean": float(np.mean(finals)),
            "final_objective_std": float(np.std(finals)),
            "error_ratio_mean": float(np.mean(ratios)),
            "error_ratio_std": float(np.std(ratios)),
            "centralized_objective": float(np.mean([s.centralized_objective for s in chunk])),
            "diverged_runs": int(sum(s.diverged for s in chunk)),
        }
        for t in base.targets:
            lat = [s.latency_to_target[t] for s in chunk if s.latency_to_target[t] is not None]
            row[f"latency_{t}_median"] = float(np.median(lat)) if lat else float("nan")
            row[f"latency_{t}_reached"] = len(lat)
        rows.append(row)
    return rows


def write_sweep_csv(rows, path):
    if not rows:
        raise ValueError("no sweep rows to write")
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
