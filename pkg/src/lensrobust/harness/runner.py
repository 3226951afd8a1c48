"""Experiment execution: training, attacks, per-image metric records,
aggregates and the w / k sweeps.

Per-image records are the source of truth. Every aggregate or sweep row can be
re-derived from the ``records_<regime>.csv`` files.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ..attacks import AttackResult, attribution_vector, run_attack, universal_random
from ..core import AttributionMap, DatasetManifest, format_real, load_manifest, save_map
from ..data import bundled_manifest
from ..diversity import lens_prec_at_k_div, lens_recall_at_k_div, topk_div_intersection
from ..errors import CapacityError, ConfigError, DataError, DomainError, UndefinedCorrelationError
from ..metrics import (
    MetricRecord,
    kendall_tau,
    lens_distance,
    lens_kendall,
    lens_prec_at_k,
    lens_recall_at_k,
    lens_spearman,
    spearman_rho,
    topk_intersection,
    write_records,
)
from ..model import AdversarialConfig, ToyNetwork, TrainConfig, load_network, predict, save_network, train
from .config import ExperimentConfig

log = logging.getLogger(__name__)

AGGREGATE_HEADER = ("attack_id", "metric", "k", "w", "epsilon", "training_regime", "mean", "std", "n")
ATTACK_HEADER = ("image_id", "attack_id", "epsilon", "delta_linf", "prediction_preserved", "chosen_iteration")
ERROR_HEADER = ("image_id", "attack_id", "metric", "k", "w", "epsilon", "code")
TRAIN_LOG_HEADER = ("epoch", "loss", "accuracy")

# metrics whose value does not depend on the LENS window / on k
W_FREE = ("topk", "spearman", "kendall")
K_FREE = ("spearman", "kendall", "lens_spearman", "lens_kendall")


# --- small IO helpers ---------------------------------------------------------------


def write_csv(path: Path, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with path.open("w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def read_csv(path: Path, header: tuple[str, ...]) -> list[list[str]]:
    try:
        with Path(path).open(newline="", encoding="ascii") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows or tuple(rows[0]) != header:
        raise DataError(f"{path}: expected header {','.join(header)}")
    return rows[1:]


def resolve_dataset(cfg: ExperimentConfig) -> DatasetManifest:
    path = bundled_manifest() if cfg.dataset == "builtin" else Path(cfg.dataset)
    if not path.exists():
        raise DataError(f"dataset manifest {path} does not exist")
    manifest = load_manifest(path)
    if manifest.image_shape()[0] != 1:
        raise DataError("only single-channel datasets are supported")
    return manifest


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0])


# --- training -------------------------------------------------------------------------


def train_regime(cfg: ExperimentConfig, manifest: DatasetManifest, regime: str) -> tuple[ToyNetwork, list]:
    adv = None
    if regime == "pgd":
        adv = AdversarialConfig(cfg.pgd_epsilon, cfg.pgd_steps, cfg.pgd_step_size)
    tcfg = TrainConfig(cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.seed, adv)
    dims = [int(np.prod(manifest.image_shape()))] + list(cfg.hidden) + [manifest.class_count]
    history: list = []
    net = train(manifest, tcfg, dims, cfg.activation, cfg.beta, history)
    return net, history


def cmd_train(cfg: ExperimentConfig) -> dict[str, Path]:
    manifest = resolve_dataset(cfg)
    written = {}
    for regime in cfg.regimes:
        log.info("training %s model (%d epochs)", regime, cfg.epochs)
        net, history = train_regime(cfg, manifest, regime)
        path = cfg.checkpoint(regime)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_network(net, path)
        write_csv(
            Path(cfg.out) / f"train_{regime}.csv",
            TRAIN_LOG_HEADER,
            ([e, format_real(loss), format_real(acc)] for e, loss, acc in history),
        )
        written[regime] = path
    return written


def load_regime(cfg: ExperimentConfig, regime: str) -> ToyNetwork:
    path = cfg.checkpoint(regime)
    if not path.exists():
        raise DataError(f"checkpoint {path} missing; run 'train' first")
    return load_network(path)


# --- sampling and attacks ---------------------------------------------------------------


def sample_indices(cfg: ExperimentConfig, manifest: DatasetManifest) -> list[int]:
    """Seeded sample without replacement, returned in image_id order."""
    if cfg.sample_count > len(manifest):
        raise ConfigError(f"sample_count {cfg.sample_count} exceeds dataset size {len(manifest)}")
    rng = np.random.default_rng(cfg.seed)
    chosen = rng.choice(len(manifest), size=cfg.sample_count, replace=False)
    return sorted((int(i) for i in chosen), key=lambda i: (manifest.image_id(i), i))


@dataclass
class AttackedImage:
    image_id: str
    attack_id: str
    epsilon: float
    original: np.ndarray  # flat clean image
    result: AttackResult


def attack_images(cfg: ExperimentConfig, net: ToyNetwork, manifest: DatasetManifest, indices: list[int],
                  attacks: Iterable[str], epsilons: Iterable[float]) -> list[AttackedImage]:
    X = manifest.load_images()
    attacks, epsilons = list(attacks), list(epsilons)
    universal = {
        eps: universal_random((X.shape[1],), eps, _derived_seed(cfg.seed, 2**32 - 1)) for eps in epsilons
    }
    out = []
    for n_done, idx in enumerate(indices):
        image_id = manifest.image_id(idx)
        seed = _derived_seed(cfg.seed, idx)
        for variant in attacks:
            for eps in epsilons:
                acfg = cfg.attack_config(variant, eps, seed)
                result = run_attack(net, X[idx], acfg, universal[eps] if variant == "universal_random" else None)
                out.append(AttackedImage(image_id, variant, eps, X[idx], result))
        if (n_done + 1) % 20 == 0:
            log.info("attacked %d/%d images", n_done + 1, len(indices))
    return out


def attack_rows(attacked: list[AttackedImage]) -> list[list[str]]:
    return [
        [a.image_id, a.attack_id, format_real(a.epsilon), format_real(a.result.delta_linf),
         "true" if a.result.prediction_preserved else "false", str(a.result.chosen_iteration)]
        for a in attacked
    ]


# --- metrics ------------------------------------------------------------------------------


def metric_combos(cfg: ExperimentConfig, metrics, ks, ws, n_pixels: int) -> list[tuple[str, int, int]]:
    """Ordered, duplicate-free (metric, k, w) triples."""
    combos: list[tuple[str, int, int]] = []
    for metric in metrics:
        k_list = [n_pixels] if metric in K_FREE else list(ks)
        w_list = list(ws)
        if metric in W_FREE or (metric == "topk_div" and cfg.w_div is not None):
            w_list = [0]
        for k in k_list:
            if k > n_pixels:
                raise ConfigError(f"k={k} exceeds the {n_pixels} pixels of an image")
            for w in w_list:
                if (metric, k, w) not in combos:
                    combos.append((metric, k, w))
    return combos


def compute_metric(metric: str, a: AttributionMap, b: AttributionMap, k: int, w: int, w_div: Optional[int]) -> float:
    wd = w if w_div is None else w_div
    if metric == "topk":
        return topk_intersection(a, b, k)
    if metric == "lens_prec":
        return lens_prec_at_k(a, b, k, w)
    if metric == "lens_recall":
        return lens_recall_at_k(a, b, k, w)
    if metric == "topk_div":
        return topk_div_intersection(a, b, k, wd)
    if metric == "lens_prec_div":
        return lens_prec_at_k_div(a, b, k, w, wd)
    if metric == "lens_recall_div":
        return lens_recall_at_k_div(a, b, k, w, wd)
    if metric == "spearman":
        return spearman_rho(a, b)
    if metric == "kendall":
        return kendall_tau(a, b)
    if metric == "lens_spearman":
        return lens_spearman(a, b, w)
    if metric == "lens_kendall":
        return lens_kendall(a, b, w)
    if metric == "lens_distance":
        return lens_distance(a, b, k, w)
    raise DomainError(f"unknown metric {metric!r}")


def error_code(exc: Exception) -> str:
    if isinstance(exc, CapacityError):
        return "capacity"
    if isinstance(exc, UndefinedCorrelationError):
        return "undefined_correlation"
    return "domain"


def score_attacks(cfg: ExperimentConfig, net: ToyNetwork, attacked: list[AttackedImage], combos,
                  dims: tuple[int, int]) -> tuple[list[MetricRecord], list[list[str]]]:
    """Records (error rows carry ``value=None``) plus the matching error listing."""
    records: list[MetricRecord] = []
    errors: list[list[str]] = []
    cache: dict[str, tuple[int, AttributionMap]] = {}
    for item in attacked:
        if item.image_id not in cache:
            label = int(predict(net, item.original))
            vec = attribution_vector(net, item.original, label, cfg.attribution, cfg.ig_steps)
            cache[item.image_id] = (label, AttributionMap(vec.reshape(dims)))
        label, a0 = cache[item.image_id]
        flagged = not item.result.prediction_preserved
        a1 = None
        if not flagged:
            vec = attribution_vector(net, item.result.perturbed.flat, label, cfg.attribution, cfg.ig_steps)
            a1 = AttributionMap(vec.reshape(dims))
        for metric, k, w in combos:
            value, code = None, "prediction_flip"
            if a1 is not None:
                try:
                    value = compute_metric(metric, a0, a1, k, w, cfg.w_div)
                    code = None
                except (DomainError, UndefinedCorrelationError) as exc:
                    code = error_code(exc)
            records.append(MetricRecord(item.image_id, item.attack_id, metric, k, w, item.epsilon, value))
            if code is not None:
                errors.append([item.image_id, item.attack_id, metric, str(k), str(w), format_real(item.epsilon), code])
    return records, errors


# --- aggregation ------------------------------------------------------------------------------


@dataclass(frozen=True)
class AggregateRow:
    attack_id: str
    metric: str
    k: int
    w: int
    epsilon: float
    training_regime: str
    mean: float
    std: float
    n: int

    def to_row(self) -> list[str]:
        return [self.attack_id, self.metric, str(self.k), str(self.w), format_real(self.epsilon),
                self.training_regime, format_real(self.mean), format_real(self.std), str(self.n)]


def mean_std(values: list[float]) -> tuple[float, float]:
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / n
    return mean, math.sqrt(var)


def aggregate(records: Iterable[MetricRecord], regime: str) -> list[AggregateRow]:
    """Mean and population std per (attack, metric, k, w, epsilon), in first-seen order."""
    groups: dict[tuple, list[float]] = {}
    for rec in records:
        key = (rec.attack_id, rec.metric, rec.k, rec.w, rec.epsilon)
        bucket = groups.setdefault(key, [])
        if rec.value is not None:
            bucket.append(rec.value)
    rows = []
    for key, values in groups.items():
        if values:
            mean, std = mean_std(values)
            rows.append(AggregateRow(*key, regime, mean, std, len(values)))
    return rows


def read_aggregate(path: Path) -> list[AggregateRow]:
    out = []
    for r in read_csv(path, AGGREGATE_HEADER):
        out.append(AggregateRow(r[0], r[1], int(r[2]), int(r[3]), float(r[4]), r[5], float(r[6]), float(r[7]), int(r[8])))
    return out


# --- commands ---------------------------------------------------------------------------------


def _regime_run(cfg, manifest, regime, attacks, epsilons, metrics, ks, ws):
    net = load_regime(cfg, regime)
    dims = manifest.image_shape()[1:]
    indices = sample_indices(cfg, manifest)
    combos = metric_combos(cfg, metrics, ks, ws, dims[0] * dims[1])
    log.info("%s: %d images x %d attacks x %d epsilons x %d metric combos",
             regime, len(indices), len(attacks), len(epsilons), len(combos))
    attacked = attack_images(cfg, net, manifest, indices, attacks, epsilons)
    records, errors = score_attacks(cfg, net, attacked, combos, dims)
    return attacked, records, errors


def cmd_attack(cfg: ExperimentConfig) -> Path:
    """Attack the sampled images; write summaries and the perturbed images."""
    manifest = resolve_dataset(cfg)
    out = Path(cfg.out)
    dims = manifest.image_shape()[1:]
    for regime in cfg.regimes:
        net = load_regime(cfg, regime)
        attacked = attack_images(cfg, net, manifest, sample_indices(cfg, manifest), cfg.attacks, cfg.epsilons)
        write_csv(out / f"attacks_{regime}.csv", ATTACK_HEADER, attack_rows(attacked))
        for a in attacked:
            target = out / "perturbed" / regime / f"{a.attack_id}_eps{a.epsilon:g}" / f"{a.image_id}.agf"
            target.parent.mkdir(parents=True, exist_ok=True)
            save_map(AttributionMap(a.result.perturbed.pixels.reshape(dims)), target)
    return out


def cmd_evaluate(cfg: ExperimentConfig) -> Path:
    manifest = resolve_dataset(cfg)
    out = Path(cfg.out)
    all_rows: list[AggregateRow] = []
    for regime in cfg.regimes:
        attacked, records, errors = _regime_run(
            cfg, manifest, regime, cfg.attacks, cfg.epsilons, cfg.metrics, cfg.k_values, cfg.w_values)
        out.mkdir(parents=True, exist_ok=True)
        write_records(out / f"records_{regime}.csv", records)
        write_csv(out / f"errors_{regime}.csv", ERROR_HEADER, errors)
        write_csv(out / f"attacks_{regime}.csv", ATTACK_HEADER, attack_rows(attacked))
        all_rows += aggregate(records, regime)
    write_csv(out / "aggregate.csv", AGGREGATE_HEADER, (r.to_row() for r in all_rows))
    return out / "aggregate.csv"


def _sweep_means(cfg, records, metrics, attacks, axis: str, grid, fixed: int, n_pixels: int) -> list[list[str]]:
    """Mean per (grid value, metric, attack). ``fixed`` is the k (w-sweep) or
    w (k-sweep) held constant; metrics that ignore the swept axis repeat."""
    groups: dict[tuple, list[float]] = {}
    for rec in records:
        if rec.value is not None:
            groups.setdefault((rec.metric, rec.attack_id, rec.k, rec.w), []).append(rec.value)

    def key(metric, g):
        k, w = (fixed, g) if axis == "w" else (g, fixed)
        if metric in K_FREE:
            k = n_pixels
        if metric in W_FREE or (metric == "topk_div" and cfg.w_div is not None):
            w = 0
        return k, w

    rows = []
    for g in grid:
        means = {}
        for metric in metrics:
            for attack in attacks:
                values = groups.get((metric, attack) + key(metric, g))
                means[metric, attack] = mean_std(values)[0] if values else None
                m = means[metric, attack]
                rows.append([str(g), metric, attack, "" if m is None else format_real(m)])
        if "topk" in metrics and "lens_prec" in metrics:
            for attack in attacks:
                lens, top = means["lens_prec", attack], means["topk", attack]
                rows.append([str(g), "disparity", attack, "" if lens is None or top is None else format_real(lens - top)])
    return rows


def _sweep(cfg: ExperimentConfig, axis: str) -> Path:
    manifest = resolve_dataset(cfg)
    out = Path(cfg.out)
    eps = cfg.effective_sweep_epsilon()
    if axis == "w":
        metrics = list(cfg.metrics)
        ks, ws, grid = [cfg.k_values[0]], list(cfg.w_values), list(cfg.w_values)
    else:
        metrics = [m for m in cfg.metrics if m not in K_FREE]
        if not metrics:
            raise ConfigError("sweep-k needs at least one k-dependent metric")
        ks, ws, grid = list(cfg.k_values), [cfg.w_values[0]], list(cfg.k_values)
    regime = cfg.sweep_regime
    _, records, errors = _regime_run(cfg, manifest, regime, cfg.attacks, [eps], metrics, ks, ws)
    out.mkdir(parents=True, exist_ok=True)
    write_records(out / f"sweep_{axis}_records.csv", records)
    write_csv(out / f"sweep_{axis}_errors.csv", ERROR_HEADER, errors)
    target = out / f"sweep_{axis}.csv"
    fixed = ks[0] if axis == "w" else ws[0]
    n_pixels = int(np.prod(manifest.image_shape()))
    rows = _sweep_means(cfg, records, metrics, cfg.attacks, axis, grid, fixed, n_pixels)
    write_csv(target, (axis, "metric", "attack", "mean"), rows)
    return target


def cmd_sweep_w(cfg: ExperimentConfig) -> Path:
    return _sweep(cfg, "w")


def cmd_sweep_k(cfg: ExperimentConfig) -> Path:
    return _sweep(cfg, "k")
