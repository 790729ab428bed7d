"""Run a federation round by round and write per-round metrics."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import aggregation as agg
from .adversary import AttackPlan, evaluate_asr, plan_attack
from .config import ExperimentConfig, config_to_dict
from .data import (ClassValidationSets, Dataset, dirichlet_partition, generate_blobs,
                   load_idx, split_validation)
from .local import (ControlVariate, TrainConfig, client_stream, train_plain, train_prox,
                    train_scaffold)
from .nn import LayerLayout, ParamVector, evaluate, init_params, loss_and_grad

log = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "strategy", "clean_accuracy", "asr", "per_class_accuracy", "agg_wall_ms")


@dataclass
class RoundMetrics:
    round: int
    strategy: str
    clean_accuracy: float
    per_class_accuracy: list[float]
    asr: float | None = None
    agg_wall_ms: float = 0.0

    def as_dict(self) -> dict:
        return {
            "round": self.round,
            "strategy": self.strategy,
            "clean_accuracy": self.clean_accuracy,
            "asr": self.asr,
            "per_class_accuracy": list(self.per_class_accuracy),
            "agg_wall_ms": self.agg_wall_ms,
        }


@dataclass
class Federation:
    layout: LayerLayout
    clients: list[Dataset]
    vsets: ClassValidationSets
    test: Dataset
    attack: AttackPlan


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds.idx is not None:
        train = load_idx(ds.idx.train_images, ds.idx.train_labels, ds.idx.num_classes)
        test = load_idx(ds.idx.test_images, ds.idx.test_labels, train.num_classes)
        return train, test
    b = ds.blobs
    full = generate_blobs(b.num_classes, b.per_class + b.test_per_class, b.dim, b.spread,
                          b.seed, b.image_shape)
    per = b.per_class + b.test_per_class
    within = np.arange(len(full)) % per
    return (full.subset(np.flatnonzero(within < b.per_class)),
            full.subset(np.flatnonzero(within >= b.per_class)))


def build_federation(cfg: ExperimentConfig) -> Federation:
    train, test = load_data(cfg)
    plan = dirichlet_partition(train, cfg.n_clients, cfg.alpha, cfg.master_seed)
    vsets, holdout = split_validation(test, cfg.validation_cap)
    if len(holdout) == 0:
        holdout = test
    attack = plan_attack(cfg.attack, cfg.n_clients, train.image_shape)
    clients = [attack.poison(i, train.subset(a)) for i, a in enumerate(plan.assignments)]
    layout = LayerLayout.mlp(train.dim, cfg.hidden, train.num_classes)
    return Federation(layout, clients, vsets, holdout, attack)


class _Server:
    """Strategy dispatch plus whatever server state the strategy carries."""

    def __init__(self, cfg: ExperimentConfig, fed: Federation, model: ParamVector):
        self.cfg = cfg
        self.strategy = cfg.strategy
        self.server_c = model.zeros_like()
        self.client_c = {i: model.zeros_like() for i in range(cfg.n_clients)}
        self.masked = agg.MaskedAggregator(cfg.mask, fed.vsets)

    def train_client(self, cid: int, data: Dataset, model: ParamVector, round_idx: int):
        t = self.cfg.train
        tcfg = TrainConfig(t.local_epochs, t.batch_size, t.lr, t.momentum, t.weight_decay, t.mu,
                           client_stream(self.cfg.master_seed, cid, round_idx))
        if self.strategy == "fedprox":
            res = train_prox(model, data, tcfg)
            return agg.ClientUpdate(cid, res.model, res.samples, res.tau)
        if self.strategy != "scaffold":
            res = train_plain(model, data, tcfg)
            return agg.ClientUpdate(cid, res.model, res.samples, res.tau)
        grad_global = None
        if self.cfg.scaffold_mode == "gradient_diff":
            grad_global = loss_and_grad(model, data)[1]
        old_c = self.client_c[cid]
        res = train_scaffold(model, data, tcfg, ControlVariate(old_c, self.server_c))
        update = agg.ClientUpdate(
            cid, res.model, res.samples, res.tau,
            control_delta=old_c.like(res.updated_client_c.values - old_c.values),
            new_client_c=res.updated_client_c)
        if grad_global is not None:
            update.grad_global = grad_global
            update.grad_local = loss_and_grad(res.model, data)[1]
        return update

    def aggregate(self, updates: list[agg.ClientUpdate], global_prev: ParamVector) -> ParamVector:
        s = self.strategy
        if s == "nwfedavg":
            return agg.agg_nwfedavg(updates)
        if s in ("fedavg", "fedprox"):
            return agg.agg_fedavg(updates)
        if s == "fednova":
            return agg.agg_fednova(updates, global_prev)
        if s == "scaffold":
            model, self.server_c = agg.agg_scaffold(updates, self.server_c, self.cfg.scaffold_mode)
            for u in updates:
                self.client_c[u.client_id] = u.new_client_c
            return model
        return self.masked(updates)


def _measure(fed: Federation, cfg: ExperimentConfig, model: ParamVector, round_idx: int,
             wall_ms: float) -> RoundMetrics:
    acc, per_class = evaluate(model, fed.test)
    asr = None
    if cfg.attack.kind == "dba":
        asr = evaluate_asr(model, fed.test, fed.attack.triggers, cfg.attack.target_class)
    return RoundMetrics(round_idx, cfg.name, acc, [float(x) for x in per_class], asr,
                        wall_ms if cfg.record_timing else 0.0)


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> Iterator[RoundMetrics]:
    """Yield metrics for the initial model (round 0) and after each of ``cfg.rounds`` rounds.

    Clients train concurrently on ``workers`` threads; each has its own RNG
    stream and the reduction runs in client-id order, so the output does not
    depend on the worker count.
    """
    fed = build_federation(cfg)
    model = init_params(fed.layout, np.random.default_rng(
        np.random.SeedSequence([cfg.master_seed, 0xF00D])))
    server = _Server(cfg, fed, model)
    yield _measure(fed, cfg, model, 0, 0.0)

    n_workers = workers or cfg.workers
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        for r in range(1, cfg.rounds + 1):
            try:
                updates = list(pool.map(
                    lambda cid: server.train_client(cid, fed.clients[cid], model, r),
                    range(cfg.n_clients)))
                start = time.perf_counter()
                new_model = server.aggregate(updates, model)
                wall_ms = (time.perf_counter() - start) * 1000.0
            except Exception as exc:
                raise RuntimeError(f"round {r} ({cfg.strategy}): {exc}") from exc
            if not new_model.is_finite():
                raise RuntimeError(f"round {r} ({cfg.strategy}): non-finite parameters after aggregation")
            model = new_model
            metrics = _measure(fed, cfg, model, r, wall_ms)
            log.debug("round %d %s acc=%.4f asr=%s", r, cfg.name, metrics.clean_accuracy, metrics.asr)
            yield metrics


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_metrics(stream: Iterable[RoundMetrics], fmt: str, path) -> Path:
    path = Path(path)
    try:
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True)
        if fmt == "csv":
            with open(path, "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(CSV_COLUMNS)
                for m in stream:
                    w.writerow([
                        m.round, m.strategy, _fmt(m.clean_accuracy),
                        "" if m.asr is None else _fmt(m.asr),
                        ";".join(_fmt(x) for x in m.per_class_accuracy),
                        _fmt(m.agg_wall_ms),
                    ])
        elif fmt == "json":
            rows = [m.as_dict() for m in stream]
            path.write_text(json.dumps(rows, indent=1) + "\n")
        else:
            raise ValueError(f"unknown format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc
    return path


def read_metrics_csv(path) -> list[RoundMetrics]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(RoundMetrics(
                int(row["round"]), row["strategy"], float(row["clean_accuracy"]),
                [float(x) for x in row["per_class_accuracy"].split(";") if x],
                float(row["asr"]) if row["asr"] else None,
                float(row["agg_wall_ms"]),
            ))
    return out


# --- sweeps ----------------------------------------------------------------------


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class SummaryRow:
    label: str
    axes: dict
    accuracy: float
    asr: float | None
    improvement: float | None


def compare_runs(configs: Sequence[ExperimentConfig],
                 axes: Sequence[str] = ("strategy", "alpha"),
                 reference: str = "masked") -> list[SummaryRow]:
    """Final-round accuracy/ASR for each config plus the relative gain (in %) of
    the reference strategy over each other run with the same non-strategy axes.

    Configs may differ only in ``axes`` (plus ``label``, ``output`` and ``format``).
    """
    if not configs:
        raise ValueError("nothing to compare")
    ignored = set(axes) | {"label", "output", "format", "workers"}
    flat = [_flatten(config_to_dict(c)) for c in configs]
    base = {k: v for k, v in flat[0].items() if k not in ignored}
    for c, f in zip(configs, flat):
        other = {k: v for k, v in f.items() if k not in ignored}
        diff = sorted(k for k in set(base) | set(other) if base.get(k) != other.get(k))
        if diff:
            raise ValueError(f"config {c.name!r} differs outside the sweep axes: {', '.join(diff)}")

    finals = []
    for cfg in configs:
        last = None
        for last in run_experiment(cfg):
            pass
        finals.append(last)

    def group(f: dict) -> tuple:
        return tuple(f.get(a) for a in axes if a != "strategy")

    refs = {}
    for f, m in zip(flat, finals):
        if f["strategy"] == reference:
            refs.setdefault(group(f), m)

    rows = []
    for cfg, f, m in zip(configs, flat, finals):
        ref = refs.get(group(f))
        improvement = None
        if ref is not None and ref is not m and m.clean_accuracy > 0:
            improvement = (ref.clean_accuracy - m.clean_accuracy) / m.clean_accuracy * 100.0
        rows.append(SummaryRow(cfg.name, {a: f.get(a) for a in axes}, m.clean_accuracy,
                               m.asr, improvement))
    return rows


def format_summary(rows: Sequence[SummaryRow]) -> str:
    if not rows:
        return ""
    axes = list(rows[0].axes)
    header = ["label", *axes, "accuracy", "asr", "improvement_%"]
    lines = [header]
    for r in rows:
        lines.append([
            r.label, *(str(r.axes[a]) for a in axes), f"{r.accuracy:.4f}",
            "" if r.asr is None else f"{r.asr:.4f}",
            "" if r.improvement is None else f"{r.improvement:.2f}",
        ])
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in lines)
