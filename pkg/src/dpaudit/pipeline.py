"""End-to-end audit experiments driven by a single TOML config.

A run builds one dataset and one canary set, then for every seed in the
config: splits the canaries in half, trains on the data plus the IN half,
plays the guessing games against the final model, and converts each
outcome into a privacy lower bound. Results aggregate into a JSON report;
a variant drives the same audit across training checkpoints and emits a
CSV curve.

Canary flavors:

* ``random``: held-out examples with their true labels.
* ``mislabeled``: the same held-out examples with labels re-rolled to a
  wrong class.
* ``metagradient``: pixels optimized to widen the IN/OUT loss gap by
  differentiating through training.

Seeds may run in parallel worker threads; the report is assembled in seed
order either way, so the emitted bytes do not depend on the worker count.
"""

import csv
import hashlib
import io
import json
import statistics

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import models
from .bounds import EpsilonEstimate, estimate_from_record
from .canary import (
    CanarySet,
    MetaConfig,
    assemble_training_set,
    optimize_canaries,
    with_split,
)
from .data import Dataset, ingest_cifar_binary, synth_gaussians, synth_two_moons
from .errors import AuditError, DimensionError, FormatError
from .game import GuessRecord, run_audit_game, save_guess_record
from .models import ModelSpec, init_params
from .training import DPSGDConfig, TrainingTape, dpsgd_train, sgd_train

CANARY_TYPES = ("random", "mislabeled", "metagradient")
PROCEDURES = ("steinke", "pairs")

_POOL_ID_START = 5_000_000
_PRETRAIN_ID_START = 10_000_000
_POOL_SEED_OFFSET = 1_000_003


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one audit experiment.

    ``dataset``, ``model``, ``meta`` and ``pretrain`` stay as plain dicts
    because parts of them (input dimension, class count, canary count) are
    only known once the dataset is built. ``training`` is fully resolved.
    """

    name: str
    seeds: tuple[int, ...]
    dataset: dict
    model: dict
    training: DPSGDConfig
    canary_type: str = "random"
    num_canaries: int = 200
    tau: float = 0.05
    delta: float = 1e-5
    procedures: tuple[str, ...] = ("steinke", "pairs")
    k_pos: int = 20
    k_neg: int = 20
    k_pairs: int = 20
    meta: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    out_dir: str = ""
    save_tapes: bool = False
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise DimensionError("seed list must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise DimensionError("seed list must not repeat")
        if self.canary_type not in CANARY_TYPES:
            raise DimensionError(f"unknown canary type {self.canary_type!r}")
        if self.num_canaries < 2 or self.num_canaries % 2:
            raise DimensionError("num_canaries must be even and at least 2")
        for proc in self.procedures:
            if proc not in PROCEDURES:
                raise DimensionError(f"unknown procedure {proc!r}")
        if not self.procedures:
            raise DimensionError("need at least one audit procedure")
        if not (0.0 < self.tau < 1.0) or self.delta < 0.0:
            raise DimensionError("need 0 < tau < 1 and delta >= 0")
        if self.k_pos + self.k_neg > self.num_canaries:
            raise DimensionError("top/bottom budgets exceed the canary count")
        if self.k_pairs > self.num_canaries // 2:
            raise DimensionError("pair budget exceeds the pair count")
        if self.workers < 1:
            raise DimensionError("workers must be at least 1")
        kind = self.dataset.get("kind")
        if kind not in ("gaussians", "two_moons", "cifar"):
            raise DimensionError(f"unknown dataset kind {kind!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seeds": list(self.seeds),
            "dataset": dict(self.dataset),
            "model": dict(self.model),
            "training": self.training.to_dict(),
            "canary_type": self.canary_type,
            "num_canaries": self.num_canaries,
            "tau": self.tau,
            "delta": self.delta,
            "procedures": list(self.procedures),
            "k_pos": self.k_pos,
            "k_neg": self.k_neg,
            "k_pairs": self.k_pairs,
            "meta": dict(self.meta),
            "pretrain": dict(self.pretrain),
            "out_dir": self.out_dir,
            "save_tapes": self.save_tapes,
            "workers": self.workers,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        audit = raw.pop("audit", {})
        training = DPSGDConfig.from_dict(raw.pop("training", {}))
        return cls(
            name=str(raw.pop("name", "experiment")),
            seeds=tuple(int(s) for s in raw.pop("seeds", [])),
            dataset=dict(raw.pop("dataset", {})),
            model=dict(raw.pop("model", {})),
            training=training,
            canary_type=str(raw.pop("canary_type", "random")),
            num_canaries=int(raw.pop("num_canaries", 200)),
            tau=float(audit.get("tau", raw.pop("tau", 0.05))),
            delta=float(audit.get("delta", raw.pop("delta", 1e-5))),
            procedures=tuple(audit.get("procedures", raw.pop("procedures", ["steinke", "pairs"]))),
            k_pos=int(audit.get("k_pos", raw.pop("k_pos", 20))),
            k_neg=int(audit.get("k_neg", raw.pop("k_neg", 20))),
            k_pairs=int(audit.get("k_pairs", raw.pop("k_pairs", 20))),
            meta=dict(raw.pop("meta", {})),
            pretrain=dict(raw.pop("pretrain", {})),
            out_dir=str(raw.pop("out_dir", "")),
            save_tapes=bool(raw.pop("save_tapes", False)),
            workers=int(raw.pop("workers", 1)),
        )


def load_config(path: str) -> ExperimentConfig:
    """Parse an experiment config from a TOML file."""
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise FormatError(f"bad config file {path}: {e}") from None
    return ExperimentConfig.from_dict(raw)


# ------------------------------------------------------------ construction

def build_dataset(dataset_cfg: dict, id_start: int = 0, seed_offset: int = 0) -> Dataset:
    """Materialize the dataset a config describes.

    ``seed_offset`` shifts the generation seed so held-out pools can be
    drawn from the same distribution without overlapping the training draw.
    """
    cfg = dict(dataset_cfg)
    kind = cfg.pop("kind")
    seed = int(cfg.pop("seed", 0)) + seed_offset
    if kind == "gaussians":
        return synth_gaussians(
            classes=int(cfg.pop("classes", 4)),
            dim=int(cfg.pop("dim", 16)),
            per_class=int(cfg.pop("per_class", 1250)),
            spread=float(cfg.pop("spread", 0.15)),
            seed=seed,
            id_start=id_start,
        )
    if kind == "two_moons":
        return synth_two_moons(
            per_class=int(cfg.pop("per_class", 2500)),
            noise=float(cfg.pop("noise", 0.08)),
            seed=seed,
            id_start=id_start,
        )
    if kind == "cifar":
        data = ingest_cifar_binary(
            str(cfg.pop("path")), downscale=int(cfg.pop("downscale", 1)), id_start=id_start
        )
        limit = cfg.pop("limit", None)
        if limit is not None:
            data = data.subset(np.arange(int(limit)))
        return data
    raise DimensionError(f"unknown dataset kind {kind!r}")


def resolve_model_spec(model_cfg: dict, data: Dataset) -> ModelSpec:
    """Fill the model description with the dataset's dimensions."""
    cfg = dict(model_cfg)
    kind = str(cfg.pop("kind", "mlp1"))
    return ModelSpec(
        kind=kind,
        input_dim=data.input_dim,
        num_classes=data.num_classes,
        hidden_dim=int(cfg.pop("hidden_dim", 16)) if kind == "mlp1" else 0,
        activation=str(cfg.pop("activation", "tanh")),
    )


def _holdout_pool(cfg: ExperimentConfig, need: int) -> Dataset:
    """Examples from the training distribution that never enter training."""
    dcfg = dict(cfg.dataset)
    if dcfg.get("kind") == "cifar":
        full = build_dataset({**dcfg, "limit": None}, id_start=_POOL_ID_START)
        limit = int(dcfg.get("limit", len(full)))
        if len(full) < limit + need:
            raise DimensionError(
                f"cifar file has {len(full)} records, need {limit + need} "
                "to reserve a held-out canary pool"
            )
        return full.subset(np.arange(limit, limit + need))
    classes = int(dcfg.get("classes", 4)) if dcfg.get("kind") == "gaussians" else 2
    per_class = -(-need // classes)
    dcfg["per_class"] = per_class
    pool = build_dataset(dcfg, id_start=_POOL_ID_START, seed_offset=_POOL_SEED_OFFSET)
    return pool.subset(np.arange(need))


def build_canaries(
    cfg: ExperimentConfig, data: Dataset, spec: ModelSpec
) -> tuple[CanarySet, np.ndarray | None]:
    """Construct the configured canary flavor; one set shared by all seeds.

    Returns the unsplit canary set and, for the metagradient flavor, the
    per-metastep objective log (None otherwise).
    """
    m = cfg.num_canaries
    if cfg.canary_type == "metagradient":
        meta = _resolve_meta(cfg, spec)
        return optimize_canaries(data, spec, meta)
    pool = _holdout_pool(cfg, m)
    labels = pool.y.copy()
    if cfg.canary_type == "mislabeled":
        seed = int(cfg.dataset.get("seed", 0))
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x3157))))
        k = data.num_classes
        labels = (labels + rng.integers(1, k, size=m)) % k
    return CanarySet(z=pool.X, labels=labels, ids=pool.ids), None


def _resolve_meta(cfg: ExperimentConfig, spec: ModelSpec) -> MetaConfig:
    """Merge the meta table with defaults derived from the training config."""
    meta = dict(cfg.meta)
    inner_raw = meta.pop("training", None)
    if inner_raw is None:
        inner = replace(cfg.training, noise_multiplier=0.0, record_checkpoints=True)
    else:
        inner = DPSGDConfig.from_dict(inner_raw)
    return MetaConfig(
        num_canaries=cfg.num_canaries,
        metasteps=int(meta.pop("metasteps", 8)),
        step_size=float(meta.pop("step_size", 0.05)),
        inner=inner,
        optimizer=str(meta.pop("optimizer", "adam")),
        init=str(meta.pop("init", "mislabeled")),
        seed=int(meta.pop("seed", 0)),
    )


def _pretrain_params(cfg: ExperimentConfig, spec: ModelSpec) -> np.ndarray | None:
    """Non-private warm start on a disjoint pool, shared by every seed."""
    pre = dict(cfg.pretrain)
    if not pre.pop("enabled", False):
        return None
    if cfg.dataset.get("kind") == "cifar":
        raise DimensionError("pretraining pools are only synthesized, not cut from files")
    dcfg = dict(cfg.dataset)
    if "per_class" in pre:
        dcfg["per_class"] = int(pre.pop("per_class"))
    pool = build_dataset(dcfg, id_start=_PRETRAIN_ID_START, seed_offset=2 * _POOL_SEED_OFFSET)
    train_cfg = DPSGDConfig(
        steps=int(pre.pop("steps", cfg.training.steps)),
        learning_rate=float(pre.pop("learning_rate", cfg.training.learning_rate)),
        clip_norm=float("inf"),
        noise_multiplier=0.0,
        batch_size=cfg.training.batch_size,
        seed=int(pre.pop("seed", 0)),
        dtype=cfg.training.dtype,
    )
    tape = sgd_train(spec, pool, train_cfg)
    return tape.final_params


# ------------------------------------------------------------ reports

@dataclass
class SeedResult:
    """Everything one seed produced, or the error that stopped it."""

    seed: int
    estimates: dict[str, EpsilonEstimate] = field(default_factory=dict)
    records: dict[str, GuessRecord] = field(default_factory=dict)
    train_accuracy: float = float("nan")
    error: str | None = None
    tape: TrainingTape | None = None


@dataclass
class AuditReport:
    """Aggregated audit outcome across seeds."""

    name: str
    canary_type: str
    config_hash: str
    tau: float
    delta: float
    procedures: tuple[str, ...]
    results: list[SeedResult]

    def estimates_for(self, procedure: str) -> list[float]:
        return [
            r.estimates[procedure].epsilon_lb
            for r in self.results
            if r.error is None and procedure in r.estimates
        ]

    def aggregates(self) -> dict[str, dict[str, float]]:
        out = {}
        for proc in self.procedures:
            vals = self.estimates_for(proc)
            if vals:
                out[proc] = {
                    "average": float(np.mean(vals)),
                    "median": float(statistics.median(vals)),
                }
            else:
                out[proc] = {"average": float("nan"), "median": float("nan")}
        return out

    def to_json(self) -> str:
        payload = {
            "name": self.name,
            "canary_type": self.canary_type,
            "config_hash": self.config_hash,
            "tau": self.tau,
            "delta": self.delta,
            "procedures": list(self.procedures),
            "aggregates": self.aggregates(),
            "seeds": [
                {
                    "seed": r.seed,
                    "error": r.error,
                    "train_accuracy": None if np.isnan(r.train_accuracy) else r.train_accuracy,
                    "estimates": {
                        proc: json.loads(est.to_json_line())
                        for proc, est in sorted(r.estimates.items())
                    },
                }
                for r in self.results
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=2)


def _audit_one_seed(
    cfg: ExperimentConfig,
    spec: ModelSpec,
    data: Dataset,
    canaries: CanarySet,
    seed: int,
    init: np.ndarray | None,
) -> SeedResult:
    result = SeedResult(seed=seed)
    try:
        assigned = with_split(canaries, seed)
        trainset = assemble_training_set(data, assigned)
        train_cfg = replace(cfg.training, seed=seed)
        tape = dpsgd_train(spec, trainset, train_cfg, init=init)
        result.train_accuracy = models.predict_accuracy(spec, tape.final_params, trainset)
        for proc in cfg.procedures:
            budgets = (cfg.k_pos, cfg.k_neg) if proc == "steinke" else cfg.k_pairs
            record = run_audit_game(
                spec, tape.final_params, assigned, proc, budgets, seed=seed
            )
            result.records[proc] = record
            result.estimates[proc] = estimate_from_record(record, cfg.tau, cfg.delta)
        if cfg.save_tapes:
            result.tape = tape
    except (AuditError, FloatingPointError) as e:
        result.error = f"{type(e).__name__}: {e}"
    return result


def run_pipeline(cfg: ExperimentConfig) -> AuditReport:
    """Run the full audit: dataset, canaries, then per-seed train and guess.

    A failing seed is recorded in the report and does not stop the rest.
    Reports are deterministic functions of the config regardless of the
    worker count.
    """
    data = build_dataset(cfg.dataset)
    spec = resolve_model_spec(cfg.model, data)
    canaries, _ = build_canaries(cfg, data, spec)
    init = _pretrain_params(cfg, spec)

    def job(seed: int) -> SeedResult:
        return _audit_one_seed(cfg, spec, data, canaries, seed, init)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(job, cfg.seeds))
    else:
        results = [job(s) for s in cfg.seeds]
    return AuditReport(
        name=cfg.name,
        canary_type=cfg.canary_type,
        config_hash=cfg.config_hash(),
        tau=cfg.tau,
        delta=cfg.delta,
        procedures=cfg.procedures,
        results=results,
    )


def write_report(report: AuditReport, out_dir: str) -> str:
    """Write report.json plus the per-seed guess records; returns the JSON path."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "report.json")
    with open(path, "w", encoding="utf-8") as f:
        f.write(report.to_json() + "\n")
    lines = []
    for r in report.results:
        for proc, record in sorted(r.records.items()):
            save_guess_record(record, os.path.join(out_dir, f"guesses_seed{r.seed}_{proc}.txt"))
        for proc, est in sorted(r.estimates.items()):
            lines.append(est.to_json_line())
    with open(os.path.join(out_dir, "estimates.jsonl"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
    return path


# ------------------------------------------------------------ steps curve

def emit_steps_curve(
    cfg: ExperimentConfig, every: int = 100
) -> tuple[str, dict[str, np.ndarray], np.ndarray]:
    """Audit checkpoints of a non-private run every ``every`` steps.

    Returns (csv_text, per_procedure, steps) where per_procedure maps each
    procedure to a (num_seeds, num_checkpoints) estimate matrix. The CSV
    has one row per checkpoint: step, mean train accuracy, then a mean and
    standard deviation column per procedure, all averaged across seeds.
    """
    if every < 1:
        raise DimensionError("checkpoint stride must be positive")
    if cfg.training.noise_multiplier > 0:
        raise DimensionError("the steps curve is defined for non-private runs")
    data = build_dataset(cfg.dataset)
    spec = resolve_model_spec(cfg.model, data)
    canaries, _ = build_canaries(cfg, data, spec)
    steps = np.arange(0, cfg.training.steps + 1, every)
    per_proc = {p: np.zeros((len(cfg.seeds), len(steps))) for p in cfg.procedures}
    acc = np.zeros((len(cfg.seeds), len(steps)))

    def job(idx_seed):
        idx, seed = idx_seed
        assigned = with_split(canaries, seed)
        trainset = assemble_training_set(data, assigned)
        train_cfg = replace(cfg.training, seed=seed, record_checkpoints=True)
        tape = dpsgd_train(spec, trainset, train_cfg)
        out_acc = np.zeros(len(steps))
        out_eps = {p: np.zeros(len(steps)) for p in cfg.procedures}
        for j, t in enumerate(steps):
            params = tape.params_at(int(t))
            out_acc[j] = models.predict_accuracy(spec, params, trainset)
            for proc in cfg.procedures:
                budgets = (cfg.k_pos, cfg.k_neg) if proc == "steinke" else cfg.k_pairs
                record = run_audit_game(spec, params, assigned, proc, budgets, seed=seed)
                out_eps[proc][j] = estimate_from_record(record, cfg.tau, cfg.delta).epsilon_lb
        return idx, out_acc, out_eps

    jobs = list(enumerate(cfg.seeds))
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            outs = list(pool.map(job, jobs))
    else:
        outs = [job(js) for js in jobs]
    for idx, out_acc, out_eps in outs:
        acc[idx] = out_acc
        for proc in cfg.procedures:
            per_proc[proc][idx] = out_eps[proc]

    buf = io.StringIO()
    writer = csv.writer(buf)
    header = ["step", "train_accuracy"]
    for proc in cfg.procedures:
        header += [f"eps_{proc}_mean", f"eps_{proc}_std"]
    writer.writerow(header)
    for j, t in enumerate(steps):
        row = [int(t), f"{acc[:, j].mean():.6f}"]
        for proc in cfg.procedures:
            col = per_proc[proc][:, j]
            row += [f"{col.mean():.6f}", f"{col.std():.6f}"]
        writer.writerow(row)
    return buf.getvalue(), per_proc, steps
