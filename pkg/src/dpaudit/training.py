"""(DP-)SGD training with bit-replayable tapes.

One update step is

    w_t = w_{t-1} - lr * (sum_{i in S_t} clip(g_i(w_{t-1}), c) + xi_t)

where S_t is the step's index set (Poisson-sampled or a shuffled minibatch),
clip rescales a gradient to L2 norm at most c (identity when c is inf), and
xi_t ~ N(0, (sigma*c)^2 I) is drawn once per step. Clipped per-example
gradients are summed, never averaged; the learning rate absorbs any batch
scaling.

A :class:`TrainingTape` records everything needed to replay a run exactly:
config, initial parameters, every index set, a noise base seed (per-step
noise is regenerated from a counter-based generator keyed on the base and
the step index), the training arrays, and per-step parameter checkpoints.

Tape container layout (documented for interoperability, all multi-byte
values little-endian):

    bytes 0-7    magic b"DPATAPE1"
    bytes 8-15   uint64 header length in bytes
    header       UTF-8 JSON: format version, model spec, config, n,
                 input_dim, param dim, dtype tag, step count, noise base,
                 per-step index-set lengths, checkpoint flag
    arrays       raw buffers in order: init_params, checkpoints
                 (steps x dim, omitted when not recorded), final_params,
                 concatenated index sets (int64), X (float64), y (int64),
                 ids (int64), canary_slot (int64)
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import models
from .data import Dataset
from .errors import DimensionError, DivergenceError, FormatError, ReplayMismatchError
from .models import ModelSpec

_MAGIC = b"DPATAPE1"

UNCLIPPED = math.inf


@dataclass(frozen=True)
class DPSGDConfig:
    """Hyperparameters of one training run.

    Attributes:
        steps: number of updates, at least 1.
        learning_rate: positive step size applied to the summed gradient.
        clip_norm: per-example L2 clip threshold; math.inf disables clipping.
        noise_multiplier: sigma >= 0; the per-step noise std is sigma * clip_norm.
        sampling_prob: Poisson inclusion probability q in (0, 1].
        batch_size: when set, use shuffled fixed-size minibatches instead of
            Poisson sampling (sampling_prob is then ignored).
        seed: master seed; sampling, noise, and default init derive from it.
        dtype: "f32" or "f64" parameter/update precision.
        record_checkpoints: keep every iterate in the tape. Disabling leaves
            only the initial and final parameter vectors (a strict black-box
            record); replay and unrolled differentiation then refuse to run.
    """

    steps: int
    learning_rate: float
    clip_norm: float = UNCLIPPED
    noise_multiplier: float = 0.0
    sampling_prob: float = 1.0
    batch_size: int | None = None
    seed: int = 0
    dtype: str = "f64"
    record_checkpoints: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise DimensionError("steps must be at least 1")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise DimensionError("learning_rate must be positive and finite")
        if not self.clip_norm > 0:
            raise DimensionError("clip_norm must be positive (math.inf disables clipping)")
        if self.noise_multiplier < 0:
            raise DimensionError("noise_multiplier must be non-negative")
        if self.noise_multiplier > 0 and not math.isfinite(self.clip_norm):
            raise DimensionError("noise requires a finite clip_norm to set its scale")
        if not (0 < self.sampling_prob <= 1):
            raise DimensionError("sampling_prob must be in (0, 1]")
        if self.batch_size is not None and self.batch_size < 1:
            raise DimensionError("batch_size must be positive when given")
        models.resolve_dtype(self.dtype)

    @property
    def noise_std(self) -> float:
        return self.noise_multiplier * self.clip_norm if self.noise_multiplier > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "learning_rate": self.learning_rate,
            "clip_norm": None if math.isinf(self.clip_norm) else self.clip_norm,
            "noise_multiplier": self.noise_multiplier,
            "sampling_prob": self.sampling_prob,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "dtype": self.dtype,
            "record_checkpoints": self.record_checkpoints,
        }

    @staticmethod
    def from_dict(d: dict) -> "DPSGDConfig":
        clip = d.get("clip_norm")
        return DPSGDConfig(
            steps=int(d["steps"]),
            learning_rate=float(d["learning_rate"]),
            clip_norm=UNCLIPPED if clip is None else float(clip),
            noise_multiplier=float(d.get("noise_multiplier", 0.0)),
            sampling_prob=float(d.get("sampling_prob", 1.0)),
            batch_size=None if d.get("batch_size") is None else int(d["batch_size"]),
            seed=int(d.get("seed", 0)),
            dtype=d.get("dtype", "f64"),
            record_checkpoints=bool(d.get("record_checkpoints", True)),
        )


def clip_gradient(g: np.ndarray, clip_norm: float) -> np.ndarray:
    """Rescale g to L2 norm at most clip_norm: min(1, c/||g||) * g."""
    g = np.asarray(g)
    if not np.isfinite(g).all():
        raise DimensionError("gradient contains non-finite values")
    if not clip_norm > 0:
        raise DimensionError("clip_norm must be positive")
    if math.isinf(clip_norm):
        return g.copy()
    norm = float(np.linalg.norm(g))
    if norm <= clip_norm:
        return g.copy()
    return g * (clip_norm / norm)


@dataclass
class TrainingTape:
    """Complete record of one training run; replayable bit-for-bit."""

    spec: ModelSpec
    config: DPSGDConfig
    init_params: np.ndarray
    checkpoints: np.ndarray  # (steps, dim) when recorded, else (0, dim)
    final_params: np.ndarray
    index_sets: list[np.ndarray]
    noise_base: int
    X: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    canary_slot: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.canary_slot is None:
            self.canary_slot = np.full(len(self.y), -1, dtype=np.int64)

    @property
    def steps(self) -> int:
        return self.config.steps

    @property
    def has_checkpoints(self) -> bool:
        return self.checkpoints.shape[0] == self.steps

    def params_at(self, t: int) -> np.ndarray:
        """Parameter vector after update t (t = 0 is the initialization)."""
        if t < 0 or t > self.steps:
            raise DimensionError(f"step index {t} out of range [0, {self.steps}]")
        if t == 0:
            return self.init_params
        if t == self.steps:
            return self.final_params
        if not self.has_checkpoints:
            raise DimensionError("tape was recorded without intermediate checkpoints")
        return self.checkpoints[t - 1]

    def noise_for_step(self, t: int) -> np.ndarray | None:
        """Regenerate the noise vector added at update t (1-based), or None."""
        if t < 1 or t > self.steps:
            raise DimensionError(f"step index {t} out of range [1, {self.steps}]")
        return _noise(self.noise_base, t, self.spec.param_count, self.config)

    def training_data(self) -> Dataset:
        return Dataset(self.X, self.y, self.ids, self.canary_slot)


def _noise(noise_base: int, t: int, dim: int, cfg: DPSGDConfig) -> np.ndarray | None:
    if cfg.noise_multiplier == 0:
        return None
    gen = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=noise_base, spawn_key=(t,)))
    )
    dt = models.resolve_dtype(cfg.dtype)
    return gen.standard_normal(dim, dtype=dt) * cfg.noise_std


def _noise_base(cfg: DPSGDConfig) -> int:
    return int(np.random.SeedSequence((cfg.seed, 0x901E)).generate_state(1, np.uint64)[0])


def _sample_index_sets(n: int, cfg: DPSGDConfig) -> list[np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 0xBA7C))))
    sets: list[np.ndarray] = []
    if cfg.batch_size is None:
        for _ in range(cfg.steps):
            sets.append(np.nonzero(rng.random(n) < cfg.sampling_prob)[0].astype(np.int64))
        return sets
    b = min(cfg.batch_size, n)
    while len(sets) < cfg.steps:
        perm = rng.permutation(n).astype(np.int64)
        for start in range(0, n, b):
            sets.append(perm[start : start + b])
            if len(sets) == cfg.steps:
                break
    return sets


def _apply_step(
    spec: ModelSpec,
    params: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    idx: np.ndarray,
    cfg: DPSGDConfig,
    noise: np.ndarray | None,
) -> np.ndarray:
    gsum = models.clipped_grad_sum(spec, params, X[idx], y[idx], cfg.clip_norm)
    if noise is not None:
        gsum = gsum + noise
    return params - cfg.learning_rate * gsum


def dpsgd_train(
    spec: ModelSpec,
    data: Dataset,
    cfg: DPSGDConfig,
    init: np.ndarray | None = None,
) -> TrainingTape:
    """Run the (DP-)SGD loop and record a replayable tape.

    ``init`` overrides the deterministic default initialization (it must
    already have the configured dtype's precision or will be cast).

    Raises:
        DivergenceError: if any update produces a non-finite parameter,
            carrying the 1-based step index.
    """
    if len(data) == 0:
        raise DimensionError("training data is empty")
    if data.num_classes > spec.num_classes:
        raise DimensionError("labels exceed the model's class count")
    dt = models.resolve_dtype(cfg.dtype)
    if init is None:
        w = models.init_params(spec, seed=cfg.seed, dtype=cfg.dtype)
    else:
        w = models.check_params(spec, init).astype(dt)
    X = np.ascontiguousarray(data.X, dtype=np.float64)
    y = data.y
    index_sets = _sample_index_sets(len(data), cfg)
    noise_base = _noise_base(cfg)
    checkpoints = (
        np.empty((cfg.steps, spec.param_count), dtype=dt)
        if cfg.record_checkpoints
        else np.empty((0, spec.param_count), dtype=dt)
    )
    init_params = w.copy()
    for t in range(1, cfg.steps + 1):
        noise = _noise(noise_base, t, spec.param_count, cfg)
        w = _apply_step(spec, w, X, y, index_sets[t - 1], cfg, noise)
        if not np.isfinite(w).all():
            raise DivergenceError(step=t)
        if cfg.record_checkpoints:
            checkpoints[t - 1] = w
    return TrainingTape(
        spec=spec,
        config=cfg,
        init_params=init_params,
        checkpoints=checkpoints,
        final_params=w.copy(),
        index_sets=index_sets,
        noise_base=noise_base,
        X=X,
        y=y.copy(),
        ids=data.ids.copy(),
        canary_slot=data.canary_slot.copy(),
    )


def sgd_train(
    spec: ModelSpec,
    data: Dataset,
    cfg: DPSGDConfig,
    init: np.ndarray | None = None,
) -> TrainingTape:
    """Plain SGD: noiseless, unclipped, shuffled minibatches.

    The config must have noise_multiplier == 0 and clip_norm == inf; a
    missing batch_size means full-batch gradient descent.
    """
    if cfg.noise_multiplier != 0:
        raise DimensionError("sgd_train requires noise_multiplier == 0")
    if math.isfinite(cfg.clip_norm):
        raise DimensionError("sgd_train requires clipping disabled (clip_norm = inf)")
    if cfg.batch_size is None:
        cfg = replace(cfg, batch_size=len(data))
    return dpsgd_train(spec, data, cfg, init=init)


def replay_step(tape: TrainingTape, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray | None]:
    """Recompute update t (1-based) from the tape and verify it bit-exactly.

    Returns (params_before, params_after, index_set, noise).

    Raises:
        ReplayMismatchError: if the recomputed step differs from the recorded
            checkpoint in any byte (e.g. after tampering with the tape).
    """
    if t < 1 or t > tape.steps:
        raise DimensionError(f"step index {t} out of range [1, {tape.steps}]")
    if not tape.has_checkpoints and t != tape.steps:
        raise DimensionError("tape was recorded without intermediate checkpoints")
    w_before = tape.params_at(t - 1)
    idx = tape.index_sets[t - 1]
    noise = tape.noise_for_step(t)
    w_after = _apply_step(tape.spec, w_before, tape.X, tape.y, idx, tape.config, noise)
    recorded = tape.params_at(t)
    if w_after.tobytes() != recorded.tobytes():
        raise ReplayMismatchError(step=t)
    return w_before, w_after, idx, noise


# ------------------------------------------------------------ container io

def save_tape(tape: TrainingTape, path: str) -> None:
    header = {
        "format": 1,
        "spec": tape.spec.to_dict(),
        "config": tape.config.to_dict(),
        "n": int(len(tape.y)),
        "input_dim": int(tape.X.shape[1]),
        "dim": int(tape.spec.param_count),
        "dtype": tape.config.dtype,
        "steps": int(tape.steps),
        "noise_base": int(tape.noise_base),
        "index_lengths": [int(len(s)) for s in tape.index_sets],
        "has_checkpoints": bool(tape.has_checkpoints),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    dt = models.resolve_dtype(tape.config.dtype)
    le = np.dtype(dt).newbyteorder("<")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(np.uint64(len(blob)).astype("<u8").tobytes())
        f.write(blob)
        f.write(np.ascontiguousarray(tape.init_params, dtype=le).tobytes())
        if tape.has_checkpoints:
            f.write(np.ascontiguousarray(tape.checkpoints, dtype=le).tobytes())
        f.write(np.ascontiguousarray(tape.final_params, dtype=le).tobytes())
        if tape.index_sets:
            f.write(np.concatenate(tape.index_sets).astype("<i8").tobytes())
        f.write(np.ascontiguousarray(tape.X, dtype="<f8").tobytes())
        f.write(tape.y.astype("<i8").tobytes())
        f.write(tape.ids.astype("<i8").tobytes())
        f.write(tape.canary_slot.astype("<i8").tobytes())


def load_tape(path: str) -> TrainingTape:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _MAGIC:
        raise FormatError("not a training tape container (bad magic)", offset=0)
    hlen = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"bad tape header: {e}", offset=16) from None
    spec = ModelSpec.from_dict(header["spec"])
    cfg = DPSGDConfig.from_dict(header["config"])
    n = header["n"]
    dim = header["dim"]
    input_dim = header["input_dim"]
    steps = header["steps"]
    lengths = header["index_lengths"]
    has_cp = header["has_checkpoints"]
    le = np.dtype(models.resolve_dtype(cfg.dtype)).newbyteorder("<")
    pos = 16 + hlen

    def take(count, dtype):
        nonlocal pos
        nbytes = count * np.dtype(dtype).itemsize
        if pos + nbytes > len(raw):
            raise FormatError("tape container truncated", offset=pos)
        arr = np.frombuffer(raw[pos : pos + nbytes], dtype=dtype).copy()
        pos += nbytes
        return arr

    init_params = take(dim, le)
    if has_cp:
        checkpoints = take(steps * dim, le).reshape(steps, dim)
    else:
        checkpoints = np.empty((0, dim), dtype=le)
    final_params = take(dim, le)
    flat_idx = take(sum(lengths), "<i8")
    index_sets = []
    off = 0
    for length in lengths:
        index_sets.append(flat_idx[off : off + length].astype(np.int64))
        off += length
    X = take(n * input_dim, "<f8").reshape(n, input_dim)
    y = take(n, "<i8").astype(np.int64)
    ids = take(n, "<i8").astype(np.int64)
    slot = take(n, "<i8").astype(np.int64)
    if pos != len(raw):
        raise FormatError("trailing bytes after tape payload", offset=pos)
    native = models.resolve_dtype(cfg.dtype)
    return TrainingTape(
        spec=spec,
        config=cfg,
        init_params=np.ascontiguousarray(init_params, dtype=native),
        checkpoints=np.ascontiguousarray(checkpoints, dtype=native),
        final_params=np.ascontiguousarray(final_params, dtype=native),
        index_sets=index_sets,
        noise_base=int(header["noise_base"]),
        X=np.ascontiguousarray(X),
        y=y,
        ids=ids,
        canary_slot=slot,
    )
