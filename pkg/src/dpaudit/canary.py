"""Canary sets and exact differentiation through recorded training runs.

A canary set holds m extra examples whose pixels are optimized so that a
model's final loss on them separates members from non-members. Each
optimization round (metastep) re-randomizes an IN/OUT half split, trains on
the data plus the IN half, and descends the membership gap

    gap(z) = sum_{i IN} L(w_final, z_i) - sum_{i OUT} L(w_final, z_i)

with respect to the canary pixels. The pixel gradient is computed exactly by
unrolling the recorded training run backwards: one adjoint vector is pulled
through the transpose of every update (Hessian and clip-Jacobian products at
the recorded iterates), and each visit of a canary contributes the mixed
parameter/feature second-order product. Per-step noise, being an additive
constant, contributes nothing.

Canary container layout (little-endian):

    bytes 0-7   magic b"DPACANR1"
    bytes 8-15  uint64 header length
    header      UTF-8 JSON: format, m, input_dim, labels, ids, provenance
                (meta-config hash and metastep count)
    pixels      float32 matrix, m x input_dim, row-major
"""

import hashlib
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import models
from .data import Dataset
from .errors import AssignmentError, DimensionError, FormatError
from .models import ModelSpec
from .training import DPSGDConfig, TrainingTape, dpsgd_train

_MAGIC = b"DPACANR1"


@dataclass
class CanarySet:
    """m audit examples with an optional IN/OUT half split.

    Attributes:
        z: (m, input_dim) float64 pixel matrix, values in [0, 1].
        labels: (m,) int64 class labels, fixed for the set's lifetime.
        ids: (m,) int64 identifiers, disjoint from any dataset they audit.
        in_mask: (m,) bool with exactly m/2 True, or None when unassigned.
    """

    z: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    in_mask: np.ndarray | None = None

    def __post_init__(self):
        self.z = np.ascontiguousarray(self.z, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        if self.z.ndim != 2:
            raise DimensionError(f"canary pixels must be 2-D, got shape {self.z.shape}")
        m = self.z.shape[0]
        if self.labels.shape != (m,) or self.ids.shape != (m,):
            raise DimensionError("labels and ids must have one entry per canary")
        if len(np.unique(self.ids)) != m:
            raise DimensionError("canary ids must be unique")
        if self.z.size and (self.z.min() < 0.0 or self.z.max() > 1.0):
            raise DimensionError("canary pixels must lie in [0, 1]")
        if self.in_mask is not None:
            self.in_mask = np.ascontiguousarray(self.in_mask, dtype=bool)
            if self.in_mask.shape != (m,):
                raise AssignmentError("in_mask must have one entry per canary")
            if int(self.in_mask.sum()) * 2 != m:
                raise AssignmentError("in_mask must select exactly half of the canaries")

    def __len__(self) -> int:
        return self.z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.z.shape[1]

    @property
    def in_indices(self) -> np.ndarray:
        self._require_split()
        return np.nonzero(self.in_mask)[0]

    @property
    def out_indices(self) -> np.ndarray:
        self._require_split()
        return np.nonzero(~self.in_mask)[0]

    @property
    def membership(self) -> np.ndarray:
        """+1 for IN canaries, -1 for OUT."""
        self._require_split()
        return np.where(self.in_mask, 1, -1).astype(np.int8)

    def _require_split(self):
        if self.in_mask is None:
            raise AssignmentError("canary set has no IN/OUT assignment; split it first")


def with_split(canaries: CanarySet, seed: int) -> CanarySet:
    """Assign a fresh uniformly random exact-half IN/OUT split."""
    m = len(canaries)
    if m == 0 or m % 2 != 0:
        raise AssignmentError(f"canary count must be even and positive, got {m}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x5711))))
    mask = np.zeros(m, dtype=bool)
    mask[rng.permutation(m)[: m // 2]] = True
    return replace(canaries, in_mask=mask)


def assemble_training_set(data: Dataset, canaries: CanarySet) -> Dataset:
    """Concatenate the dataset with the IN half of a split canary set.

    Canary rows carry their canary index in ``canary_slot`` so a recorded
    tape knows exactly which training rows to differentiate.
    """
    canaries._require_split()
    if np.intersect1d(data.ids, canaries.ids).size:
        raise DimensionError("canary ids collide with dataset ids")
    if np.any(data.canary_slot >= 0):
        raise DimensionError("base dataset already contains canary rows")
    idx = canaries.in_indices
    X = np.concatenate([data.X, canaries.z[idx]])
    y = np.concatenate([data.y, canaries.labels[idx]])
    ids = np.concatenate([data.ids, canaries.ids[idx]])
    slot = np.concatenate([data.canary_slot, idx.astype(np.int64)])
    return Dataset(X, y, ids, slot)


def loss_gap(spec: ModelSpec, params: np.ndarray, canaries: CanarySet) -> float:
    """Membership gap: summed IN losses minus summed OUT losses."""
    canaries._require_split()
    losses = models.loss_batch(spec, params, canaries.z, canaries.labels)
    sign = canaries.membership.astype(losses.dtype)
    return float((losses * sign).sum())


def clip_jvp(g: np.ndarray, clip_norm: float, v: np.ndarray) -> np.ndarray:
    """Jacobian of gradient clipping at g, applied to v.

    Identity when ||g|| <= clip_norm (including the boundary and the
    unclipped sentinel inf); otherwise the clip rescales and the Jacobian is
    (c/||g||) (v - g g^T v / ||g||^2), i.e. a scaled projection that kills
    the radial component. The Jacobian is symmetric, so it serves as both
    forward (JVP) and transpose (VJP) map.
    """
    g = np.asarray(g, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if g.shape != v.shape or g.ndim != 1:
        raise DimensionError("g and v must be 1-D vectors of equal length")
    if not clip_norm > 0:
        raise DimensionError("clip_norm must be positive")
    if math.isinf(clip_norm):
        return v.copy()
    n2 = float(g @ g)
    norm = math.sqrt(n2)
    if norm <= clip_norm:
        return v.copy()
    return (clip_norm / norm) * (v - g * (float(g @ v) / n2))


def _check_tape_matches(tape: TrainingTape, canaries: CanarySet) -> None:
    rows = np.nonzero(tape.canary_slot >= 0)[0]
    slots = tape.canary_slot[rows]
    expected = np.sort(canaries.in_indices)
    if not np.array_equal(np.sort(slots), expected):
        raise AssignmentError("tape canary rows do not match the set's IN assignment")
    order = np.argsort(slots)
    rows = rows[order]
    slots = slots[order]
    if not np.array_equal(tape.X[rows], canaries.z[slots]):
        raise AssignmentError("tape canary features differ from the canary set's pixels")
    if not np.array_equal(tape.y[rows], canaries.labels[slots]):
        raise AssignmentError("tape canary labels differ from the canary set's labels")


def metagradient(tape: TrainingTape, canaries: CanarySet) -> np.ndarray:
    """Exact gradient of the membership gap with respect to canary pixels.

    The tape must come from training on data assembled with
    :func:`assemble_training_set` for the same split canary set. Returns an
    (m, input_dim) matrix; rows of OUT canaries only carry the direct
    evaluation term since they never entered training.
    """
    canaries._require_split()
    if not tape.has_checkpoints:
        raise DimensionError("metagradient requires a tape with recorded checkpoints")
    _check_tape_matches(tape, canaries)
    spec = tape.spec
    cfg = tape.config
    w_final = tape.final_params
    # adjoint seed: d gap / d params at the final iterate
    grads = models.grads_batch(spec, w_final, canaries.z, canaries.labels)
    sign = canaries.membership.astype(grads.dtype)
    a = (grads * sign[:, None]).sum(axis=0)
    # direct term: d gap / d pixels at fixed final parameters
    gz = models.grad_input_batch(spec, w_final, canaries.z, canaries.labels)
    gz = gz * sign[:, None]
    lr = cfg.learning_rate
    for t in range(tape.steps, 0, -1):
        w_prev = tape.params_at(t - 1)
        idx = tape.index_sets[t - 1]
        if len(idx) == 0:
            continue
        h, cross = models.reverse_step_products(
            spec, w_prev, tape.X[idx], tape.y[idx], a, cfg.clip_norm
        )
        slots = tape.canary_slot[idx]
        sel = slots >= 0
        if np.any(sel):
            gz[slots[sel]] -= lr * cross[sel]
        a = a - lr * h
    return gz


@dataclass(frozen=True)
class MetaConfig:
    """Canary optimization hyperparameters.

    Attributes:
        num_canaries: m, even and positive.
        metasteps: number of optimization rounds N.
        step_size: pixel update scale.
        optimizer: "adam" (bias-corrected moment estimates, beta1/beta2
            below) or "sign" (sign of the metagradient).
        beta1: first-moment decay for adam.
        beta2: second-moment decay for adam.
        adam_eps: denominator floor for adam.
        init: "mislabeled" starts from real rows of the dataset with labels
            re-rolled to a wrong class; "uniform" starts from U[0,1] noise
            with uniformly random labels.
        seed: master seed; per-metastep splits, inits, and data order derive
            from (seed, metastep).
        inner: training configuration for each metastep's run; must be
            noiseless (differentiating through injected noise is a
            non-goal), clipping allowed.
    """

    num_canaries: int
    metasteps: int
    step_size: float
    inner: DPSGDConfig
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    init: str = "mislabeled"
    seed: int = 0

    def __post_init__(self):
        if self.num_canaries < 2 or self.num_canaries % 2 != 0:
            raise DimensionError("num_canaries must be even and at least 2")
        if self.metasteps < 1:
            raise DimensionError("metasteps must be at least 1")
        if not self.step_size > 0:
            raise DimensionError("step_size must be positive")
        if self.optimizer not in ("adam", "sign"):
            raise DimensionError(f"unknown optimizer {self.optimizer!r}")
        if self.init not in ("mislabeled", "uniform"):
            raise DimensionError(f"unknown init {self.init!r}")
        if self.inner.noise_multiplier != 0:
            raise DimensionError("canary optimization requires a noiseless inner trainer")

    def to_dict(self) -> dict:
        return {
            "num_canaries": self.num_canaries,
            "metasteps": self.metasteps,
            "step_size": self.step_size,
            "optimizer": self.optimizer,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "init": self.init,
            "seed": self.seed,
            "inner": self.inner.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "MetaConfig":
        return MetaConfig(
            num_canaries=int(d["num_canaries"]),
            metasteps=int(d["metasteps"]),
            step_size=float(d["step_size"]),
            inner=DPSGDConfig.from_dict(d["inner"]),
            optimizer=d.get("optimizer", "adam"),
            beta1=float(d.get("beta1", 0.9)),
            beta2=float(d.get("beta2", 0.999)),
            adam_eps=float(d.get("adam_eps", 1e-8)),
            init=d.get("init", "mislabeled"),
            seed=int(d.get("seed", 0)),
        )

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def init_canaries(data: Dataset, spec: ModelSpec, meta: MetaConfig) -> CanarySet:
    """Build the metastep-0 canary set per the configured init scheme."""
    m = meta.num_canaries
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((meta.seed, 0xC0DE))))
    ids = data.ids.max() + 1 + np.arange(m, dtype=np.int64) if len(data) else np.arange(m)
    if meta.init == "uniform":
        z = rng.uniform(0.0, 1.0, size=(m, data.input_dim))
        labels = rng.integers(0, spec.num_classes, size=m, dtype=np.int64)
        return CanarySet(z, labels, ids)
    take = rng.choice(len(data), size=m, replace=len(data) < m)
    z = data.X[take].copy()
    true_labels = data.y[take]
    # re-roll each label to a uniformly random wrong class
    shift = rng.integers(1, spec.num_classes, size=m, dtype=np.int64)
    labels = (true_labels + shift) % spec.num_classes
    return CanarySet(z, labels, ids)


def optimize_canaries(
    data: Dataset, spec: ModelSpec, meta: MetaConfig
) -> tuple[CanarySet, np.ndarray]:
    """Descend the membership gap over the canary pixels.

    Every metastep draws a fresh IN/OUT split, model init, and data order,
    trains on data plus the IN half, differentiates the gap through the
    recorded run, and applies one projected update (pixels stay in [0, 1];
    labels never change). Returns the final canary set (assignment cleared)
    and the per-metastep gap values.
    """
    canaries = init_canaries(data, spec, meta)
    m1 = np.zeros_like(canaries.z)
    m2 = np.zeros_like(canaries.z)
    phi_log = np.zeros(meta.metasteps)
    for t in range(meta.metasteps):
        ss = np.random.SeedSequence((meta.seed, t))
        split_seed, init_seed, order_seed = (int(s) for s in ss.generate_state(3, np.uint64))
        assigned = with_split(canaries, split_seed)
        trainset = assemble_training_set(data, assigned)
        inner = replace(meta.inner, seed=order_seed, record_checkpoints=True)
        init = models.init_params(spec, seed=init_seed, dtype=inner.dtype)
        tape = dpsgd_train(spec, trainset, inner, init=init)
        phi_log[t] = loss_gap(spec, tape.final_params, assigned)
        grad = metagradient(tape, assigned)
        if meta.optimizer == "sign":
            update = np.sign(grad)
        else:
            m1 = meta.beta1 * m1 + (1.0 - meta.beta1) * grad
            m2 = meta.beta2 * m2 + (1.0 - meta.beta2) * grad * grad
            bc1 = 1.0 - meta.beta1 ** (t + 1)
            bc2 = 1.0 - meta.beta2 ** (t + 1)
            update = (m1 / bc1) / (np.sqrt(m2 / bc2) + meta.adam_eps)
        z = np.clip(canaries.z - meta.step_size * update, 0.0, 1.0)
        canaries = replace(canaries, z=z, in_mask=None)
    return canaries, phi_log


# ------------------------------------------------------------ container io

def save_canaries(canaries: CanarySet, path: str, meta: MetaConfig | None = None, metasteps: int | None = None) -> None:
    header = {
        "format": 1,
        "m": int(len(canaries)),
        "input_dim": int(canaries.input_dim),
        "labels": [int(v) for v in canaries.labels],
        "ids": [int(v) for v in canaries.ids],
        "provenance": {
            "meta_config_hash": meta.config_hash() if meta is not None else None,
            "metasteps": metasteps if metasteps is not None else (meta.metasteps if meta else None),
        },
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(np.uint64(len(blob)).astype("<u8").tobytes())
        f.write(blob)
        f.write(canaries.z.astype("<f4").tobytes())


def load_canaries(path: str) -> CanarySet:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _MAGIC:
        raise FormatError("not a canary container (bad magic)", offset=0)
    hlen = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"bad canary header: {e}", offset=16) from None
    m = header["m"]
    dim = header["input_dim"]
    pos = 16 + hlen
    nbytes = m * dim * 4
    if len(raw) != pos + nbytes:
        raise FormatError(
            f"pixel payload must be exactly {nbytes} bytes, found {len(raw) - pos}", offset=pos
        )
    z = np.frombuffer(raw[pos:], dtype="<f4").reshape(m, dim).astype(np.float64)
    return CanarySet(
        z,
        np.array(header["labels"], dtype=np.int64),
        np.array(header["ids"], dtype=np.int64),
    )
