"""Membership guessing games played against a trained model.

Two variants are supported, both scoring a canary by the negative loss of
the final model on it (members tend to score high):

* top/bottom: guess IN for the k_pos best-scoring canaries, OUT for the
  k_neg worst, abstain elsewhere.
* paired: canaries come as disjoint (IN, OUT) pairs; the k pairs with the
  largest absolute score difference are guessed, picking the higher-scoring
  member as the IN one (ties guess the second member as listed).

All orderings break ties deterministically by identifier, so permuting the
canary order permutes the guesses identically.

Guess records serialize to a line-oriented text format: ``#``-prefixed
header lines carrying the scalar fields, then one line per unit with
whitespace-separated columns ``unit_id membership guess score`` (paired
records append the two member canary ids).
"""

from dataclasses import dataclass

import numpy as np

from . import models
from .canary import CanarySet, with_split
from .errors import AssignmentError, BudgetError, DimensionError, FormatError
from .models import ModelSpec

VARIANTS = ("steinke", "pairs")


@dataclass
class GuessRecord:
    """Outcome of one guessing game.

    ``S`` is the true membership per unit (+1 IN, -1 OUT; for the paired
    variant a unit is a pair and S says whether its first member is the IN
    one). ``T`` is the guess per unit (0 = abstain) and ``v`` the number of
    correct non-abstaining guesses. ``m_canaries`` is always the number of
    individual canaries, also for paired records where the unit count is
    m_canaries / 2.
    """

    variant: str
    S: np.ndarray
    T: np.ndarray
    v: int
    k_pos: int
    k_neg: int
    m_canaries: int
    unit_ids: np.ndarray
    scores: np.ndarray
    pair_member_ids: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DimensionError(f"unknown game variant {self.variant!r}")
        self.S = np.ascontiguousarray(self.S, dtype=np.int8)
        self.T = np.ascontiguousarray(self.T, dtype=np.int8)
        self.unit_ids = np.ascontiguousarray(self.unit_ids, dtype=np.int64)
        self.scores = np.ascontiguousarray(self.scores, dtype=np.float64)
        n = len(self.S)
        if not (len(self.T) == len(self.unit_ids) == len(self.scores) == n):
            raise DimensionError("record arrays must share one length")
        if not np.isin(self.S, (-1, 1)).all():
            raise DimensionError("S entries must be +1 or -1")
        if not np.isin(self.T, (-1, 0, 1)).all():
            raise DimensionError("T entries must be -1, 0, or +1")
        if int(np.abs(self.T).sum()) != self.k_pos + self.k_neg:
            raise BudgetError("guess count does not match the declared budgets")
        if self.v != int(((self.T == self.S) & (self.T != 0)).sum()):
            raise DimensionError("stored v disagrees with S and T")

    @property
    def n_units(self) -> int:
        return len(self.S)

    @property
    def guess_budget(self) -> int:
        return self.k_pos + self.k_neg


@dataclass
class PairAssignment:
    """Disjoint canary pairs, each holding one IN and one OUT canary."""

    pairs: np.ndarray  # (n_pairs, 2) canary indices

    def __post_init__(self):
        self.pairs = np.ascontiguousarray(self.pairs, dtype=np.int64)
        if self.pairs.ndim != 2 or self.pairs.shape[1] != 2:
            raise DimensionError(f"pairs must be (n, 2), got {self.pairs.shape}")
        flat = self.pairs.ravel()
        if len(np.unique(flat)) != flat.size:
            raise AssignmentError("each canary may appear in at most one pair")

    def __len__(self) -> int:
        return self.pairs.shape[0]


def split_canaries(canaries: CanarySet, seed: int) -> tuple[CanarySet, np.ndarray]:
    """Random exact-half IN/OUT split; returns the split set and its +1/-1 vector."""
    assigned = with_split(canaries, seed)
    return assigned, assigned.membership


def score_canaries(spec: ModelSpec, params: np.ndarray, canaries: CanarySet) -> np.ndarray:
    """Membership score per canary: negative loss of the model on it."""
    return -models.loss_batch(spec, params, canaries.z, canaries.labels).astype(np.float64)


def guess_top_bottom(
    scores: np.ndarray, ids: np.ndarray, k_pos: int, k_neg: int
) -> np.ndarray:
    """Guess +1 for the k_pos highest scores, -1 for the k_neg lowest.

    One total order (score descending, id ascending on ties) drives both
    ends, so the positive and negative picks never overlap as long as
    k_pos + k_neg <= len(scores).
    """
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    m = len(scores)
    if ids.shape != scores.shape or scores.ndim != 1:
        raise DimensionError("scores and ids must be 1-D of equal length")
    if k_pos < 0 or k_neg < 0 or k_pos + k_neg > m:
        raise BudgetError(f"budgets k_pos={k_pos}, k_neg={k_neg} invalid for {m} canaries")
    order = np.lexsort((ids, -scores))
    T = np.zeros(m, dtype=np.int8)
    if k_pos:
        T[order[:k_pos]] = 1
    if k_neg:
        T[order[m - k_neg :]] = -1
    return T


def guess_pairs(
    scores: np.ndarray, assignment: PairAssignment, k: int
) -> tuple[np.ndarray, int]:
    """Guess the IN member for the k pairs with the widest score gap.

    Returns (T, n_guessed) where T[j] = +1 guesses the pair's first listed
    member, -1 the second (equal scores guess the second), 0 abstains.
    Gap ties rank by pair position.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n_pairs = len(assignment)
    if k < 0 or k > n_pairs:
        raise BudgetError(f"budget k={k} invalid for {n_pairs} pairs")
    s1 = scores[assignment.pairs[:, 0]]
    s2 = scores[assignment.pairs[:, 1]]
    gaps = np.abs(s1 - s2)
    order = np.lexsort((np.arange(n_pairs), -gaps))
    T = np.zeros(n_pairs, dtype=np.int8)
    chosen = order[:k]
    T[chosen] = np.where(s1[chosen] > s2[chosen], 1, -1).astype(np.int8)
    return T, int(k)


def make_pairs(canaries: CanarySet, seed: int) -> PairAssignment:
    """Randomly pair each IN canary with an OUT canary, member order shuffled."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x9A12))))
    in_idx = canaries.in_indices
    out_idx = canaries.out_indices
    in_perm = rng.permutation(in_idx)
    out_perm = rng.permutation(out_idx)
    pairs = np.stack([in_perm, out_perm], axis=1)
    flip = rng.random(len(pairs)) < 0.5
    pairs[flip] = pairs[flip, ::-1]
    return PairAssignment(pairs)


def run_audit_game(
    spec: ModelSpec,
    params: np.ndarray,
    canaries: CanarySet,
    variant: str,
    budgets: tuple[int, int] | int,
    seed: int = 0,
) -> GuessRecord:
    """Score a split canary set against a model and play one guessing game.

    ``budgets`` is (k_pos, k_neg) for the top/bottom variant and the pair
    budget k for the paired variant. The seed only affects the paired
    variant's random pairing.
    """
    canaries._require_split()
    scores = score_canaries(spec, params, canaries)
    S = canaries.membership
    m = len(canaries)
    if variant == "steinke":
        if not (isinstance(budgets, tuple) and len(budgets) == 2):
            raise BudgetError("top/bottom variant needs budgets=(k_pos, k_neg)")
        k_pos, k_neg = int(budgets[0]), int(budgets[1])
        T = guess_top_bottom(scores, canaries.ids, k_pos, k_neg)
        v = int(((T == S) & (T != 0)).sum())
        return GuessRecord(
            variant="steinke",
            S=S,
            T=T,
            v=v,
            k_pos=k_pos,
            k_neg=k_neg,
            m_canaries=m,
            unit_ids=canaries.ids,
            scores=scores,
        )
    if variant == "pairs":
        if isinstance(budgets, tuple):
            raise BudgetError("paired variant needs a single integer budget k")
        k = int(budgets)
        assignment = make_pairs(canaries, seed)
        s_pair = np.where(canaries.in_mask[assignment.pairs[:, 0]], 1, -1).astype(np.int8)
        T, _ = guess_pairs(scores, assignment, k)
        gaps = np.abs(scores[assignment.pairs[:, 0]] - scores[assignment.pairs[:, 1]])
        v = int(((T == s_pair) & (T != 0)).sum())
        return GuessRecord(
            variant="pairs",
            S=s_pair,
            T=T,
            v=v,
            k_pos=k,
            k_neg=0,
            m_canaries=m,
            unit_ids=np.arange(len(assignment), dtype=np.int64),
            scores=gaps,
            pair_member_ids=canaries.ids[assignment.pairs],
        )
    raise DimensionError(f"unknown game variant {variant!r}")


# ------------------------------------------------------------ record io

def save_guess_record(record: GuessRecord, path: str) -> None:
    lines = [
        "# dpaudit-guess-record v1",
        f"# variant={record.variant}",
        f"# m_canaries={record.m_canaries}",
        f"# k_pos={record.k_pos}",
        f"# k_neg={record.k_neg}",
        f"# v={record.v}",
        "# columns: unit_id membership guess score"
        + (" member_id_1 member_id_2" if record.pair_member_ids is not None else ""),
    ]
    for j in range(record.n_units):
        row = f"{record.unit_ids[j]} {record.S[j]:d} {record.T[j]:d} {float(record.scores[j])!r}"
        if record.pair_member_ids is not None:
            row += f" {record.pair_member_ids[j, 0]} {record.pair_member_ids[j, 1]}"
        lines.append(row)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_guess_record(path: str) -> GuessRecord:
    header: dict[str, str] = {}
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body and " " not in body.split("=")[0]:
                    key, val = body.split("=", 1)
                    header[key.strip()] = val.strip()
                continue
            parts = line.split()
            if len(parts) not in (4, 6):
                raise FormatError(f"line {lineno}: expected 4 or 6 columns, got {len(parts)}")
            rows.append(parts)
    try:
        variant = header["variant"]
        m_canaries = int(header["m_canaries"])
        k_pos = int(header["k_pos"])
        k_neg = int(header["k_neg"])
        v = int(header["v"])
    except KeyError as e:
        raise FormatError(f"guess record header missing field {e}") from None
    if not rows:
        raise FormatError("guess record has no unit lines")
    unit_ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    S = np.array([int(r[1]) for r in rows], dtype=np.int8)
    T = np.array([int(r[2]) for r in rows], dtype=np.int8)
    scores = np.array([float(r[3]) for r in rows], dtype=np.float64)
    pair_ids = None
    if len(rows[0]) == 6:
        pair_ids = np.array([[int(r[4]), int(r[5])] for r in rows], dtype=np.int64)
    return GuessRecord(
        variant=variant,
        S=S,
        T=T,
        v=v,
        k_pos=k_pos,
        k_neg=k_neg,
        m_canaries=m_canaries,
        unit_ids=unit_ids,
        scores=scores,
        pair_member_ids=pair_ids,
    )
