"""Lower bounds on the privacy parameter from guessing-game outcomes.

Two estimators are provided, one per game variant:

* top/bottom records use a binomial tail bound on the number of correct
  guesses: if training satisfies (eps, delta)-DP, then with r guesses the
  probability of v or more correct ones is at most
  ``f(v) + 2 m delta max_i (f(v-i) - f(v)) / i`` with
  ``f(v) = P[Binom(r, e^eps / (e^eps + 1)) >= v]``. The estimate is the
  largest eps the observed v still rejects at level tau, found by bisection.
* paired records use a recursion over trade-off functions that decides,
  for a candidate eps, whether k' correct out of k guessed pairs is too
  unlikely under (eps, delta)-DP. The estimate is the largest rejected
  candidate on a grid.

Estimates serialize to single JSON lines so runs can be appended to a log
file and grepped later.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import BudgetError, DimensionError, FormatError
from .game import GuessRecord

EPS_MAX_DEFAULT = 20.0


# ------------------------------------------------------ top/bottom bound

def binom_tail(v: int, r: int, eps: float) -> float:
    """P[Binom(r, e^eps / (e^eps + 1)) >= v], with v <= 0 -> 1 and v > r -> 0."""
    if r < 0:
        raise BudgetError(f"guess count r={r} must be nonnegative")
    if v <= 0:
        return 1.0
    if v > r:
        return 0.0
    p = 1.0 / (1.0 + np.exp(-eps))
    return float(stats.binom.sf(v - 1, r, p))


def _binom_tail_vec(v: np.ndarray, r: int, eps: float) -> np.ndarray:
    p = 1.0 / (1.0 + np.exp(-eps))
    out = np.ones(len(v), dtype=np.float64)
    hi = v > r
    mid = (v > 0) & ~hi
    out[hi] = 0.0
    out[mid] = stats.binom.sf(v[mid] - 1, r, p)
    return out


def steinke_prob_bound(v: int, r: int, m: int, eps: float, delta: float) -> float:
    """Upper bound on P[at least v of r guesses correct] under (eps, delta)-DP.

    m is the total number of canaries, r the number of non-abstaining
    guesses. The delta correction takes a brute-force max over shift
    i in 1..m.
    """
    if r < 1 or m < r:
        raise BudgetError(f"need 1 <= r <= m, got r={r}, m={m}")
    if eps < 0 or delta < 0:
        raise DimensionError("eps and delta must be nonnegative")
    base = binom_tail(v, r, eps)
    if delta > 0:
        i = np.arange(1, m + 1)
        shifted = _binom_tail_vec(v - i, r, eps)
        correction = 2.0 * m * delta * float(np.max((shifted - base) / i))
        base = base + correction
    return float(min(1.0, max(0.0, base)))


@dataclass
class EpsilonEstimate:
    """A privacy lower bound extracted from one guess record."""

    epsilon_lb: float
    procedure: str
    tau: float
    delta: float
    m: int
    guess_budget: int
    correct: int
    saturated: bool = False
    record: GuessRecord | None = field(default=None, repr=False, compare=False)

    def to_json_line(self) -> str:
        payload = {
            "procedure": self.procedure,
            "tau": self.tau,
            "delta": self.delta,
            "m": self.m,
            "guess_budget": self.guess_budget,
            "correct": self.correct,
            "epsilon_lb": self.epsilon_lb,
            "saturated": self.saturated,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "EpsilonEstimate":
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"bad estimate line: {e}") from None
        missing = {
            "procedure", "tau", "delta", "m", "guess_budget",
            "correct", "epsilon_lb", "saturated",
        } - payload.keys()
        if missing:
            raise FormatError(f"estimate line missing fields {sorted(missing)}")
        return cls(
            epsilon_lb=float(payload["epsilon_lb"]),
            procedure=str(payload["procedure"]),
            tau=float(payload["tau"]),
            delta=float(payload["delta"]),
            m=int(payload["m"]),
            guess_budget=int(payload["guess_budget"]),
            correct=int(payload["correct"]),
            saturated=bool(payload["saturated"]),
        )


def steinke_epsilon_lb(
    v: int,
    r: int,
    m: int,
    delta: float,
    tau: float = 0.05,
    eps_max: float = EPS_MAX_DEFAULT,
    tol: float = 1e-3,
) -> EpsilonEstimate:
    """Largest eps such that v correct out of r guesses rejects (eps, delta)-DP.

    Bisects on [0, eps_max]; the bound is monotone increasing in eps so the
    rejection region {eps : bound(eps) < tau} is an interval starting at 0.
    Saturation at eps_max is flagged rather than silently returned.
    """
    if not (0.0 < tau < 1.0):
        raise DimensionError(f"tau must lie in (0, 1), got {tau}")

    def rejects(eps: float) -> bool:
        return steinke_prob_bound(v, r, m, eps, delta) < tau

    if not rejects(0.0):
        return EpsilonEstimate(0.0, "steinke", tau, delta, m, r, v)
    if rejects(eps_max):
        return EpsilonEstimate(eps_max, "steinke", tau, delta, m, r, v, saturated=True)
    lo, hi = 0.0, eps_max  # rejects(lo) is True, rejects(hi) is False
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if rejects(mid):
            lo = mid
        else:
            hi = mid
    return EpsilonEstimate(lo, "steinke", tau, delta, m, r, v)


# ------------------------------------------------------ trade-off curves

@dataclass(frozen=True)
class TradeoffCurve:
    """Type II error curve of the (eps, delta)-DP hypothesis test.

    ``form="symmetric"`` keeps both linear branches of the curve,
    ``form="one_sided"`` only the steep e^eps one; the symmetric form is
    tighter for rejection thresholds above roughly 1/2 and identical below.
    """

    epsilon: float
    delta: float = 0.0
    form: str = "symmetric"

    def __post_init__(self):
        if self.epsilon < 0 or not (0.0 <= self.delta < 1.0):
            raise DimensionError("need epsilon >= 0 and 0 <= delta < 1")
        if self.form not in ("symmetric", "one_sided"):
            raise DimensionError(f"unknown trade-off form {self.form!r}")

    def f(self, x):
        """Smallest type II error at type I error x."""
        x = np.asarray(x, dtype=np.float64)
        steep = 1.0 - self.delta - np.exp(self.epsilon) * x
        if self.form == "symmetric":
            shallow = np.exp(-self.epsilon) * (1.0 - self.delta - x)
            val = np.maximum(steep, shallow)
        else:
            val = steep
        out = np.clip(val, 0.0, 1.0)
        return out[()] if np.isscalar(x) or x.ndim == 0 else out

    def f_inv(self, y):
        """Smallest x with f(x) <= y; zero for y >= f(0) = 1 - delta."""
        y = np.asarray(y, dtype=np.float64)
        if self.form == "symmetric":
            # the symmetric curve is an involution on its support
            steep = 1.0 - self.delta - np.exp(self.epsilon) * y
            shallow = np.exp(-self.epsilon) * (1.0 - self.delta - y)
            val = np.maximum(steep, shallow)
        else:
            val = np.exp(-self.epsilon) * (1.0 - self.delta - y)
        out = np.clip(val, 0.0, 1.0)
        return out[()] if np.isscalar(y) or y.ndim == 0 else out


def _fbar_inv_grid(r: np.ndarray, e_pos: np.ndarray, e_neg: np.ndarray,
                   delta: float, form: str) -> np.ndarray:
    """Vectorized-in-eps f_inv(1 - r): least power achieving hit rate r."""
    shallow = e_neg * (r - delta)
    if form == "symmetric":
        steep = 1.0 - delta - e_pos * (1.0 - r)
        return np.clip(np.maximum(steep, shallow), 0.0, 1.0)
    return np.clip(shallow, 0.0, 1.0)


# ------------------------------------------------------ paired-guess test

def fdp_guess_test(
    curve: TradeoffCurve,
    tau: float,
    k: int,
    kprime: int,
    m: int,
    s: int = 2,
    c: int | None = None,
    cprime: int | None = None,
) -> bool:
    """Decide whether k' correct out of k guessed units rejects the curve.

    Units are groups of s canaries with exactly one member inserted (s=2
    for IN/OUT pairs), m is the number of units. Returns True when the
    observed success count is inconsistent with the curve at level tau,
    i.e. the curve's eps is rejected as a valid privacy claim.

    The thresholds c (success count charged to the tail) and cprime
    (guess count charged) default to k' and k.
    """
    if k < 1 or m < k:
        raise BudgetError(f"need 1 <= k <= m, got k={k}, m={m}")
    if kprime < 1 or kprime > k:
        raise BudgetError(f"need 1 <= k' <= k, got k'={kprime}")
    if not (0.0 < tau < 1.0):
        raise DimensionError(f"tau must lie in (0, 1), got {tau}")
    if s < 2:
        raise DimensionError(f"group size s must be at least 2, got {s}")
    c = kprime if c is None else c
    cprime = k if cprime is None else cprime
    r = np.zeros(kprime + 1, dtype=np.float64)
    h = np.zeros(kprime + 1, dtype=np.float64)
    r[kprime] = tau * c / m
    h[kprime] = tau * (cprime - c) / m
    for i in range(kprime - 1, -1, -1):
        h[i] = (s - 1) * float(curve.f_inv(1.0 - r[i + 1]))
        r[i] = r[i + 1] + (i / (k - i)) * (h[i] - h[i + 1])
    return bool(r[0] + h[0] >= k / m)


def _guess_test_grid(
    eps_grid: np.ndarray,
    delta: float,
    tau: float,
    k: int,
    kprime: int,
    m: int,
    s: int = 2,
    form: str = "symmetric",
    c: int | None = None,
    cprime: int | None = None,
) -> np.ndarray:
    """fdp_guess_test evaluated at every eps in eps_grid at once."""
    c = kprime if c is None else c
    cprime = k if cprime is None else cprime
    e_pos = np.exp(eps_grid)
    e_neg = np.exp(-eps_grid)
    r = np.full(len(eps_grid), tau * c / m, dtype=np.float64)
    h = np.full(len(eps_grid), tau * (cprime - c) / m, dtype=np.float64)
    for i in range(kprime - 1, -1, -1):
        h_new = (s - 1) * _fbar_inv_grid(r, e_pos, e_neg, delta, form)
        r = r + (i / (k - i)) * (h_new - h)
        h = h_new
    return (r + h) >= k / m


def pairs_epsilon_lb(
    kprime: int,
    k: int,
    m: int,
    delta: float,
    tau: float = 0.05,
    eps_max: float = EPS_MAX_DEFAULT,
    grid_step: float = 1e-2,
    form: str = "symmetric",
    s: int = 2,
    c: int | None = None,
    cprime: int | None = None,
) -> EpsilonEstimate:
    """Largest grid eps rejected by the paired-guess test.

    The grid runs 0, grid_step, ..., eps_max. A record whose test already
    accepts eps = 0 yields estimate 0; one that rejects every candidate up
    to eps_max is flagged saturated.
    """
    if kprime == 0:
        return EpsilonEstimate(0.0, "pairs", tau, delta, m, k, 0)
    grid = np.arange(0.0, eps_max + 0.5 * grid_step, grid_step)
    verdicts = _guess_test_grid(grid, delta, tau, k, kprime, m, s, form, c, cprime)
    if not verdicts.any():
        return EpsilonEstimate(0.0, "pairs", tau, delta, m, k, kprime)
    last = int(np.max(np.nonzero(verdicts)[0]))
    saturated = last == len(grid) - 1
    return EpsilonEstimate(
        float(grid[last]), "pairs", tau, delta, m, k, kprime, saturated=saturated
    )


def estimate_from_record(
    record: GuessRecord, tau: float, delta: float, **kwargs
) -> EpsilonEstimate:
    """Dispatch a guess record to the estimator matching its variant.

    For paired records m is the number of pairs, not canaries. Extra
    keyword arguments pass through to the underlying estimator.
    """
    if record.variant == "steinke":
        est = steinke_epsilon_lb(
            v=record.v,
            r=record.guess_budget,
            m=record.m_canaries,
            delta=delta,
            tau=tau,
            **kwargs,
        )
    elif record.variant == "pairs":
        est = pairs_epsilon_lb(
            kprime=record.v,
            k=record.k_pos,
            m=record.n_units,
            delta=delta,
            tau=tau,
            **kwargs,
        )
    else:
        raise DimensionError(f"unknown record variant {record.variant!r}")
    est.record = record
    return est


# ------------------------------------------------------ soundness oracle

def simulate_rr_audit(
    eps0: float,
    m: int,
    guess_budget: int,
    trials: int,
    procedure: str = "steinke",
    tau: float = 0.05,
    delta: float = 0.0,
    seed: int = 0,
    **kwargs,
) -> tuple[float, np.ndarray]:
    """Audit a randomized-response mechanism that is exactly eps0-DP.

    The mechanism flips each unit's membership bit independently with
    probability 1 / (1 + e^eps0) and the simulated attacker guesses
    straight from the revealed bits, so the estimator sees the hardest
    legitimate instance. For the paired procedure the flip acts on whole
    pairs (one bit per unit whose swap changes a single canary), keeping
    the mechanism eps0-DP with respect to the paired neighbor relation.

    Returns (violation_rate, estimates) over the trials, a violation being
    an estimate strictly above eps0.
    """
    from .game import PairAssignment, guess_pairs, guess_top_bottom

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x51A0))))
    p_flip = 1.0 / (1.0 + np.exp(eps0))
    estimates = np.empty(trials, dtype=np.float64)
    cache: dict[int, float] = {}
    if procedure == "steinke":
        if guess_budget % 2:
            raise BudgetError("top/bottom simulation needs an even guess budget")
        k_pos = k_neg = guess_budget // 2
        ids = np.arange(m, dtype=np.int64)
        for t in range(trials):
            S = np.where(rng.random(m) < 0.5, 1, -1).astype(np.int8)
            flip = rng.random(m) < p_flip
            revealed = np.where(flip, -S, S).astype(np.float64)
            T = guess_top_bottom(revealed, ids, k_pos, k_neg)
            v = int(((T == S) & (T != 0)).sum())
            if v not in cache:
                cache[v] = steinke_epsilon_lb(
                    v, guess_budget, m, delta, tau, **kwargs
                ).epsilon_lb
            estimates[t] = cache[v]
    elif procedure == "pairs":
        assignment = PairAssignment(
            np.arange(2 * m, dtype=np.int64).reshape(m, 2)
        )
        for t in range(trials):
            S = np.where(rng.random(m) < 0.5, 1, -1).astype(np.int8)
            flip = rng.random(m) < p_flip
            revealed = np.where(flip, -S, S)
            scores = np.empty(2 * m, dtype=np.float64)
            scores[0::2] = revealed
            scores[1::2] = -revealed
            T, _ = guess_pairs(scores, assignment, guess_budget)
            kprime = int(((T == S) & (T != 0)).sum())
            if kprime not in cache:
                cache[kprime] = pairs_epsilon_lb(
                    kprime, guess_budget, m, delta, tau, **kwargs
                ).epsilon_lb
            estimates[t] = cache[kprime]
    else:
        raise DimensionError(f"unknown procedure {procedure!r}")
    violations = float(np.mean(estimates > eps0 + 1e-9))
    return violations, estimates
