"""Discretization and the Ordinal-CLDP exponential mechanism.

Real values are clipped to [-c, c] and mapped to integers in [-U, U] with
U = c * 10**rho.  The mechanism reports y with probability proportional to
exp(-alpha_p * |v - y| / 2), i.e. a two-sided geometric with ratio
t = exp(-alpha_p / 2) centred on v and truncated to the universe.  Sampling
inverts the CDF of that distribution in closed form, so it never touches the
universe element by element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from typing import NamedTuple

import numpy as np

from ldpfed.errors import CapacityError, ConfigError, DomainError, NumericError

PMF_LIMIT = 10**7
# exhaustive triple check is cubic in the universe size
VERIFY_LIMIT = 2001
_SERIES_ALPHA = 1e-8


@dataclass(frozen=True)
class DiscretizationSpec:
    c: float
    rho: int

    def __post_init__(self):
        rho = int(self.rho)
        if rho != self.rho or rho < 0:
            raise ConfigError(f"rho must be a non-negative integer, got {self.rho!r}")
        try:
            exact = Decimal(str(self.c))
        except InvalidOperation:
            raise ConfigError(f"clipping range c must be numeric, got {self.c!r}") from None
        if not exact.is_finite() or exact <= 0:
            raise ConfigError(f"clipping range c must be positive, got {self.c!r}")
        bound = exact.scaleb(rho)
        if bound != bound.to_integral_value():
            raise ConfigError(f"c * 10**rho must be an integer (c={self.c}, rho={rho} gives {bound})")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "c", float(exact))
        object.__setattr__(self, "_bound", int(bound))

    @property
    def bound(self) -> int:
        """U, the largest representable integer."""
        return self._bound

    @property
    def size(self) -> int:
        return 2 * self._bound + 1

    @property
    def scale(self) -> float:
        return 10.0**self.rho

    def universe(self) -> np.ndarray:
        if self.size > PMF_LIMIT:
            raise CapacityError(f"universe of {self.size} values is too large to materialize")
        return np.arange(-self.bound, self.bound + 1, dtype=np.int64)


@dataclass(frozen=True)
class EmMechanism:
    spec: DiscretizationSpec
    alpha_p: float

    def __post_init__(self):
        a = float(self.alpha_p)
        if not (a > 0 and math.isfinite(a)):
            raise ConfigError(f"per-parameter budget must be positive and finite, got {self.alpha_p!r}")
        object.__setattr__(self, "alpha_p", a)

    @property
    def log_ratio(self) -> float:
        """log t, where t = exp(-alpha_p / 2) is the geometric ratio."""
        return -0.5 * self.alpha_p


@dataclass(frozen=True, eq=False)
class PerturbedUpdate:
    layer_name: str
    integer_values: np.ndarray
    alpha_p: float
    round: int


class Pmf(NamedTuple):
    values: np.ndarray
    probs: np.ndarray


def discretize(x: float, spec: DiscretizationSpec) -> int:
    if not math.isfinite(x):
        raise NumericError(f"cannot discretize non-finite value {x!r}")
    y = min(max(x, -spec.c), spec.c) * spec.scale
    z = int(math.copysign(math.floor(abs(y) + 0.5), y))
    return max(-spec.bound, min(spec.bound, z))


def discretize_array(x, spec: DiscretizationSpec) -> np.ndarray:
    """Vectorized :func:`discretize`; raises naming the first bad index."""
    x = np.asarray(x, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(x))
    if bad.size:
        raise NumericError(f"cannot discretize non-finite value at index {int(bad[0])}")
    y = np.clip(x, -spec.c, spec.c) * spec.scale
    z = (np.sign(y) * np.floor(np.abs(y) + 0.5)).astype(np.int64)
    return np.clip(z, -spec.bound, spec.bound)


def undiscretize(z: int, spec: DiscretizationSpec) -> float:
    if not -spec.bound <= z <= spec.bound:
        raise DomainError(f"{z} lies outside the universe [-{spec.bound}, {spec.bound}]")
    return z / spec.scale


def _check_input(mech: EmMechanism, v) -> None:
    u = mech.spec.bound
    v = np.asarray(v)
    if v.size and (v.min() < -u or v.max() > u):
        raise DomainError(f"input outside the universe [-{u}, {u}]")


def _tail_sum(log_t: float, m):
    """sum_{j=1..m} t**j for integer array ``m`` (zero where m == 0)."""
    m = np.asarray(m, dtype=np.float64)
    closed = np.exp(log_t) * np.expm1(m * log_t) / np.expm1(log_t)
    if -2.0 * log_t >= _SERIES_ALPHA:
        return closed
    # t -> 1: expand t**j = exp(j log t) to second order while m log t stays small
    series = m + log_t * m * (m + 1) / 2 + log_t**2 * m * (m + 1) * (2 * m + 1) / 12
    return np.where(m * -log_t < 1e-4, series, closed)


def em_normalizer(mech: EmMechanism, v) -> np.ndarray:
    """Z(v) = 1 + sum over both truncated tails of t**distance."""
    u = mech.spec.bound
    v = np.asarray(v, dtype=np.int64)
    return 1.0 + _tail_sum(mech.log_ratio, v + u) + _tail_sum(mech.log_ratio, u - v)


def em_prob(mech: EmMechanism, v: int, y) -> np.ndarray:
    """Closed-form Pr[y | v] without materializing the universe."""
    _check_input(mech, v)
    y = np.asarray(y, dtype=np.int64)
    inside = np.abs(y) <= mech.spec.bound
    p = np.exp(mech.log_ratio * np.abs(y - v)) / em_normalizer(mech, v)
    return np.where(inside, p, 0.0)


def em_tail_mass(mech: EmMechanism, v: int, window: int) -> float:
    """Pr[|y - v| > window]."""
    _check_input(mech, v)
    u = mech.spec.bound
    lt = mech.log_ratio
    mass = 0.0
    for m in (u - v, v + u):
        if m > window:
            mass += float(np.exp(lt * window) * _tail_sum(lt, m - window))
    return mass / float(em_normalizer(mech, v))


def em_log_pmf(mech: EmMechanism, v: int) -> np.ndarray:
    _check_input(mech, v)
    values = mech.spec.universe()
    logw = mech.log_ratio * np.abs(values - v)
    top = logw.max()
    return logw - (top + np.log(np.exp(logw - top).sum()))


def em_pmf(mech: EmMechanism, v: int) -> Pmf:
    """Exact output distribution over the whole universe, in value order."""
    probs = np.exp(em_log_pmf(mech, v))
    return Pmf(mech.spec.universe(), probs / probs.sum())


def em_sample_array(mech: EmMechanism, v, rng: np.random.Generator) -> np.ndarray:
    """Draw one mechanism output per entry of ``v``, independently.

    Side of v (centre / right tail / left tail) is chosen from the exact
    closed-form masses; the distance inside a tail of length m comes from
    inverting F(j) = (1 - t**j) / (1 - t**m).
    """
    v = np.asarray(v, dtype=np.int64)
    _check_input(mech, v)
    if v.size == 0:
        return v.copy()
    u = mech.spec.bound
    lt = mech.log_ratio
    left_len = v + u
    right_len = u - v
    left_mass = _tail_sum(lt, left_len)
    right_mass = _tail_sum(lt, right_len)
    total = 1.0 + left_mass + right_mass

    pick = rng.random(v.shape) * total
    go_right = (pick >= 1.0) & (pick < 1.0 + right_mass)
    go_left = pick >= 1.0 + right_mass

    m = np.where(go_right, right_len, left_len).astype(np.float64)
    w = rng.random(v.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        j = np.ceil(np.log1p(w * np.expm1(m * lt)) / lt)
    j = np.clip(np.nan_to_num(j, nan=1.0, posinf=m), 1.0, np.maximum(m, 1.0)).astype(np.int64)

    out = v.copy()
    out[go_right] += j[go_right]
    out[go_left] -= j[go_left]
    return out


def em_sample(mech: EmMechanism, v: int, rng: np.random.Generator) -> int:
    """Scalar version of :func:`em_sample_array` using plain float math."""
    u = mech.spec.bound
    if not -u <= v <= u:
        raise DomainError(f"{v} lies outside the universe [-{u}, {u}]")
    lt = mech.log_ratio
    right_len, left_len = u - v, v + u
    if -2.0 * lt < _SERIES_ALPHA:
        right_mass = float(_tail_sum(lt, right_len))
        left_mass = float(_tail_sum(lt, left_len))
    else:
        head = math.exp(lt) / math.expm1(lt)
        right_mass = head * math.expm1(right_len * lt)
        left_mass = head * math.expm1(left_len * lt)
    pick, w = rng.random(2)
    pick *= 1.0 + left_mass + right_mass
    if pick < 1.0:
        return v
    if pick < 1.0 + right_mass:
        m, sign = right_len, 1
    else:
        m, sign = left_len, -1
    x = w * math.expm1(m * lt)
    j = math.ceil(math.log1p(x) / lt) if x > -1.0 else m
    return v + sign * min(max(j, 1), m)


def perturb_layer(values, mech: EmMechanism, rng: np.random.Generator,
                  layer_name: str = "", round: int = 0) -> PerturbedUpdate:
    ints = discretize_array(values, mech.spec)
    return PerturbedUpdate(layer_name, em_sample_array(mech, ints, rng), mech.alpha_p, round)


@dataclass(frozen=True)
class CldpReport:
    alpha_p: float
    universe_size: int
    triples: int
    max_slack: float
    max_log_ratio: float
    worst: tuple[int, int, int]

    @property
    def holds(self) -> bool:
        return self.max_slack <= 1e-9


def verify_cldp_bound(mech: EmMechanism) -> CldpReport:
    """Exhaustively check ln P[y|v1] - ln P[y|v2] <= alpha_p * |v1 - v2|.

    ``max_slack`` is the largest value of the left side minus the right side
    over every (v1, v2, y) triple; the v1 == v2 triples contribute exactly 0.
    """
    spec = mech.spec
    if spec.size > VERIFY_LIMIT:
        raise CapacityError(
            f"exhaustive check needs universe <= {VERIFY_LIMIT} values, got {spec.size}"
        )
    values = spec.universe()
    logp = np.stack([em_log_pmf(mech, int(v)) for v in values])
    best = -math.inf
    best_ratio = -math.inf
    worst = (0, 0, 0)
    for i in range(values.size):
        diff = logp[i][None, :] - logp
        arg = diff.argmax(axis=1)
        ratio = diff[np.arange(values.size), arg]
        slack = ratio - mech.alpha_p * np.abs(values[i] - values)
        k = int(slack.argmax())
        if slack[k] > best:
            best = float(slack[k])
            worst = (int(values[i]), int(values[k]), int(values[arg[k]]))
        best_ratio = max(best_ratio, float(ratio.max()))
    return CldpReport(mech.alpha_p, spec.size, spec.size**3, best, best_ratio, worst)


def format_pmf_table(pmf: Pmf) -> str:
    lines = ["value\tprobability"]
    lines += [f"{int(v)}\t{p:.12g}" for v, p in zip(pmf.values, pmf.probs)]
    return "\n".join(lines) + "\n"


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64)).sum())
