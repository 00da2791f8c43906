"""Round/budget allocation across layers and the amplified budget accountant.

Round budgets ``alpha_round`` are stored before amplification: the amount
charged for a round is ``q * alpha_round``, so every schedule satisfies
``q * sum(alpha_round) == alpha_total``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from ldpfed.errors import AccountingError, ConfigError

STRATEGIES = ("basic", "single_layer", "proportional")


@dataclass(frozen=True)
class BudgetConfig:
    alpha_total: float
    rounds: int
    q: float = 1.0
    cycles: int = 1

    def __post_init__(self):
        if not (self.alpha_total > 0 and math.isfinite(self.alpha_total)):
            raise ConfigError(f"alpha_total must be positive, got {self.alpha_total}")
        if self.rounds < 1:
            raise ConfigError(f"number of rounds must be >= 1, got {self.rounds}")
        if not 0 < self.q <= 1:
            raise ConfigError(f"sampling ratio q must lie in (0, 1], got {self.q}")
        if not 1 <= self.cycles <= self.rounds:
            raise ConfigError(f"cycles must lie in [1, rounds={self.rounds}], got {self.cycles}")


@dataclass(frozen=True)
class RoundPlan:
    round: int
    layer_names: tuple[str, ...]
    alpha_round: float
    alpha_per_param: float


@dataclass(frozen=True)
class RoundSchedule:
    plans: tuple[RoundPlan, ...]
    strategy: str
    q: float

    @property
    def amplified_total(self) -> float:
        return amplified_total([p.alpha_round for p in self.plans], self.q)

    def __len__(self):
        return len(self.plans)

    def __getitem__(self, r) -> RoundPlan:
        return self.plans[r]

    def dump(self) -> str:
        """Tab-separated: round, comma-joined layers, alpha_round, alpha_per_param."""
        lines = [
            f"{p.round}\t{','.join(p.layer_names)}\t{p.alpha_round!r}\t{p.alpha_per_param!r}"
            for p in self.plans
        ]
        return "\n".join(lines) + "\n"


def amplified_total(alpha_rounds: Sequence[float], q: float) -> float:
    return math.fsum(q * a for a in alpha_rounds)


def cycle_lengths(rounds: int, cycles: int) -> list[int]:
    base, extra = divmod(rounds, cycles)
    return [base + (1 if i < extra else 0) for i in range(cycles)]


def apportion(weights: Sequence[int], total: int, minimum: int = 0) -> list[int]:
    """Largest-remainder apportionment of ``total`` seats with a per-entry floor.

    Ties in the remainder go to the earlier entry.
    """
    n = len(weights)
    if total < minimum * n:
        raise ConfigError(f"cannot give {n} entries at least {minimum} of {total}")
    wsum = sum(weights)
    quotas = [w * total / wsum for w in weights]
    seats = [max(minimum, math.floor(x)) for x in quotas]
    rem = [x - math.floor(x) for x in quotas]
    order = sorted(range(n), key=lambda i: (-rem[i], i))
    i = 0
    while sum(seats) < total:
        seats[order[i % n]] += 1
        i += 1
    # the floor may overshoot; take back from the largest allocations first
    order = sorted(range(n), key=lambda i: (-seats[i], rem[i], -i))
    i = 0
    while sum(seats) > total:
        j = order[i % n]
        if seats[j] > minimum:
            seats[j] -= 1
        i += 1
    return seats


def required_rounds(strategy: str, num_layers: int, cycles: int) -> int:
    if strategy == "basic":
        return 1
    return cycles * num_layers


def build_schedule(strategy: str, layers: Sequence[tuple[str, int]], cfg: BudgetConfig) -> RoundSchedule:
    """Allocate rounds and pre-amplification budget to layers.

    ``layers`` is in network order (input side first).  single_layer and
    proportional visit layers output side first within every cycle.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if not layers:
        raise ConfigError("schedule needs at least one layer")
    if any(n < 1 for _, n in layers):
        raise ConfigError("every layer must have a positive parameter count")

    need = required_rounds(strategy, len(layers), cfg.cycles)
    if cfg.rounds < need:
        raise ConfigError(
            f"{strategy} with {len(layers)} layers and {cfg.cycles} cycles needs at least "
            f"{need} rounds; got {cfg.rounds} ({need - cfg.rounds} short)"
        )
    # pre-amplification budget per round if spread evenly over all rounds
    per_round = cfg.alpha_total / (cfg.q * cfg.rounds)
    total_params = sum(n for _, n in layers)

    if strategy == "basic":
        names = tuple(name for name, _ in layers)
        plans = [RoundPlan(r, names, per_round, per_round / total_params) for r in range(cfg.rounds)]
        return RoundSchedule(tuple(plans), strategy, cfg.q)

    backward = list(reversed(layers))
    plans = []
    r = 0
    for length in cycle_lengths(cfg.rounds, cfg.cycles):
        cycle_budget = per_round * length
        if strategy == "single_layer":
            counts = apportion([1] * len(backward), length, minimum=1)
            shares = [cycle_budget * c / length for c in counts]
        else:
            counts = apportion([n for _, n in backward], length, minimum=1)
            shares = [cycle_budget * n / total_params for _, n in backward]
        for (name, size), nrounds, share in zip(backward, counts, shares):
            alpha_round = share / nrounds
            for _ in range(nrounds):
                plans.append(RoundPlan(r, (name,), alpha_round, alpha_round / size))
                r += 1
    return RoundSchedule(tuple(plans), strategy, cfg.q)


@dataclass
class PrivacyAccountant:
    """Running total of amplified spend, one charge per round."""

    charges: dict[int, float] = field(default_factory=dict)

    @property
    def total_spent(self) -> float:
        return math.fsum(self.charges.values())

    def record(self, plan: RoundPlan, q: float) -> "PrivacyAccountant":
        accountant_record(self, plan, q)
        return self


def accountant_record(acct: PrivacyAccountant, plan: RoundPlan, q: float) -> PrivacyAccountant:
    if plan.round in acct.charges:
        raise AccountingError(f"round {plan.round} has already been charged")
    if not 0 < q <= 1:
        raise AccountingError(f"sampling ratio must lie in (0, 1], got {q}")
    acct.charges[plan.round] = q * plan.alpha_round
    return acct
