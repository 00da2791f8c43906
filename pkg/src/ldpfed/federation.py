"""Clients, parameter server, k-client selection and the round loop.

Every random draw comes from a substream keyed by (master seed, purpose,
round, client), so the result of a run does not depend on how the client
phase is scheduled across threads.
"""

from __future__ import annotations

import dataclasses
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ldpfed import nn_core
from ldpfed.config import ExperimentConfig
from ldpfed.data_io import Dataset, MetricsRow, load_idx, partition, synth_dataset, train_test_split
from ldpfed.errors import ConfigError, LdpFedError, ProtocolError
from ldpfed.ldp_mechanism import DiscretizationSpec, EmMechanism, PerturbedUpdate, perturb_layer
from ldpfed.nn_core import ArchSpec, Model, ParameterVector
from ldpfed.privacy_scheduler import (
    BudgetConfig,
    PrivacyAccountant,
    RoundPlan,
    RoundSchedule,
    build_schedule,
)

# substream purposes
INIT, PARTITION, TRAIN, PERTURB, SELECT, SPLIT, DATA, REPEAT = range(8)


def substream(seed: int, purpose: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose, *keys)))


def derive_seed(seed: int, purpose: int, *keys: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(purpose, *keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class FederationConfig:
    clients: int
    k: int
    rounds: int
    lr: float
    batch_size: int = 32
    mode: str = "ldp_fed"
    perturb: str = "values"

    def __post_init__(self):
        if not 1 <= self.k <= self.clients:
            raise ConfigError(f"need 1 <= k <= N, got k={self.k}, N={self.clients}")

    @property
    def q(self) -> float:
        return self.k / self.clients

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig) -> "FederationConfig":
        return cls(cfg.clients, cfg.k, cfg.rounds, cfg.lr, cfg.batch_size, cfg.mode, cfg.perturb)


@dataclass(frozen=True)
class ClientState:
    id: int
    shard: Dataset
    model: Model


@dataclass(frozen=True)
class GlobalState:
    round: int
    params: ParameterVector
    history: tuple[MetricsRow, ...] = ()


@dataclass(frozen=True)
class RoundContext:
    fed: FederationConfig
    arch: ArchSpec
    test: Dataset
    seed: int
    disc: DiscretizationSpec | None = None
    label: str = "ldp_fed"
    executor: ThreadPoolExecutor | None = None
    record_timing: bool = False


def select_k(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly ``k`` distinct client ids, uniform over size-k subsets, sorted."""
    if not 1 <= k <= n:
        raise ConfigError(f"cannot select k={k} of N={n} clients")
    return np.sort(rng.choice(n, size=k, replace=False))


def local_train(client: ClientState, global_params: ParameterVector, layers: Sequence[str],
                fed: FederationConfig, rng: np.random.Generator) -> tuple[ClientState, np.ndarray]:
    """Sync ``layers`` from the broadcast, train one local epoch, emit those layers.

    Layers not in ``layers`` keep the client's own values.  In ``deltas``
    mode the emitted vector is the change relative to the broadcast.
    """
    if not client.model.params.same_layout(global_params):
        raise ProtocolError(f"client {client.id}: layout does not match the broadcast")
    synced = client.model.params.replace_layers(layers, global_params.gather(layers))
    try:
        model = nn_core.train_epoch(client.model.with_params(synced), client.shard,
                                    fed.lr, fed.batch_size, rng)
    except LdpFedError as exc:
        raise type(exc)(f"client {client.id}: {exc}") from exc
    emitted = model.params.gather(layers)
    if fed.perturb == "deltas":
        emitted = emitted - global_params.gather(layers)
    return dataclasses.replace(client, model=model), emitted


def aggregate(updates: Sequence[PerturbedUpdate], spec: DiscretizationSpec) -> np.ndarray:
    """Mean of the received integer updates, mapped back to real values.

    Integer sums are exact, so the result does not depend on update order.
    """
    if not updates:
        raise ProtocolError("cannot aggregate an empty set of updates")
    name = updates[0].layer_name
    length = updates[0].integer_values.size
    for u in updates:
        if u.layer_name != name or u.integer_values.size != length:
            raise ProtocolError(
                f"update for {u.layer_name!r} ({u.integer_values.size} values) does not match "
                f"{name!r} ({length} values)"
            )
    total = np.sum(np.stack([u.integer_values for u in updates]), axis=0, dtype=np.int64)
    return total / (len(updates) * spec.scale)


def aggregate_values(updates: Sequence[np.ndarray]) -> np.ndarray:
    """Real-valued mean for the unperturbed path, summed in the given order."""
    if not updates:
        raise ProtocolError("cannot aggregate an empty set of updates")
    lengths = {u.size for u in updates}
    if len(lengths) != 1:
        raise ProtocolError(f"updates have mismatched lengths {sorted(lengths)}")
    total = updates[0].copy()
    for u in updates[1:]:
        total = total + u
    return total / len(updates)


def _split(flat: np.ndarray, params: ParameterVector, layers: Sequence[str]) -> list[np.ndarray]:
    out, pos = [], 0
    for name in layers:
        n = params.segment(name).length
        out.append(flat[pos:pos + n])
        pos += n
    return out


def _map(ctx: RoundContext, fn, items):
    if ctx.executor is None:
        return [fn(x) for x in items]
    return list(ctx.executor.map(fn, items))


def evaluate(params: ParameterVector, ctx: RoundContext) -> tuple[float, float]:
    model = Model(params, ctx.arch)
    return nn_core.accuracy(model, ctx.test), nn_core.average_loss(model, ctx.test)


def run_round(state: GlobalState, clients: Sequence[ClientState], schedule: RoundSchedule,
              accountant: PrivacyAccountant, ctx: RoundContext) -> tuple[GlobalState, list[ClientState]]:
    """Execute one protocol round.

    Returns new state and clients; on any error nothing (including the
    accountant) has been modified.
    """
    r = state.round
    if r >= len(schedule):
        raise ProtocolError(f"round {r} is past the end of a {len(schedule)}-round schedule")
    start = time.perf_counter()
    plan = schedule[r]
    layers = plan.layer_names
    mech = None if ctx.disc is None else EmMechanism(ctx.disc, plan.alpha_per_param)

    def client_phase(client):
        new_client, emitted = local_train(client, state.params, layers, ctx.fed,
                                          substream(ctx.seed, TRAIN, r, client.id))
        parts = _split(emitted, state.params, layers)
        if mech is None:
            return new_client, parts
        rng = substream(ctx.seed, PERTURB, r, client.id)
        try:
            return new_client, [perturb_layer(p, mech, rng, name, r) for name, p in zip(layers, parts)]
        except LdpFedError as exc:
            raise type(exc)(f"client {client.id}: {exc}") from exc

    results = _map(ctx, client_phase, clients)
    new_clients = [c for c, _ in results]
    chosen = select_k(len(clients), ctx.fed.k, substream(ctx.seed, SELECT, r))

    fragments = []
    for li, name in enumerate(layers):
        received = [results[i][1][li] for i in chosen]
        if mech is None:
            fragments.append(aggregate_values(received))
        else:
            fragments.append(aggregate(received, ctx.disc))
    merged = np.concatenate(fragments)
    if ctx.fed.perturb == "deltas":
        merged = state.params.gather(layers) + merged
    params = state.params.replace_layers(layers, merged)
    if not np.isfinite(params.values).all():
        raise ProtocolError(f"round {r}: aggregate produced non-finite parameters")

    acc, loss = evaluate(params, ctx)
    charge = 0.0 if mech is None else ctx.fed.q * plan.alpha_round
    # fsum is exactly rounded, so this equals the accountant's total after recording
    spent = math.fsum([*accountant.charges.values(), charge])
    wall = (time.perf_counter() - start) * 1000.0 if ctx.record_timing else 0.0
    row = MetricsRow(r, ctx.label, acc, loss, spent, wall)
    if mech is not None:
        accountant.record(plan, ctx.fed.q)
    return GlobalState(r + 1, params, state.history + (row,)), new_clients


def run_local_round(state: GlobalState, clients: Sequence[ClientState],
                    ctx: RoundContext) -> tuple[GlobalState, list[ClientState]]:
    """Local-learning arm: every client trains alone; metrics are client averages."""
    r = state.round
    start = time.perf_counter()

    def client_phase(client):
        model = nn_core.train_epoch(client.model, client.shard, ctx.fed.lr, ctx.fed.batch_size,
                                    substream(ctx.seed, TRAIN, r, client.id))
        return dataclasses.replace(client, model=model), evaluate(model.params, ctx)

    results = _map(ctx, client_phase, clients)
    acc = math.fsum(a for _, (a, _) in results) / len(results)
    loss = math.fsum(l for _, (_, l) in results) / len(results)
    wall = (time.perf_counter() - start) * 1000.0 if ctx.record_timing else 0.0
    row = MetricsRow(r, ctx.label, acc, loss, 0.0, wall)
    return GlobalState(r + 1, state.params, state.history + (row,)), [c for c, _ in results]


# -- experiment orchestration -------------------------------------------------


@dataclass
class ExperimentResult:
    label: str
    rows: list[MetricsRow]
    schedule: RoundSchedule | None
    shard_digests: list[str] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1].test_accuracy

    @property
    def alpha_spent(self) -> float:
        return self.rows[-1].alpha_spent


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Training and held-out test sets described by ``cfg``."""
    if cfg.source == "synthetic":
        full = synth_dataset(cfg.classes, cfg.per_class, cfg.dim, cfg.separation,
                             derive_seed(cfg.seed, DATA))
        train, test = train_test_split(full, cfg.test_fraction, derive_seed(cfg.seed, SPLIT))
    else:
        train = load_idx(cfg.train_images, cfg.train_labels)
        test = load_idx(cfg.test_images, cfg.test_labels, class_count=train.class_count)
    if cfg.subset and cfg.subset < len(train):
        idx = substream(cfg.seed, SPLIT, 1).choice(len(train), cfg.subset, replace=False)
        train = train.subset(np.sort(idx))
    if train.dim != cfg.layers[0] or train.class_count != cfg.layers[-1]:
        raise ConfigError(
            f"model.layers {list(cfg.layers)} does not fit data with {train.dim} features "
            f"and {train.class_count} classes"
        )
    return train, test


def full_schedule(names: Sequence[str], rounds: int) -> RoundSchedule:
    """Every layer every round, no budget: the non-private exchange pattern."""
    plans = tuple(RoundPlan(r, tuple(names), 0.0, 0.0) for r in range(rounds))
    return RoundSchedule(plans, "full", 1.0)


def experiment_schedule(cfg: ExperimentConfig, layers) -> RoundSchedule:
    if cfg.mode != "ldp_fed" or cfg.bypass:
        return full_schedule([n for n, _ in layers], cfg.rounds)
    budget = BudgetConfig(cfg.alpha, cfg.rounds, cfg.q, cfg.cycles_for(cfg.strategy))
    return build_schedule(cfg.strategy, layers, budget)


def setup(cfg: ExperimentConfig, data: tuple[Dataset, Dataset] | None = None):
    """Build shards, the initial global model and the client list."""
    train, test = data if data is not None else load_data(cfg)
    shards = partition(train, cfg.clients, derive_seed(cfg.seed, PARTITION))
    arch = ArchSpec(cfg.layers)
    model = nn_core.init_model(arch, derive_seed(cfg.seed, INIT))
    clients = [ClientState(i, s, model) for i, s in enumerate(shards)]
    return arch, test, model, clients


def _threads(cfg: ExperimentConfig) -> int:
    return cfg.threads or os.cpu_count() or 1


def run_experiment(cfg: ExperimentConfig, data: tuple[Dataset, Dataset] | None = None,
                   arm: str | None = None) -> ExperimentResult:
    """Run every round of one arm and return its per-round metrics.

    ``arm == "baseline"`` produces the constant random-guess series.
    """
    if arm is not None:
        cfg = cfg.for_arm(arm)
    arch, test, model, clients = setup(cfg, data)
    digests = [c.shard.digest() for c in clients]
    label = cfg.arm_label
    if label == "baseline":
        chance = 1.0 / test.class_count
        rows = [MetricsRow(r, label, chance, math.log(test.class_count), 0.0, 0.0)
                for r in range(cfg.rounds)]
        return ExperimentResult(label, rows, None, digests)

    fed = FederationConfig.from_experiment(cfg)
    schedule = experiment_schedule(cfg, nn_core.layer_partition(model))
    disc = cfg.disc if cfg.mode == "ldp_fed" and not cfg.bypass else None
    accountant = PrivacyAccountant()
    state = GlobalState(0, model.params)
    workers = _threads(cfg)
    with ThreadPoolExecutor(max_workers=workers) if workers > 1 else _null() as pool:
        ctx = RoundContext(fed, arch, test, cfg.seed, disc, label, pool, cfg.record_timing)
        for _ in range(cfg.rounds):
            if cfg.mode == "local_only":
                state, clients = run_local_round(state, clients, ctx)
            else:
                state, clients = run_round(state, clients, schedule, accountant, ctx)
    return ExperimentResult(label, list(state.history), schedule if disc else None, digests)


class _null:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


@dataclass
class Comparison:
    """Per-arm results over one or more seeds, on a shared data partition."""

    arms: list[str]
    runs: dict[str, list[ExperimentResult]]
    seeds: list[int]

    def summary(self) -> list[dict]:
        rows = []
        for arm in self.arms:
            finals = [r.final_accuracy for r in self.runs[arm]]
            mean = math.fsum(finals) / len(finals)
            std = math.sqrt(math.fsum((f - mean) ** 2 for f in finals) / len(finals))
            rows.append({
                "arm": arm,
                "final_accuracy": mean,
                "std": std,
                "alpha_spent": self.runs[arm][0].alpha_spent,
                "repeats": len(finals),
            })
        return rows

    def mean_final(self, arm: str) -> float:
        finals = [r.final_accuracy for r in self.runs[arm]]
        return math.fsum(finals) / len(finals)


def repeat_seeds(cfg: ExperimentConfig) -> list[int]:
    if cfg.repeats == 1:
        return [cfg.seed]
    return [derive_seed(cfg.seed, REPEAT, i) for i in range(cfg.repeats)]


def run_all_baselines(cfg: ExperimentConfig) -> Comparison:
    """Run every configured arm on identical shards and seeds."""
    for arm in cfg.arms:
        cfg.for_arm(arm)  # reject an unrunnable arm before any work starts
    seeds = repeat_seeds(cfg)
    runs: dict[str, list[ExperimentResult]] = {a: [] for a in cfg.arms}
    for seed in seeds:
        seeded = dataclasses.replace(cfg, seed=seed)
        data = load_data(seeded)
        for arm in cfg.arms:
            runs[arm].append(run_experiment(seeded, data, arm=arm))
    return Comparison(list(cfg.arms), runs, seeds)


# Thresholds for the toy-scale ordering check, pinned from measured runs of
# configs/toy.cfg (five seeds).  Accuracies are fractions, not percent.
NON_PRIVATE_FLOOR = 0.85
PROPORTIONAL_SLACK = 0.02
SINGLE_OVER_BASIC = 0.10
BASIC_NEAR_CHANCE = 0.15
PRIVATE_ARMS = ("basic", "single_layer")


def ordering_violations(comp: Comparison, chance: float) -> list[str]:
    """Check the expected accuracy ordering between arms.

    Returns one message per violated condition; arms missing from ``comp``
    are reported as violations too.
    """
    need = ("non_private", "proportional", *PRIVATE_ARMS)
    missing = [a for a in need if a not in comp.runs]
    if missing:
        return [f"comparison lacks arms {missing}"]
    acc = {a: comp.mean_final(a) for a in need}
    checks = [
        (acc["non_private"] >= NON_PRIVATE_FLOOR,
         f"non_private {acc['non_private']:.4f} < {NON_PRIVATE_FLOOR}"),
        (acc["proportional"] >= acc["single_layer"] - PROPORTIONAL_SLACK,
         f"proportional {acc['proportional']:.4f} < single_layer {acc['single_layer']:.4f} - {PROPORTIONAL_SLACK}"),
        (acc["single_layer"] >= acc["basic"] + SINGLE_OVER_BASIC,
         f"single_layer {acc['single_layer']:.4f} < basic {acc['basic']:.4f} + {SINGLE_OVER_BASIC}"),
        (abs(acc["basic"] - chance) <= BASIC_NEAR_CHANCE,
         f"basic {acc['basic']:.4f} is more than {BASIC_NEAR_CHANCE} from chance {chance:.4f}"),
        (acc["non_private"] >= acc["proportional"],
         f"non_private {acc['non_private']:.4f} < proportional {acc['proportional']:.4f}"),
    ]
    checks += [
        (acc["proportional"] >= acc[a], f"proportional {acc['proportional']:.4f} < {a} {acc[a]:.4f}")
        for a in PRIVATE_ARMS
    ]
    return [msg for ok, msg in checks if not ok]
