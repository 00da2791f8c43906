"""Fast invariant checks behind ``ldpfed selftest``.

Each check returns ``(ok, detail)``; a check that raises counts as a failure
with the exception text as its detail.  The whole suite runs in a few
seconds so it is safe to call from a fresh install.
"""

from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np

from ldpfed import nn_core
from ldpfed.data_io import Dataset, load_idx, write_idx
from ldpfed.federation import aggregate
from ldpfed.ldp_mechanism import (
    DiscretizationSpec,
    EmMechanism,
    PerturbedUpdate,
    discretize,
    em_pmf,
    em_prob,
    em_sample_array,
    total_variation,
    undiscretize,
    verify_cldp_bound,
)
from ldpfed.privacy_scheduler import STRATEGIES, BudgetConfig, PrivacyAccountant, build_schedule


def check_pmf_sums_to_one():
    worst = 0.0
    for bound in (1, 10, 100, 500):
        for alpha in (0.01, 0.1, 1.0, 10.0):
            for v in (-bound, 0, bound // 3):
                worst = max(worst, abs(em_pmf(EmMechanism(DiscretizationSpec(bound, 0), alpha), v).probs.sum() - 1))
    return worst <= 1e-12, f"max |sum - 1| = {worst:.2e}"


def check_pmf_closed_form():
    mech = EmMechanism(DiscretizationSpec(30, 0), 0.4)
    pmf = em_pmf(mech, 11)
    direct = np.exp(-0.2 * np.abs(pmf.values - 11))
    direct /= direct.sum()
    err = float(np.max(np.abs(pmf.probs - direct) / direct))
    err = max(err, float(np.max(np.abs(em_prob(mech, 11, pmf.values) - direct) / direct)))
    return err <= 1e-10, f"max relative error {err:.2e}"


def check_ratio_bound():
    worst = -math.inf
    for bound in (1, 10):
        for alpha in (0.01, 1.0, 10.0):
            worst = max(worst, verify_cldp_bound(EmMechanism(DiscretizationSpec(bound, 0), alpha)).max_slack)
    return worst <= 1e-9, f"max slack {worst:.2e}"


def check_sampler_distribution():
    mech = EmMechanism(DiscretizationSpec(3, 0), 1.0)
    draws = em_sample_array(mech, np.full(200_000, 1), np.random.default_rng(0))
    emp = np.bincount(draws + 3, minlength=7) / draws.size
    tv = total_variation(emp, em_pmf(mech, 1).probs)
    return tv < 0.01, f"TV {tv:.4f} over 200000 draws"


def check_gradient():
    arch = nn_core.ArchSpec((3, 4, 3))
    rng = np.random.default_rng(1)
    model = nn_core.init_model(arch, 2)
    batch = nn_core.Minibatch(rng.uniform(size=(5, 3)), rng.integers(0, 3, 5))
    grad = nn_core.minibatch_gradient(model, batch).values
    h, worst = 1e-6, 0.0
    layout = model.params.layout

    def loss_at(values):
        moved = model.with_params(nn_core.ParameterVector(values, layout))
        return nn_core.per_example_loss(moved, batch.inputs, batch.labels).mean()

    for i in range(len(model.params)):
        step = np.zeros(len(model.params))
        step[i] = h
        fd = (loss_at(model.params.values + step) - loss_at(model.params.values - step)) / (2 * h)
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-8))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def check_budget_conservation():
    layers = [("dense0", 330), ("dense1", 650), ("dense2", 110)]
    worst = 0.0
    for strategy in STRATEGIES:
        cfg = BudgetConfig(1.0, 80, q=9 / 50, cycles=5)
        sched = build_schedule(strategy, layers, cfg)
        acct = PrivacyAccountant()
        for plan in sched.plans:
            acct.record(plan, cfg.q)
        worst = max(worst, abs(acct.total_spent - 1.0), abs(sched.amplified_total - 1.0))
    return worst <= 1e-9, f"max |spent - 1| = {worst:.2e}"


def check_discretize_round_trip():
    spec = DiscretizationSpec("0.5", 3)
    xs = np.random.default_rng(3).uniform(-0.7, 0.7, 1000)
    err = max(abs(undiscretize(discretize(float(x), spec), spec) - min(max(x, -0.5), 0.5)) for x in xs)
    return err <= 0.5e-3 + 1e-12, f"max error {err:.2e}"


def check_aggregate_order():
    spec = DiscretizationSpec(1, 2)
    rng = np.random.default_rng(4)
    ups = [PerturbedUpdate("dense0", rng.integers(-100, 101, 20), 1.0, 0) for _ in range(5)]
    same = np.array_equal(aggregate(ups, spec), aggregate(ups[::-1], spec))
    example = aggregate([PerturbedUpdate("d", np.array([0]), 1.0, 0),
                         PerturbedUpdate("d", np.array([100]), 1.0, 0)], spec)
    return same and example.tolist() == [0.5], "order invariant, {0, 100} -> 0.5"


def check_idx_round_trip():
    rng = np.random.default_rng(5)
    data = Dataset(rng.integers(0, 256, (20, 9)) / 255.0, rng.integers(0, 10, 20), 10)
    with tempfile.TemporaryDirectory() as tmp:
        write_idx(data, Path(tmp, "img"), Path(tmp, "lab"), shape=(3, 3))
        back = load_idx(Path(tmp, "img"), Path(tmp, "lab"), class_count=10)
    ok = np.array_equal(back.features, data.features) and np.array_equal(back.labels, data.labels)
    return ok, "20 images, 3x3"


CHECKS = [
    ("pmf_sums_to_one", check_pmf_sums_to_one),
    ("pmf_matches_closed_form", check_pmf_closed_form),
    ("ratio_bound_small_universes", check_ratio_bound),
    ("sampler_matches_pmf", check_sampler_distribution),
    ("gradient_matches_finite_difference", check_gradient),
    ("budget_conservation", check_budget_conservation),
    ("discretize_round_trip", check_discretize_round_trip),
    ("aggregate_order_invariant", check_aggregate_order),
    ("idx_round_trip", check_idx_round_trip),
]


def run_selftest(checks=None) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in checks or CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
