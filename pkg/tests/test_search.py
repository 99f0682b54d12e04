import numpy as np
import pytest

from statebench import search as sr
from statebench.errors import ConfigurationError
from statebench.trainer import RunRecord


def _record(success: bool, n=0, lr=0.0, seed=0) -> RunRecord:
    return RunRecord(
        fingerprint=f"{n}:{lr}:{seed}",
        trajectory=[(0, 0.0 if success else 1.0, 1.0 if success else 0.0)],
        best_val_loss=0.0 if success else 1.0,
        status="success" if success else "no_success",
        wall_time=0.0,
        config={"n": n, "lr": lr, "seed": seed},
    )


def threshold_evaluator(tau: int):
    def evaluate(n, lr, seed):
        return _record(n >= tau, n, lr, seed)

    return evaluate


def test_grid_success_threshold_oracle():
    cfg = sr.SearchConfig(n_max=1000)
    ok, records = sr.grid_success(99, threshold_evaluator(100), cfg)
    assert not ok and len(records) == 15
    ok, records = sr.grid_success(100, threshold_evaluator(100), cfg)
    assert ok and len(records) == 1  # early break on first config


def test_grid_order_is_lr_major_seed_minor():
    cfg = sr.SearchConfig(n_max=10)
    seen = []

    def evaluate(n, lr, seed):
        seen.append((lr, seed))
        return _record(False, n, lr, seed)

    sr.grid_success(5, evaluate, cfg)
    assert seen == [(lr, s) for lr in sr.GRID_LRS for s in sr.GRID_SEEDS]


def test_grid_expected_configs_with_half_success():
    rng = np.random.default_rng(0)
    cfg = sr.SearchConfig(n_max=10)
    counts = []
    for _ in range(500):
        def evaluate(n, lr, seed):
            return _record(bool(rng.random() < 0.5), n, lr, seed)

        _, records = sr.grid_success(5, evaluate, cfg)
        counts.append(len(records))
    assert 1.7 < np.mean(counts) < 2.4  # geometric-ish mean ~2


def test_grid_evaluator_exception_counts_as_failure():
    cfg = sr.SearchConfig(n_max=10)

    def evaluate(n, lr, seed):
        if seed == 10:
            raise RuntimeError("boom")
        return _record(lr == 1e-4 and seed == 20, n, lr, seed)

    ok, records = sr.grid_success(5, evaluate, cfg)
    assert ok
    assert records[0].status == "diverged"
    assert "boom" in records[0].config["error"]


def test_find_nstar_threshold_100_exact():
    cfg = sr.SearchConfig(n_max=16_000_000, multiplier=1000, max_steps=20)
    trace = sr.find_nstar(cfg, evaluator=threshold_evaluator(100))
    assert trace.outcome == sr.OUTCOME_FOUND
    assert trace.best == 100
    candidates = [s.candidate for s in trace.steps]
    assert candidates[:3] == [16_000_000, 16_000, 16]  # geometric probes
    assert len(candidates) <= 17  # 3 geometric + <= 14 binary


def test_find_nstar_never_learned():
    cfg = sr.SearchConfig(n_max=1000)
    trace = sr.find_nstar(cfg, evaluator=lambda n, lr, seed: _record(False))
    assert trace.outcome == sr.OUTCOME_NOT_LEARNED
    assert trace.best is None
    assert len(trace.steps) == 1
    assert trace.steps[0].candidate == 1000


def test_find_nstar_always_succeeds_returns_one():
    cfg = sr.SearchConfig(n_max=10**6)
    trace = sr.find_nstar(cfg, evaluator=threshold_evaluator(1))
    assert trace.outcome == sr.OUTCOME_FOUND
    assert trace.best == 1


def test_candidates_unique_and_trace_replay():
    cfg = sr.SearchConfig(n_max=123456, multiplier=7, max_steps=20)
    t1 = sr.find_nstar(cfg, evaluator=threshold_evaluator(321))
    t2 = sr.find_nstar(cfg, evaluator=threshold_evaluator(321))
    assert t1.to_json() == t2.to_json()
    candidates = [s.candidate for s in t1.steps]
    assert len(candidates) == len(set(candidates))


def test_monotone_predicates_match_linear_scan():
    # against a monotone threshold predicate the search is exact whenever the
    # bracket closes within the step budget, else it is flagged
    rng = np.random.default_rng(42)
    cfg = sr.SearchConfig(n_max=16_000_000, multiplier=1000, max_steps=20)
    exact = flagged = 0
    for tau in rng.integers(1, 10**6 + 1, size=200):
        tau = int(tau)
        trace = sr.find_nstar(cfg, evaluator=threshold_evaluator(tau))
        candidates = [s.candidate for s in trace.steps]
        assert len(candidates) == len(set(candidates))
        if trace.outcome == sr.OUTCOME_FOUND:
            assert trace.best == tau  # linear-scan truth for a threshold
            exact += 1
        else:
            assert trace.outcome == sr.OUTCOME_BUDGET
            assert trace.best >= tau  # best is a genuine success
            assert trace.lower_bound < tau
            flagged += 1
    assert exact > 0 and flagged > 0  # both regimes exercised at this n_max


def test_monotone_bracket_invariant():
    cfg = sr.SearchConfig(n_max=10**6, multiplier=1000, max_steps=20)
    trace = sr.find_nstar(cfg, evaluator=threshold_evaluator(777))
    failures = [s.candidate for s in trace.steps if not s.success]
    successes = [s.candidate for s in trace.steps if s.success]
    assert max(failures) < min(successes)
    assert trace.lower_bound == max(failures)
    assert trace.lower_bound < trace.best


def test_search_config_validation():
    with pytest.raises(ConfigurationError):
        sr.SearchConfig(n_max=0)
    with pytest.raises(ConfigurationError):
        sr.SearchConfig(n_max=10, multiplier=1)
    with pytest.raises(ConfigurationError):
        sr.SearchConfig(n_max=10, max_steps=0)
    assert len(sr.SearchConfig(n_max=10).grid) == 15
