"""Hybrid binary-geometric search for the minimal sample size N*.

Starting from the largest affordable size, successful candidates shrink
geometrically (divide by M) until the first failure brackets the answer,
then binary search closes the bracket; the whole search is capped at S
candidate evaluations. A candidate succeeds when at least one hyperparameter
configuration (learning rate x seed grid, evaluated lr-major and stopped at
the first success) meets the training criterion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from statebench.errors import ConfigurationError
from statebench.trainer import RunRecord

GRID_LRS = (1e-3, 1e-4, 1e-5)
GRID_SEEDS = (10, 20, 30, 40, 50)

OUTCOME_FOUND = "found"
OUTCOME_NOT_LEARNED = "not_learned"
OUTCOME_BUDGET = "budget_exhausted_best_so_far"


@dataclass(frozen=True)
class SearchConfig:
    n_max: int  # min(budget-equivalent samples, pool capacity after validation)
    multiplier: int = 1000  # geometric shrink factor M
    max_steps: int = 20  # candidate evaluations S
    lrs: tuple = GRID_LRS
    seeds: tuple = GRID_SEEDS

    def __post_init__(self):
        if self.n_max < 1:
            raise ConfigurationError("n_max must be >= 1")
        if self.multiplier < 2:
            raise ConfigurationError("multiplier must be >= 2")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")

    @property
    def grid(self) -> list[tuple[float, int]]:
        """Phi, lr-major / seed-minor."""
        return [(lr, seed) for lr in self.lrs for seed in self.seeds]


@dataclass
class SearchStep:
    candidate: int
    success: bool
    configs_evaluated: int

    def to_json(self) -> dict:
        return {
            "candidate": int(self.candidate),
            "success": self.success,
            "configs_evaluated": int(self.configs_evaluated),
        }


@dataclass
class SearchTrace:
    steps: list[SearchStep] = field(default_factory=list)
    lower_bound: int = 0
    best: int | None = None
    outcome: str = OUTCOME_BUDGET

    @property
    def n_star(self) -> int | None:
        return self.best

    def to_json(self) -> dict:
        return {
            "kind": "trace",
            "steps": [s.to_json() for s in self.steps],
            "lower_bound": int(self.lower_bound),
            "best": None if self.best is None else int(self.best),
            "outcome": self.outcome,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SearchTrace":
        return cls(
            steps=[SearchStep(**s) for s in obj["steps"]],
            lower_bound=obj["lower_bound"],
            best=obj["best"],
            outcome=obj["outcome"],
        )


# An evaluator trains one grid configuration at a given sample size:
# (n, lr, seed) -> RunRecord
Evaluator = Callable[[int, float, int], RunRecord]


def grid_success(n: int, evaluator: Evaluator, cfg: SearchConfig,
                 ) -> tuple[bool, list[RunRecord]]:
    """Evaluate the grid at size n, stopping at the first success.

    Evaluator failures (exceptions) count as unsuccessful configurations for
    that (lr, seed), never as a crash of the search.
    """
    if n < 1:
        raise ConfigurationError("candidate sample size must be >= 1")
    records: list[RunRecord] = []
    for lr, seed in cfg.grid:
        try:
            record = evaluator(n, lr, seed)
        except Exception as exc:  # noqa: BLE001 - config failure, not ours
            record = RunRecord(
                fingerprint="",
                trajectory=[(0, float("inf"), 0.0)],
                best_val_loss=float("inf"),
                status="diverged",
                wall_time=0.0,
                config={"n": n, "lr": lr, "seed": seed, "error": repr(exc)},
            )
        records.append(record)
        if record.success:
            return True, records
    return False, records


GridFn = Callable[[int], tuple[bool, list[RunRecord]]]


def find_nstar(cfg: SearchConfig, grid: GridFn | None = None,
               evaluator: Evaluator | None = None) -> SearchTrace:
    """Run the binary-geometric search and return its full decision trace.

    Control flow: start at n_max; failure there means the task is not
    learned. While no failure has been seen, shrink by the multiplier
    (clamped to 1); after the first failure, binary-search the bracket
    between the largest failure and the smallest success. A candidate that
    was already evaluated closes the bracket and ends the search early; the
    step budget ends it otherwise.
    """
    if grid is None:
        if evaluator is None:
            raise ConfigurationError("find_nstar needs a grid fn or an evaluator")
        grid = lambda n: grid_success(n, evaluator, cfg)  # noqa: E731

    trace = SearchTrace()
    lower = 0
    best = cfg.n_max  # smallest successful size seen so far
    n = cfg.n_max
    seen: set[int] = set()
    for _ in range(cfg.max_steps):
        if n in seen:
            trace.outcome = OUTCOME_FOUND
            break
        success, records = grid(n)
        seen.add(n)
        trace.steps.append(SearchStep(n, success, len(records)))
        if success:
            best = n
            if lower == 0:
                n = max(1, n // cfg.multiplier)
            else:
                n = (lower + n) // 2
        else:
            if n == cfg.n_max:
                trace.outcome = OUTCOME_NOT_LEARNED
                trace.best = None
                trace.lower_bound = n
                return trace
            lower = n
            n = (n + best) // 2
    else:
        # step budget spent; if the next candidate is a repeat the bracket
        # closed on the last evaluation anyway
        trace.outcome = OUTCOME_FOUND if n in seen else OUTCOME_BUDGET
    trace.lower_bound = lower
    trace.best = best
    return trace
