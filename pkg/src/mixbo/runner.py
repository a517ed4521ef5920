"""Closed-loop campaign execution against an oracle, plus the random baseline."""

from __future__ import annotations

from dataclasses import dataclass

from .campaign import (
    STATUS_READY,
    CampaignState,
    campaign_summary,
    create_campaign,
    evaluate_with_oracle,
    propose_batch,
)
from .domain import DomainSpec, sample_dirichlet_rejection
from .oracle import OracleSpec, query


@dataclass(frozen=True)
class RunResult:
    state: CampaignState
    summary: dict
    events: tuple[dict, ...]


def run_campaign(config: dict, oracle: OracleSpec) -> RunResult:
    """Create a campaign and drive propose/measure cycles to completion.

    Strategy errors (an infeasible run 1, an exhausted run 2) propagate to
    the caller; they are outcomes, not crashes.
    """
    state, events = create_campaign(config)
    all_events = list(events)
    while state.status == STATUS_READY:
        outcome = propose_batch(state)
        state = outcome.state
        all_events.extend(outcome.events)
        state, recorded = evaluate_with_oracle(state, oracle)
        all_events.extend(recorded)
    return RunResult(
        state=state, summary=campaign_summary(state), events=tuple(all_events)
    )


def dirichlet_baseline(
    oracle: OracleSpec,
    problem,
    domain: DomainSpec | None = None,
    n: int = 25,
    seed: int = 0,
) -> dict:
    """Pure rejection-sampled experiment plan, the control a strategy must beat."""
    domain = domain or DomainSpec.plain()
    recipes = sample_dirichlet_rejection(domain, n, seed=seed).recipes
    feasible = 0
    best_distance = None
    rows = []
    for k, recipe in enumerate(recipes):
        metrics = query(oracle, recipe, noise_key=("baseline", seed, k))
        ok = problem.is_feasible(metrics)
        feasible += int(ok)
        if ok:
            distance = abs(metrics.mfr - problem.mfr_target)
            if best_distance is None or distance < best_distance:
                best_distance = distance
        rows.append({"recipe": recipe.to_dict(), "metrics": metrics.as_dict()})
    return {
        "n": n,
        "seed": seed,
        "feasible_count": feasible,
        "best_mfr_distance": best_distance,
        "rows": rows,
    }
