"""Batched experimentation state machine over a 10/7/8 schedule.

Four proposal strategies share one event-sourced campaign record:

* ``run1_vanilla``: constrained proposals from the first batch on, built on a
  model whose hyperparameters come from the historical seed data alone
  (campaign results are conditioned in without refitting), in the augmented
  11-d feature space. On scarce-feasible seed data this is the strategy that
  fails loudly with AllStartsInfeasible, which is the documented outcome.
* ``run2_relaxation``: the same, but an infeasible proposal attempt relaxes
  the currently binding output constraint by one 10 % step and retries,
  batches 0-1 only. The final batch enforces the original thresholds.
* ``run3_reformulated``: batches 0-1 maximize impact strength without
  constraints; the final batch keeps the impact objective (a config switch
  selects MFR-distance instead) subject to the stiffness threshold and an
  MFR corridor around the target.
* ``run4_simplified``: batch 0 is Dirichlet rejection sampling, later batches
  run constrained proposals on models refit from scratch in the plain 4-d
  fraction space.

Every mutation is expressed as a JSON event (created / proposed / recorded /
relaxed / completed); ``apply_event`` folds events into state, so replaying a
log byte-for-byte reproduces the campaign. Seeds for every stochastic step
are derived from the campaign seed with a fixed spawn-key layout, never from
global RNG state.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diagnostics, gp
from .acquisition import (
    METRIC_IMPACT,
    METRIC_MFR,
    METRIC_YOUNGS,
    KNOWN_METRICS,
    AcquisitionSpec,
    ConstraintSpec,
    ObjectiveSpec,
)
from .domain import (
    COMPONENTS,
    DomainSpec,
    MixtureRecipe,
    ProposalResult,
    optimize_acquisition,
    sample_dirichlet_rejection,
)
from .errors import (
    AllStartsInfeasible,
    IncompleteBatch,
    InvalidInput,
    MixboError,
    RelaxationExhausted,
    SchemaError,
    StateConflict,
    UnknownExperiment,
)
from .oracle import OracleSpec, QualityMetrics, query, scarce_seed_dataset

STRATEGY_RUN1 = "run1_vanilla"
STRATEGY_RUN2 = "run2_relaxation"
STRATEGY_RUN3 = "run3_reformulated"
STRATEGY_RUN4 = "run4_simplified"
STRATEGIES = (STRATEGY_RUN1, STRATEGY_RUN2, STRATEGY_RUN3, STRATEGY_RUN4)

DEFAULT_SCHEDULE = (10, 7, 8)
MAX_RELAXATION_LEVEL = 9

PROVENANCE_RANDOM = "random_init"
PROVENANCE_BO = "bo_proposal"
PROVENANCE_MANUAL = "manual_entry"
PROVENANCES = (PROVENANCE_RANDOM, PROVENANCE_BO, PROVENANCE_MANUAL)

STATUS_READY = "ready_to_propose"
STATUS_AWAITING = "awaiting_results"
STATUS_COMPLETE = "complete"
STATUSES = (STATUS_READY, STATUS_AWAITING, STATUS_COMPLETE)

EVENT_CREATED = "created"
EVENT_PROPOSED = "proposed"
EVENT_RECORDED = "recorded"
EVENT_RELAXED = "relaxed"
EVENT_COMPLETED = "completed"

CSV_COLUMNS = (
    "id",
    "batch",
    "virgin_pp",
    "recycled",
    "filler",
    "impact_modifier",
    "mfr_g_per_10min",
    "youngs_mpa",
    "impact_kj_per_m2",
    "provenance",
)
_CSV_METRIC_COLUMNS = dict(
    zip(("mfr_g_per_10min", "youngs_mpa", "impact_kj_per_m2"), KNOWN_METRICS)
)

# Spawn-key prefixes for deriving per-step seeds from the campaign seed.
_PURPOSE_PRIOR_FIT = 0
_PURPOSE_REFIT = 1
_PURPOSE_OPTIMIZE = 2
_PURPOSE_INIT_SAMPLE = 3
_PURPOSE_MC_BASE = 4


def derive_seed(root: int, purpose: int, *indices: int) -> int:
    """Deterministic child seed for one named step of one batch."""
    spawn = np.random.SeedSequence(root, spawn_key=(purpose, *indices))
    return int(spawn.generate_state(1)[0])


# --------------------------------------------------------------- problem


@dataclass(frozen=True)
class ProblemSpec:
    """Targets and thresholds the campaign is optimizing against."""

    mfr_target: float = 10.0
    youngs_min: float = 1500.0
    impact_min: float = 8.0
    corridor_half_width: float = 5.0

    def __post_init__(self):
        for name in ("mfr_target", "youngs_min", "impact_min", "corridor_half_width"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value)):
                raise InvalidInput(f"{name} must be a finite number")
            if value <= 0:
                raise InvalidInput(f"{name} must be positive")
        if not self.corridor_half_width < self.mfr_target:
            raise InvalidInput(
                "corridor half-width must be smaller than the MFR target"
            )

    def output_constraints(
        self, levels: dict[str, int] | None = None
    ) -> tuple[ConstraintSpec, ConstraintSpec]:
        """The two quality thresholds, optionally at stored relaxation levels."""
        base = (
            ConstraintSpec.at_least(METRIC_YOUNGS, self.youngs_min),
            ConstraintSpec.at_least(METRIC_IMPACT, self.impact_min),
        )
        if not levels:
            return base
        return tuple(c.relaxed(levels.get(c.label(), 0)) for c in base)

    def corridor_constraint(self) -> ConstraintSpec:
        return ConstraintSpec.within_corridor(
            METRIC_MFR, self.mfr_target, self.corridor_half_width
        )

    def target_objective(self) -> ObjectiveSpec:
        return ObjectiveSpec.squared_distance_to_target(self.mfr_target)

    def is_feasible(self, metrics: QualityMetrics) -> bool:
        """Judge a measurement against the original, unrelaxed thresholds."""
        return (
            metrics.youngs_modulus >= self.youngs_min
            and metrics.impact_strength >= self.impact_min
        )

    def to_dict(self) -> dict:
        return {
            "mfr_target": self.mfr_target,
            "youngs_min": self.youngs_min,
            "impact_min": self.impact_min,
            "corridor_half_width": self.corridor_half_width,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemSpec":
        known = {
            "mfr_target",
            "youngs_min",
            "impact_min",
            "corridor_half_width",
        }
        unknown = set(data) - known
        if unknown:
            raise SchemaError(f"unknown problem fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})


# ------------------------------------------------------------ experiments


@dataclass(frozen=True)
class Experiment:
    """One physical (or simulated) compounding trial."""

    id: str
    batch_index: int
    recipe: MixtureRecipe
    provenance: str
    measured: QualityMetrics | None = None

    def __post_init__(self):
        if not self.id:
            raise InvalidInput("experiment id must be non-empty")
        if self.provenance not in PROVENANCES:
            raise InvalidInput(f"unknown provenance {self.provenance!r}")
        if int(self.batch_index) != self.batch_index or self.batch_index < -1:
            raise InvalidInput("batch_index must be an integer >= -1")

    def with_measurement(self, metrics: QualityMetrics) -> "Experiment":
        return replace(self, measured=metrics)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "batch_index": self.batch_index,
            "recipe": self.recipe.to_dict(),
            "provenance": self.provenance,
            "measured": self.measured.as_dict() if self.measured else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Experiment":
        measured = data.get("measured")
        return cls(
            id=str(data["id"]),
            batch_index=int(data["batch_index"]),
            recipe=MixtureRecipe.from_dict(data["recipe"]),
            provenance=data["provenance"],
            measured=QualityMetrics.from_dict(measured) if measured else None,
        )


# ----------------------------------------------------------------- state


@dataclass(frozen=True)
class CampaignState:
    campaign_id: str
    problem: ProblemSpec
    strategy: str
    schedule: tuple[int, ...]
    domain: DomainSpec
    rng_seed: int
    seed_data: tuple[Experiment, ...] = ()
    history: tuple[Experiment, ...] = ()
    relaxation_level: dict = field(default_factory=dict)
    status: str = STATUS_READY
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidInput(f"unknown strategy {self.strategy!r}")
        if self.status not in STATUSES:
            raise InvalidInput(f"unknown status {self.status!r}")
        schedule = tuple(int(s) for s in self.schedule)
        if not schedule or any(s < 1 for s in schedule):
            raise InvalidInput("schedule must be a non-empty list of positive sizes")
        object.__setattr__(self, "schedule", schedule)
        object.__setattr__(self, "seed_data", tuple(self.seed_data))
        object.__setattr__(self, "history", tuple(self.history))
        if len(self.history) > sum(schedule):
            raise InvalidInput("history exceeds the scheduled experiment count")
        for exp in self.seed_data:
            if exp.measured is None:
                raise InvalidInput("seed data rows must carry measurements")

    @property
    def batches_proposed(self) -> int:
        if not self.history:
            return 0
        return self.history[-1].batch_index + 1

    @property
    def next_batch_index(self) -> int:
        return self.batches_proposed

    def open_experiments(self) -> tuple[Experiment, ...]:
        return tuple(e for e in self.history if e.measured is None)

    def completed_experiments(self) -> tuple[Experiment, ...]:
        return tuple(e for e in self.history if e.measured is not None)

    def training_experiments(self) -> tuple[Experiment, ...]:
        """Seed rows plus every completed campaign row, in arrival order."""
        return self.seed_data + self.completed_experiments()

    def to_dict(self) -> dict:
        return {
            "campaign_id": self.campaign_id,
            "problem": self.problem.to_dict(),
            "strategy": self.strategy,
            "schedule": list(self.schedule),
            "domain": self.domain.to_dict(),
            "rng_seed": self.rng_seed,
            "seed_data": [e.to_dict() for e in self.seed_data],
            "history": [e.to_dict() for e in self.history],
            "relaxation_level": dict(self.relaxation_level),
            "status": self.status,
            "options": dict(self.options),
        }


_KNOWN_OPTIONS = {
    "starts",
    "mc_samples",
    "smoothing_temperature",
    "restarts",
    "refit_prior_each_batch",
    "run3_final_objective",
}


def _validated_options(options: dict | None) -> dict:
    options = dict(options or {})
    unknown = set(options) - _KNOWN_OPTIONS
    if unknown:
        raise InvalidInput(f"unknown campaign options: {sorted(unknown)}")
    if options.get("run3_final_objective", "impact") not in ("impact", "mfr_distance"):
        raise InvalidInput(
            "run3_final_objective must be 'impact' or 'mfr_distance'"
        )
    return options


def default_domain(strategy: str) -> DomainSpec:
    """Run 4 works in plain fraction space; the others use augmented features."""
    if strategy == STRATEGY_RUN4:
        return DomainSpec.plain()
    return DomainSpec.augmented()


# ----------------------------------------------------------------- events


def apply_event(state: CampaignState | None, event: dict) -> CampaignState:
    """Fold one event into the state; the only way state ever changes."""
    kind = event.get("event")
    if kind == EVENT_CREATED:
        if state is not None:
            raise StateConflict("created event on an existing campaign")
        return CampaignState(
            campaign_id=event["campaign_id"],
            problem=ProblemSpec.from_dict(event["problem"]),
            strategy=event["strategy"],
            schedule=tuple(event["schedule"]),
            domain=DomainSpec.from_dict(event["domain"]),
            rng_seed=int(event["rng_seed"]),
            seed_data=tuple(Experiment.from_dict(d) for d in event["seed_data"]),
            options=dict(event.get("options", {})),
        )
    if state is None:
        raise StateConflict("event log must begin with a created event")

    if kind == EVENT_RELAXED:
        levels = dict(state.relaxation_level)
        levels[event["constraint"]] = int(event["level"])
        return replace(state, relaxation_level=levels)

    if kind == EVENT_PROPOSED:
        if state.status != STATUS_READY:
            raise StateConflict(f"cannot apply proposal while {state.status}")
        batch_index = int(event["batch_index"])
        if batch_index != state.next_batch_index:
            raise StateConflict(
                f"proposal for batch {batch_index}, expected {state.next_batch_index}"
            )
        experiments = tuple(Experiment.from_dict(d) for d in event["experiments"])
        return replace(
            state,
            history=state.history + experiments,
            status=STATUS_AWAITING,
        )

    if kind == EVENT_RECORDED:
        if state.status != STATUS_AWAITING:
            raise StateConflict(f"cannot apply results while {state.status}")
        by_id = {r["id"]: QualityMetrics.from_dict(r["metrics"]) for r in event["results"]}
        open_ids = [e.id for e in state.history if e.measured is None]
        missing = [exp_id for exp_id in open_ids if exp_id not in by_id]
        if missing:
            raise IncompleteBatch(
                "recorded event does not cover the open batch",
                detail={"missing": missing},
            )
        history = []
        for exp in state.history:
            if exp.measured is None:
                history.append(exp.with_measurement(by_id.pop(exp.id)))
            else:
                history.append(exp)
        if by_id:
            raise UnknownExperiment(
                f"results for unknown experiments: {sorted(by_id)}"
            )
        done = len(history) == sum(state.schedule)
        return replace(
            state,
            history=tuple(history),
            status=STATUS_COMPLETE if done else STATUS_READY,
        )

    if kind == EVENT_COMPLETED:
        if state.open_experiments():
            raise StateConflict("completion event with unmeasured experiments")
        return replace(state, status=STATUS_COMPLETE)

    raise SchemaError(f"unknown event type {kind!r}")


def replay_events(events: Iterable[dict]) -> CampaignState:
    state: CampaignState | None = None
    for event in events:
        state = apply_event(state, event)
    if state is None:
        raise SchemaError("empty event log")
    return state


# ----------------------------------------------------------- construction


def _seed_experiments_from_rows(rows) -> tuple[Experiment, ...]:
    experiments = []
    for k, row in enumerate(rows):
        if isinstance(row, Experiment):
            experiments.append(row)
            continue
        if isinstance(row, (tuple, list)) and len(row) == 2:
            recipe, metrics = row
        else:
            recipe = MixtureRecipe.from_dict(row["recipe"])
            metrics = QualityMetrics.from_dict(row["metrics"])
        experiments.append(
            Experiment(
                id=f"seed-{k:03d}",
                batch_index=-1,
                recipe=recipe,
                provenance=PROVENANCE_MANUAL,
                measured=metrics,
            )
        )
    return tuple(experiments)


def _resolve_seed_data(config: dict, campaign_seed: int) -> tuple[Experiment, ...]:
    spec = config.get("seed_data")
    if spec is None:
        return ()
    if isinstance(spec, (list, tuple)):
        return _seed_experiments_from_rows(spec)
    kind = spec.get("kind")
    if kind == "inline":
        return _seed_experiments_from_rows(spec.get("rows", ()))
    if kind == "csv":
        rows = read_experiments_csv(spec["path"])
        pairs = []
        for row in rows:
            if row["metrics"] is None:
                raise SchemaError("seed data rows must carry all three metrics")
            pairs.append((row["recipe"], row["metrics"]))
        return _seed_experiments_from_rows(pairs)
    if kind == "scarce_synthetic":
        oracle_doc = spec.get("oracle")
        oracle = (
            OracleSpec.from_dict(oracle_doc)
            if oracle_doc
            else OracleSpec.synthetic()
        )
        rows = scarce_seed_dataset(
            oracle,
            size=int(spec.get("size", 20)),
            impact_feasible_rows=int(spec.get("impact_feasible_rows", 0)),
            seed=int(spec.get("seed", campaign_seed)),
        )
        return _seed_experiments_from_rows(rows)
    raise SchemaError(f"unknown seed_data kind {kind!r}")


def create_campaign(config: dict) -> tuple[CampaignState, list[dict]]:
    """Build a campaign from a config mapping; returns state plus its events.

    Config keys: ``strategy`` (required), ``campaign_id``, ``seed``,
    ``problem``, ``schedule``, ``domain``, ``options`` and ``seed_data``
    (inline rows, a CSV path, or a scarce synthetic draw; resolved here and
    frozen into the created event so replay never regenerates it).
    """
    if "strategy" not in config:
        raise InvalidInput("config needs a strategy")
    strategy = config["strategy"]
    if strategy not in STRATEGIES:
        raise InvalidInput(f"unknown strategy {strategy!r}")
    campaign_id = str(config.get("campaign_id", strategy))
    rng_seed = int(config.get("seed", 0))
    problem = ProblemSpec.from_dict(config.get("problem", {}))
    schedule = tuple(int(s) for s in config.get("schedule", DEFAULT_SCHEDULE))
    domain = (
        DomainSpec.from_dict(config["domain"])
        if "domain" in config
        else default_domain(strategy)
    )
    options = _validated_options(config.get("options"))
    seed_data = _resolve_seed_data(config, rng_seed)
    if strategy != STRATEGY_RUN4 and not seed_data:
        raise InvalidInput(
            f"{strategy} fits its prior on historical data; provide seed_data"
        )

    event = {
        "event": EVENT_CREATED,
        "campaign_id": campaign_id,
        "problem": problem.to_dict(),
        "strategy": strategy,
        "schedule": list(schedule),
        "domain": domain.to_dict(),
        "rng_seed": rng_seed,
        "options": options,
        "seed_data": [e.to_dict() for e in seed_data],
    }
    return apply_event(None, event), [event]


# ------------------------------------------------------------- proposals


def _fit_models(
    experiments: Sequence[Experiment],
    domain: DomainSpec,
    rng_seed: int,
    purpose: int,
    batch_key: int,
    restarts: int,
) -> dict[str, gp.GpModel]:
    X = np.stack([e.recipe.as_array() for e in experiments])
    F = domain.feature_map.features_batch(X)
    lower, upper = domain.feature_map.bounds(domain)
    models = {}
    for k, metric in enumerate(KNOWN_METRICS):
        y = np.array([getattr(e.measured, metric) for e in experiments])
        models[metric] = gp.fit(
            F,
            y,
            gp.ScalingSpec(lower, upper),
            restarts=restarts,
            seed=derive_seed(rng_seed, purpose, batch_key, k),
        )
    return models


def _condition_models(
    models: dict[str, gp.GpModel],
    experiments: Sequence[Experiment],
    domain: DomainSpec,
) -> dict[str, gp.GpModel]:
    if not experiments:
        return models
    X = np.stack([e.recipe.as_array() for e in experiments])
    F = domain.feature_map.features_batch(X)
    out = {}
    for metric, model in models.items():
        y = np.array([getattr(e.measured, metric) for e in experiments])
        out[metric] = gp.condition_on(model, F, y)
    return out


def _models_for_batch(state: CampaignState, batch_index: int) -> dict[str, gp.GpModel]:
    restarts = int(state.options.get("restarts", 8))
    if state.strategy == STRATEGY_RUN4:
        rows = state.training_experiments()
        if len(rows) < 2:
            raise StateConflict("not enough completed experiments to fit models")
        return _fit_models(
            rows, state.domain, state.rng_seed, _PURPOSE_REFIT, batch_index, restarts
        )
    if not state.seed_data:
        raise StateConflict(
            f"{state.strategy} fits its prior on seed data, and there is none"
        )
    if state.options.get("refit_prior_each_batch"):
        return _fit_models(
            state.training_experiments(),
            state.domain,
            state.rng_seed,
            _PURPOSE_REFIT,
            batch_index,
            restarts,
        )
    prior = _fit_models(
        state.seed_data, state.domain, state.rng_seed, _PURPOSE_PRIOR_FIT, 0, restarts
    )
    return _condition_models(prior, state.completed_experiments(), state.domain)


def _acquisition_spec(
    state: CampaignState,
    objective: ObjectiveSpec,
    constraints: Sequence[ConstraintSpec],
    batch_index: int,
) -> AcquisitionSpec:
    return AcquisitionSpec(
        objective=objective,
        constraints=tuple(constraints),
        mc_samples=int(state.options.get("mc_samples", 128)),
        base_sample_seed=derive_seed(
            state.rng_seed, _PURPOSE_MC_BASE, batch_index
        ),
        smoothing_temperature=float(
            state.options.get("smoothing_temperature", 1e-3)
        ),
    )


def _run_optimizer(
    state: CampaignState,
    objective: ObjectiveSpec,
    constraints: Sequence[ConstraintSpec],
    models: dict[str, gp.GpModel],
    batch_index: int,
    size: int,
) -> ProposalResult:
    return optimize_acquisition(
        models,
        _acquisition_spec(state, objective, constraints, batch_index),
        state.domain,
        batch_size=size,
        starts=int(state.options.get("starts", 64)),
        seed=derive_seed(state.rng_seed, _PURPOSE_OPTIMIZE, batch_index),
    )


def _binding_constraint(
    constraints: Sequence[ConstraintSpec], error: AllStartsInfeasible
) -> ConstraintSpec:
    per_constraint = (error.detail or {}).get("per_constraint_best_pof", {})
    if per_constraint:
        label = min(per_constraint, key=per_constraint.get)
        for constraint in constraints:
            if constraint.label() == label:
                return constraint
    return constraints[0]


@dataclass(frozen=True)
class ProposeOutcome:
    state: CampaignState
    experiments: tuple[Experiment, ...]
    events: tuple[dict, ...]
    proposal: ProposalResult | None


def propose_batch(state: CampaignState) -> ProposeOutcome:
    """Compute the next batch for the campaign's strategy.

    Returns the advanced state together with the events that encode the
    transition; callers persist the events and may inspect the raw optimizer
    result for diagnostics.
    """
    if state.status != STATUS_READY:
        raise StateConflict(
            f"cannot propose while campaign is {state.status}",
            detail={"status": state.status},
        )
    batch_index = state.next_batch_index
    if batch_index >= len(state.schedule):
        raise StateConflict("schedule exhausted")
    size = state.schedule[batch_index]

    events: list[dict] = []
    proposal: ProposalResult | None = None
    provenance = PROVENANCE_BO

    if state.strategy == STRATEGY_RUN4 and batch_index == 0:
        sample = sample_dirichlet_rejection(
            state.domain,
            size,
            seed=derive_seed(state.rng_seed, _PURPOSE_INIT_SAMPLE, 0),
        )
        recipes = sample.recipes
        provenance = PROVENANCE_RANDOM
    else:
        models = _models_for_batch(state, batch_index)
        objective, constraints = _strategy_problem(state, batch_index)
        if state.strategy == STRATEGY_RUN2 and batch_index < 2:
            proposal, relax_events = _propose_with_relaxation(
                state, models, objective, constraints, batch_index, size
            )
            events.extend(relax_events)
        else:
            proposal = _run_optimizer(
                state, objective, constraints, models, batch_index, size
            )
        recipes = proposal.recipes

    experiments = tuple(
        Experiment(
            id=f"e{len(state.history) + k:03d}",
            batch_index=batch_index,
            recipe=recipe,
            provenance=provenance,
        )
        for k, recipe in enumerate(recipes)
    )
    proposed = {
        "event": EVENT_PROPOSED,
        "batch_index": batch_index,
        "experiments": [e.to_dict() for e in experiments],
    }
    if proposal is not None:
        proposed["acquisition_values"] = [
            float(v) for v in proposal.acquisition_values
        ]
    events.append(proposed)

    new_state = state
    for event in events:
        new_state = apply_event(new_state, event)
    return ProposeOutcome(
        state=new_state,
        experiments=experiments,
        events=tuple(events),
        proposal=proposal,
    )


def _strategy_problem(
    state: CampaignState, batch_index: int
) -> tuple[ObjectiveSpec, tuple[ConstraintSpec, ...]]:
    problem = state.problem
    if state.strategy == STRATEGY_RUN3:
        if batch_index < 2:
            return ObjectiveSpec.maximize_metric(METRIC_IMPACT), ()
        final = state.options.get("run3_final_objective", "impact")
        if final == "mfr_distance":
            objective = problem.target_objective()
        else:
            objective = ObjectiveSpec.maximize_metric(METRIC_IMPACT)
        constraints = (
            ConstraintSpec.at_least(METRIC_YOUNGS, problem.youngs_min),
            problem.corridor_constraint(),
        )
        return objective, constraints
    if state.strategy == STRATEGY_RUN2:
        levels = state.relaxation_level if batch_index < 2 else None
        return problem.target_objective(), problem.output_constraints(levels)
    # run1 and run4 share the plain constrained formulation.
    return problem.target_objective(), problem.output_constraints()


def _propose_with_relaxation(
    state: CampaignState,
    models: dict[str, gp.GpModel],
    objective: ObjectiveSpec,
    constraints: tuple[ConstraintSpec, ...],
    batch_index: int,
    size: int,
) -> tuple[ProposalResult, list[dict]]:
    """Retry loop for run 2: relax the binding constraint one step at a time."""
    levels = {c.label(): c.relaxation_level for c in constraints}
    events: list[dict] = []
    while True:
        try:
            result = _run_optimizer(
                state, objective, constraints, models, batch_index, size
            )
            return result, events
        except AllStartsInfeasible as error:
            binding = _binding_constraint(constraints, error)
            label = binding.label()
            new_level = levels[label] + 1
            if new_level > MAX_RELAXATION_LEVEL:
                raise RelaxationExhausted(
                    f"constraint {label} still infeasible at the relaxation cap",
                    detail={
                        "constraint": label,
                        "level": levels[label],
                        "per_constraint_best_pof": (error.detail or {}).get(
                            "per_constraint_best_pof"
                        ),
                    },
                ) from error
            levels[label] = new_level
            constraints = tuple(
                c.relaxed(levels[c.label()]) for c in constraints
            )
            events.append(
                {
                    "event": EVENT_RELAXED,
                    "batch_index": batch_index,
                    "constraint": label,
                    "level": new_level,
                }
            )


# --------------------------------------------------------------- results


def _normalize_results(batch_results) -> list[tuple[str, QualityMetrics]]:
    pairs = []
    for item in batch_results:
        if isinstance(item, dict):
            metrics = item["metrics"]
            pairs.append(
                (
                    str(item["id"]),
                    metrics
                    if isinstance(metrics, QualityMetrics)
                    else QualityMetrics.from_dict(metrics),
                )
            )
        else:
            exp_id, metrics = item
            if not isinstance(metrics, QualityMetrics):
                metrics = QualityMetrics.from_dict(metrics)
            pairs.append((str(exp_id), metrics))
    return pairs


def record_results(
    state: CampaignState, batch_results
) -> tuple[CampaignState, list[dict]]:
    """Attach measurements to the open batch; ids must match it exactly."""
    if state.status != STATUS_AWAITING:
        raise StateConflict(
            f"no open batch to record against (campaign is {state.status})"
        )
    pairs = _normalize_results(batch_results)
    open_ids = [e.id for e in state.open_experiments()]
    seen: dict[str, QualityMetrics] = {}
    for exp_id, metrics in pairs:
        if exp_id not in open_ids:
            raise UnknownExperiment(
                f"experiment {exp_id!r} is not in the open batch",
                detail={"open": open_ids},
            )
        if exp_id in seen:
            raise InvalidInput(f"duplicate result for experiment {exp_id!r}")
        seen[exp_id] = metrics
    missing = [exp_id for exp_id in open_ids if exp_id not in seen]
    if missing:
        raise IncompleteBatch(
            "open batch is missing results",
            detail={"missing": missing},
        )

    event = {
        "event": EVENT_RECORDED,
        "results": [
            {"id": exp_id, "metrics": seen[exp_id].as_dict()}
            for exp_id in open_ids
        ],
    }
    events = [event]
    new_state = apply_event(state, event)
    if new_state.status == STATUS_COMPLETE:
        completed = {
            "event": EVENT_COMPLETED,
            "summary": campaign_summary(new_state),
        }
        new_state = apply_event(new_state, completed)
        events.append(completed)
    return new_state, events


def evaluate_with_oracle(
    state: CampaignState, oracle: OracleSpec
) -> tuple[CampaignState, list[dict]]:
    """Measure the open batch by querying the oracle, one call per experiment."""
    if state.status != STATUS_AWAITING:
        raise StateConflict(
            f"no open batch to evaluate (campaign is {state.status})"
        )
    results = []
    for exp in state.open_experiments():
        try:
            metrics = query(oracle, exp.recipe, noise_key=exp.id)
        except MixboError as error:
            raise type(error)(
                f"oracle failed on experiment {exp.id}: {error.message}",
                detail={"experiment_id": exp.id, "inner": error.detail},
            ) from error
        results.append((exp.id, metrics))
    return record_results(state, results)


# --------------------------------------------------------------- summary


def campaign_summary(state: CampaignState) -> dict:
    """Aggregate statistics, always judged against unrelaxed thresholds."""
    problem = state.problem
    completed = state.completed_experiments()
    feasible = [e for e in completed if problem.is_feasible(e.measured)]

    best_distance = None
    best_row = None
    for exp in feasible:
        distance = abs(exp.measured.mfr - problem.mfr_target)
        if best_distance is None or distance < best_distance:
            best_distance = distance
            best_row = exp

    batches = []
    for batch_index in range(state.batches_proposed):
        rows = []
        for exp in state.history:
            if exp.batch_index != batch_index:
                continue
            row = {
                "id": exp.id,
                "provenance": exp.provenance,
                "recipe": exp.recipe.to_dict(),
                "measured": exp.measured.as_dict() if exp.measured else None,
                "feasible": (
                    problem.is_feasible(exp.measured) if exp.measured else None
                ),
            }
            rows.append(row)
        batches.append({"batch_index": batch_index, "experiments": rows})

    proposals = [
        e.recipe for e in state.history if e.provenance == PROVENANCE_BO
    ]
    boundary = (
        diagnostics.boundary_fraction(proposals, state.domain)
        if proposals
        else None
    )

    return {
        "campaign_id": state.campaign_id,
        "strategy": state.strategy,
        "status": state.status,
        "problem": problem.to_dict(),
        "schedule": list(state.schedule),
        "experiments_total": len(state.history),
        "experiments_completed": len(completed),
        "feasible_count": len(feasible),
        "best_mfr_distance": best_distance,
        "best_feasible": best_row.to_dict() if best_row else None,
        "relaxation_level": dict(state.relaxation_level),
        "boundary_fraction": boundary,
        "batches": batches,
    }


def campaign_diagnostics(state: CampaignState) -> dict:
    """Versioned diagnostics document for one campaign."""
    training = state.training_experiments()
    audit = (
        diagnostics.audit_training_data(
            [e.measured for e in training], state.problem.output_constraints()
        )
        if training
        else None
    )
    proposals = [
        e.recipe for e in state.history if e.provenance == PROVENANCE_BO
    ]
    boundary = (
        diagnostics.boundary_fraction(proposals, state.domain)
        if proposals
        else None
    )
    return diagnostics.assemble_report(
        audit=audit,
        boundary=boundary,
        dimension=state.domain.feature_map.dim,
    )


# ------------------------------------------------------------------- CSV


def _format_float(value: float) -> str:
    return repr(float(value))


def export_csv(state: CampaignState, include_seed_data: bool = False) -> str:
    """Render the campaign history in the shared experiments CSV schema."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    rows = (state.seed_data if include_seed_data else ()) + state.history
    for exp in rows:
        fractions = [_format_float(v) for v in exp.recipe.as_array()]
        if exp.measured is not None:
            metrics = [
                _format_float(getattr(exp.measured, metric))
                for metric in KNOWN_METRICS
            ]
        else:
            metrics = ["", "", ""]
        writer.writerow(
            [exp.id, exp.batch_index, *fractions, *metrics, exp.provenance]
        )
    return out.getvalue()


def read_experiments_csv(path) -> list[dict]:
    """Parse the shared CSV schema into rows of recipe plus optional metrics."""
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise SchemaError("experiments CSV has no header row")
    fields = [name.strip() for name in reader.fieldnames]
    missing = [c for c in COMPONENTS if c not in fields]
    if missing:
        raise SchemaError(f"experiments CSV missing columns: {missing}")
    rows = []
    for k, raw in enumerate(reader):
        raw = {key.strip(): (value or "").strip() for key, value in raw.items() if key}
        try:
            recipe = MixtureRecipe(*(float(raw[c]) for c in COMPONENTS))
        except ValueError as exc:
            raise SchemaError(f"row {k}: bad fraction value ({exc})") from exc
        metric_values = {}
        for column, metric in _CSV_METRIC_COLUMNS.items():
            text_value = raw.get(column, "")
            if text_value:
                try:
                    metric_values[metric] = float(text_value)
                except ValueError as exc:
                    raise SchemaError(
                        f"row {k}: bad value in {column} ({exc})"
                    ) from exc
        if len(metric_values) == 3:
            metrics = QualityMetrics.from_dict(metric_values)
        elif not metric_values:
            metrics = None
        else:
            raise SchemaError(
                f"row {k}: metrics must be all present or all absent"
            )
        rows.append(
            {
                "id": raw.get("id") or f"row-{k:03d}",
                "batch": int(raw["batch"]) if raw.get("batch") else None,
                "recipe": recipe,
                "metrics": metrics,
                "provenance": raw.get("provenance") or PROVENANCE_MANUAL,
            }
        )
    return rows


def read_results_csv(path) -> list[tuple[str, QualityMetrics]]:
    """Parse a results CSV (id plus the three metric columns)."""
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise SchemaError("results CSV has no header row")
    fields = [name.strip() for name in reader.fieldnames]
    needed = ["id", *(_CSV_METRIC_COLUMNS)]
    missing = [c for c in needed if c not in fields]
    if missing:
        raise SchemaError(f"results CSV missing columns: {missing}")
    pairs = []
    for k, raw in enumerate(reader):
        raw = {key.strip(): (value or "").strip() for key, value in raw.items() if key}
        values = {}
        for column, metric in _CSV_METRIC_COLUMNS.items():
            try:
                values[metric] = float(raw[column])
            except (KeyError, ValueError) as exc:
                raise SchemaError(
                    f"row {k}: bad or missing value in {column}"
                ) from exc
        pairs.append((raw["id"], QualityMetrics.from_dict(values)))
    return pairs
