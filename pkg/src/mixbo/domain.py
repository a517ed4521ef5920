"""The bounded-simplex design space for four-component compounds.

A recipe is a point on the probability simplex with per-component caps
(filler at most 30 %, impact modifier at most 20 %). The module provides
rejection sampling from a Dirichlet prior, Euclidean projection onto the
feasible set, feature maps (plain fractions or data-sheet augmentation to
11 dimensions), and the sequential-greedy batch acquisition optimizer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .acquisition import (
    NEG_INF,
    AcquisitionSpec,
    NoisyEiEvaluator,
    _log_pof_matrix,
)
from .errors import (
    AllStartsInfeasible,
    DimensionMismatch,
    EmptyDomain,
    InvalidInput,
    RejectionBudgetExceeded,
    SchemaError,
)
from .gp import GpModel, condition_on, predict

COMPONENTS = ("virgin_pp", "recycled", "filler", "impact_modifier")
# Product-family caps: filler at most 30 %, impact modifier at most 20 %.
# They are the default domain bounds; a recipe itself only has to be a
# point on the simplex so that wider experimental domains stay expressible.
DEFAULT_UPPER_BOUNDS = np.array([1.0, 1.0, 0.3, 0.2])
_SUM_TOL = 1e-9

MAX_CONSECUTIVE_REJECTIONS = 1_000_000
INFEASIBLE_LOG_POF = math.log(1e-6)
# Candidate-pool oversampling factor for acquisition start screening.
_SCREENING_FACTOR = 16


@dataclass(frozen=True)
class MixtureRecipe:
    """Mass fractions of the four components, summing to one."""

    virgin_pp: float
    recycled: float
    filler: float
    impact_modifier: float

    def __post_init__(self):
        values = self.as_array()
        if not np.all(np.isfinite(values)):
            raise InvalidInput("recipe fractions must be finite")
        if np.any(values < -_SUM_TOL) or np.any(values > 1.0 + _SUM_TOL):
            raise InvalidInput(
                "recipe fractions must lie in [0, 1]",
                detail={"fractions": values.tolist()},
            )
        total = float(values.sum())
        if abs(total - 1.0) > _SUM_TOL:
            raise InvalidInput(
                f"recipe fractions sum to {total!r}, expected 1",
                detail={"fractions": values.tolist()},
            )

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.virgin_pp, self.recycled, self.filler, self.impact_modifier],
            dtype=float,
        )

    @classmethod
    def from_array(cls, values) -> "MixtureRecipe":
        arr = np.asarray(values, dtype=float).ravel()
        if arr.shape != (4,):
            raise DimensionMismatch("recipe needs exactly 4 fractions")
        # Forgive sub-tolerance numerical dust from projections.
        arr = np.clip(arr, 0.0, 1.0)
        return cls(*arr.tolist())

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in COMPONENTS}

    @classmethod
    def from_dict(cls, data: dict) -> "MixtureRecipe":
        return cls(*(float(data[name]) for name in COMPONENTS))


@dataclass(frozen=True)
class MaterialSheet:
    """Nominal data-sheet properties of one raw material."""

    material_id: str
    role: str
    nominal_mfr_g_per_10min: float
    nominal_youngs_mpa: float
    nominal_impact_kj_per_m2: float

    def __post_init__(self):
        if self.role not in ROLES:
            raise SchemaError(f"unknown material role {self.role!r}")
        for name in (
            "nominal_mfr_g_per_10min",
            "nominal_youngs_mpa",
            "nominal_impact_kj_per_m2",
        ):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value)):
                raise SchemaError(f"{name} must be a finite number")
            if value <= 0:
                raise SchemaError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "material_id": self.material_id,
            "role": self.role,
            "nominal_mfr_g_per_10min": self.nominal_mfr_g_per_10min,
            "nominal_youngs_mpa": self.nominal_youngs_mpa,
            "nominal_impact_kj_per_m2": self.nominal_impact_kj_per_m2,
        }


ROLES = ("virgin", "recycled", "filler", "impact_modifier")


@dataclass(frozen=True)
class IngredientSheetSet:
    """One material per role, with nominal properties used for augmentation."""

    sheets: tuple[MaterialSheet, ...]

    def __post_init__(self):
        roles = [s.role for s in self.sheets]
        if sorted(roles) != sorted(ROLES):
            raise SchemaError(
                f"need exactly one sheet per role {ROLES}, got {roles}"
            )
        ordered = tuple(
            next(s for s in self.sheets if s.role == role) for role in ROLES
        )
        object.__setattr__(self, "sheets", ordered)

    def property_matrix(self) -> np.ndarray:
        """4x3 matrix of (mfr, youngs, impact) nominals, one row per role."""
        return np.array(
            [
                [
                    s.nominal_mfr_g_per_10min,
                    s.nominal_youngs_mpa,
                    s.nominal_impact_kj_per_m2,
                ]
                for s in self.sheets
            ]
        )

    def to_records(self) -> list[dict]:
        return [s.to_dict() for s in self.sheets]

    @classmethod
    def from_records(cls, records) -> "IngredientSheetSet":
        try:
            sheets = tuple(
                MaterialSheet(
                    material_id=str(r["material_id"]),
                    role=str(r["role"]),
                    nominal_mfr_g_per_10min=float(r["nominal_mfr_g_per_10min"]),
                    nominal_youngs_mpa=float(r["nominal_youngs_mpa"]),
                    nominal_impact_kj_per_m2=float(r["nominal_impact_kj_per_m2"]),
                )
                for r in records
            )
        except KeyError as exc:
            raise SchemaError(f"data sheet record missing field {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"malformed data sheet record: {exc}") from exc
        return cls(sheets=sheets)

    @classmethod
    def from_json_file(cls, path) -> "IngredientSheetSet":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                records = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"data sheet file is not valid JSON: {exc}")
        if not isinstance(records, list):
            raise SchemaError("data sheet file must hold a JSON array")
        return cls.from_records(records)


def default_ingredient_sheets() -> IngredientSheetSet:
    """Nominal data-sheet values for the shipped demonstration materials."""
    return IngredientSheetSet.from_records(
        [
            {
                "material_id": "PP-H-1200",
                "role": "virgin",
                "nominal_mfr_g_per_10min": 12.0,
                "nominal_youngs_mpa": 1600.0,
                "nominal_impact_kj_per_m2": 5.0,
            },
            {
                "material_id": "rPP-blend-30",
                "role": "recycled",
                "nominal_mfr_g_per_10min": 30.0,
                "nominal_youngs_mpa": 800.0,
                "nominal_impact_kj_per_m2": 2.0,
            },
            {
                "material_id": "talc-T84",
                "role": "filler",
                "nominal_mfr_g_per_10min": 0.5,
                "nominal_youngs_mpa": 3500.0,
                "nominal_impact_kj_per_m2": 0.5,
            },
            {
                "material_id": "EPR-copoly",
                "role": "impact_modifier",
                "nominal_mfr_g_per_10min": 3.0,
                "nominal_youngs_mpa": 300.0,
                "nominal_impact_kj_per_m2": 25.0,
            },
        ]
    )


class PlainFeatureMap:
    """Identity map: the four mass fractions are the model inputs."""

    name = "plain_4d"
    dim = 4

    def features_batch(self, recipes: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(recipes, dtype=float))
        if X.shape[1] != 4:
            raise DimensionMismatch("expected 4 recipe columns")
        return X.copy()

    def bounds(self, domain: "DomainSpec") -> tuple[np.ndarray, np.ndarray]:
        return np.zeros(4), domain.upper_bounds.copy()

    def __eq__(self, other):
        return isinstance(other, PlainFeatureMap)


class AugmentedFeatureMap:
    """Fractions plus data-sheet-derived context, 11 features total.

    The extras are the mixture-weighted expected value of each nominal
    property (3 features) and the nominal-MFR-weighted fractions (4
    features, normalized). All extras are pure functions of the recipe, so
    the optimizer recomputes them at every probe instead of treating them
    as free inputs.
    """

    name = "augmented"

    def __init__(self, sheets: IngredientSheetSet | None = None):
        self.sheets = sheets if sheets is not None else default_ingredient_sheets()
        self._P = self.sheets.property_matrix()

    @property
    def dim(self) -> int:
        return 11

    def features_batch(self, recipes: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(recipes, dtype=float))
        if X.shape[1] != 4:
            raise DimensionMismatch("expected 4 recipe columns")
        expected = X @ self._P
        weighted = X * self._P[:, 0][None, :]
        denom = weighted.sum(axis=1, keepdims=True)
        safe = np.maximum(denom, 1e-12)
        w = np.where(denom > 1e-12, weighted / safe, 0.25)
        return np.hstack([X, expected, w])

    def bounds(self, domain: "DomainSpec") -> tuple[np.ndarray, np.ndarray]:
        lower4 = np.zeros(4)
        upper4 = domain.upper_bounds.copy()
        prop_lo = self._P.min(axis=0)
        prop_hi = self._P.max(axis=0)
        flat = prop_hi <= prop_lo
        prop_hi = np.where(flat, prop_lo + 1.0, prop_hi)
        lower = np.concatenate([lower4, prop_lo, np.zeros(4)])
        upper = np.concatenate([upper4, prop_hi, np.ones(4)])
        return lower, upper

    def __eq__(self, other):
        return (
            isinstance(other, AugmentedFeatureMap)
            and self.sheets == other.sheets
        )


@dataclass(frozen=True)
class DomainSpec:
    """Bounded simplex with an attached feature map."""

    upper_bounds: np.ndarray = field(
        default_factory=lambda: DEFAULT_UPPER_BOUNDS.copy()
    )
    feature_map: PlainFeatureMap | AugmentedFeatureMap = field(
        default_factory=PlainFeatureMap
    )

    def __post_init__(self):
        ub = np.asarray(self.upper_bounds, dtype=float).ravel()
        if ub.shape != (4,):
            raise DimensionMismatch("domain needs 4 upper bounds")
        if np.any(ub <= 0) or np.any(ub > 1.0 + 1e-12):
            raise InvalidInput(
                "upper bounds must lie in (0, 1]",
                detail={"upper_bounds": ub.tolist()},
            )
        if float(ub.sum()) < 1.0 - 1e-12:
            raise EmptyDomain(
                "upper bounds leave no room for fractions summing to one",
                detail={"upper_bounds": ub.tolist()},
            )
        object.__setattr__(self, "upper_bounds", ub)

    @classmethod
    def plain(cls, upper_bounds=None) -> "DomainSpec":
        ub = DEFAULT_UPPER_BOUNDS.copy() if upper_bounds is None else upper_bounds
        return cls(upper_bounds=ub, feature_map=PlainFeatureMap())

    @classmethod
    def augmented(
        cls, sheets: IngredientSheetSet | None = None, upper_bounds=None
    ) -> "DomainSpec":
        ub = DEFAULT_UPPER_BOUNDS.copy() if upper_bounds is None else upper_bounds
        return cls(upper_bounds=ub, feature_map=AugmentedFeatureMap(sheets))

    def __eq__(self, other):
        if not isinstance(other, DomainSpec):
            return NotImplemented
        return (
            np.array_equal(self.upper_bounds, other.upper_bounds)
            and self.feature_map == other.feature_map
        )

    def contains(self, recipe: MixtureRecipe, tol: float = _SUM_TOL) -> bool:
        values = recipe.as_array()
        return bool(np.all(values <= self.upper_bounds + tol))

    def to_dict(self) -> dict:
        doc = {
            "upper_bounds": self.upper_bounds.tolist(),
            "feature_map": self.feature_map.name,
        }
        if isinstance(self.feature_map, AugmentedFeatureMap):
            doc["data_sheets"] = self.feature_map.sheets.to_records()
        return doc

    @classmethod
    def from_dict(cls, data: dict) -> "DomainSpec":
        ub = np.asarray(
            data.get("upper_bounds", DEFAULT_UPPER_BOUNDS), dtype=float
        )
        fm_name = data.get("feature_map", "plain_4d")
        if fm_name == "plain_4d":
            return cls.plain(ub)
        if fm_name == "augmented":
            records = data.get("data_sheets")
            sheets = (
                IngredientSheetSet.from_records(records)
                if records
                else default_ingredient_sheets()
            )
            return cls.augmented(sheets, ub)
        raise SchemaError(f"unknown feature map {fm_name!r}")


@dataclass(frozen=True)
class DirichletSampleResult:
    recipes: tuple[MixtureRecipe, ...]
    proposed: int
    accepted: int
    rejected: int

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0


def sample_dirichlet_rejection(
    domain: DomainSpec,
    count: int,
    alpha=None,
    seed: int | np.random.Generator = 0,
) -> DirichletSampleResult:
    """Dirichlet draws conditioned on the box bounds, by rejection.

    Deterministic given the seed. Raises RejectionBudgetExceeded after one
    million consecutive rejections, the signature of an over-tight box.
    """
    if count < 1:
        raise InvalidInput("count must be at least 1")
    alpha_vec = np.ones(4) if alpha is None else np.asarray(alpha, dtype=float)
    if alpha_vec.shape != (4,) or np.any(alpha_vec <= 0):
        raise InvalidInput("alpha must be 4 positive concentrations")
    rng = (
        seed
        if isinstance(seed, np.random.Generator)
        else np.random.default_rng(seed)
    )

    kept: list[MixtureRecipe] = []
    proposed = 0
    accepted_total = 0
    consecutive_rejections = 0
    chunk = 4096
    while len(kept) < count:
        draws = rng.dirichlet(alpha_vec, size=chunk)
        ok = np.all(draws <= domain.upper_bounds[None, :], axis=1)
        proposed += chunk
        if not np.any(ok):
            consecutive_rejections += chunk
            if consecutive_rejections >= MAX_CONSECUTIVE_REJECTIONS:
                raise RejectionBudgetExceeded(
                    "one million consecutive Dirichlet rejections",
                    detail={"upper_bounds": domain.upper_bounds.tolist()},
                )
            continue
        idx = np.flatnonzero(ok)
        accepted_total += len(idx)
        # Rejections since the last acceptance within this chunk.
        consecutive_rejections = chunk - 1 - int(idx[-1])
        for i in idx:
            if len(kept) < count:
                kept.append(MixtureRecipe.from_array(draws[i]))
    return DirichletSampleResult(
        recipes=tuple(kept),
        proposed=proposed,
        accepted=accepted_total,
        rejected=proposed - accepted_total,
    )


def _waterfill_rows(points: np.ndarray, upper_bounds: np.ndarray) -> np.ndarray:
    """Exact projection onto {0 <= x <= u, sum x = 1} per row.

    The KKT conditions give x = clip(v - lam, 0, u) with sum x(lam) = 1;
    the sum is monotone in lam, so bisection nails it.
    """
    V = np.atleast_2d(np.asarray(points, dtype=float))
    lo = V.min(axis=1) - 1.0
    hi = V.max(axis=1)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        s = np.clip(V - mid[:, None], 0.0, upper_bounds[None, :]).sum(axis=1)
        high_side = s >= 1.0
        lo = np.where(high_side, mid, lo)
        hi = np.where(high_side, hi, mid)
    return np.clip(V - lo[:, None], 0.0, upper_bounds[None, :])


def _project_batch(
    points: np.ndarray,
    upper_bounds: np.ndarray,
    tol: float = 1e-10,
    max_iterations: int = 20000,
) -> np.ndarray:
    """Alternating projection (with correction terms) onto the feasible set.

    Converges to the Euclidean projection onto {0 <= x <= u, sum x = 1}
    because both sets are convex; the correction vectors are what makes the
    alternation exact rather than merely feasible.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float)).copy()
    n = X.shape[1]
    # Dropping the component orthogonal to the hyperplane first leaves the
    # projection unchanged (the feasible set lies inside the hyperplane)
    # and spares the alternation from draining it one step at a time.
    X += (1.0 - X.sum(axis=1, keepdims=True)) / n
    original = X.copy()
    p = np.zeros_like(X)
    q = np.zeros_like(X)
    Y = X
    for _ in range(max_iterations):
        Y = np.clip(X + p, 0.0, upper_bounds[None, :])
        p = X + p - Y
        Yq = Y + q
        Xn = Yq + (1.0 - Yq.sum(axis=1, keepdims=True)) / n
        q = Yq - Xn
        displacement = np.max(np.abs(Xn - X))
        # The iterate alone can stabilize while still infeasible, so also
        # require the box-side and hyperplane-side points to agree.
        gap = np.max(np.abs(Xn - Y))
        X = Xn
        if displacement < tol and gap < tol:
            break
    # Points many domain diameters away can exhaust the iteration budget
    # (the correction terms drain distance at a bounded rate); finish those
    # rows with the exact single-multiplier solve of the same problem.
    stale = np.abs(X - Y).max(axis=1) > 10.0 * tol
    if np.any(stale):
        X[stale] = _waterfill_rows(original[stale], upper_bounds)
    # One exact pass over the near-converged iterate: makes the box bounds
    # hold exactly (the alternation leaves ~tol/10 violations) and moves the
    # point by at most its own distance to the true projection.
    return _waterfill_rows(X, upper_bounds)


def project_feasible(
    point, domain: DomainSpec | None = None
) -> MixtureRecipe:
    """Euclidean projection of an arbitrary 4-vector onto the domain."""
    arr = np.asarray(point, dtype=float).ravel()
    if arr.shape != (4,):
        raise DimensionMismatch("projection input needs 4 components")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("projection input must be finite")
    dom = domain if domain is not None else DomainSpec.plain()
    projected = _project_batch(arr[None, :], dom.upper_bounds)[0]
    return MixtureRecipe.from_array(projected)


@dataclass(frozen=True)
class ProposalResult:
    """Output of the batch optimizer: recipes plus bookkeeping."""

    recipes: tuple[MixtureRecipe, ...]
    acquisition_values: tuple[float, ...]
    feasibility: tuple[dict, ...]
    trace: tuple[dict, ...]
    diagnostics: dict


def optimize_acquisition(
    models: dict[str, GpModel],
    spec: AcquisitionSpec,
    domain: DomainSpec,
    batch_size: int,
    starts: int = 64,
    seed: int = 0,
    max_iterations: int = 100,
) -> ProposalResult:
    """Sequential-greedy batch proposal with believer fantasies.

    Each member is found by multi-start projected ascent on the constrained
    acquisition (numeric central-difference gradients in scaled coordinates),
    then every per-metric model is conditioned on its posterior mean at the
    chosen recipe before the next member is optimized.
    """
    if batch_size < 1:
        raise InvalidInput("batch_size must be at least 1")
    if starts < 1:
        raise InvalidInput("starts must be at least 1")
    feature_map = domain.feature_map
    ub = domain.upper_bounds
    work = dict(models)
    objective_metric = spec.objective.metric
    if objective_metric not in work:
        raise InvalidInput(f"no model supplied for metric {objective_metric!r}")
    for constraint in spec.constraints:
        if constraint.metric not in work:
            raise InvalidInput(
                f"no model supplied for constraint metric {constraint.metric!r}"
            )

    member_seeds = np.random.SeedSequence(seed).spawn(batch_size)
    chosen: list[MixtureRecipe] = []
    chosen_values: list[float] = []
    feasibility: list[dict] = []
    trace: list[dict] = []
    iteration_counts: list[int] = []

    for j in range(batch_size):
        objective_model = work[objective_metric]
        observed = objective_model.scaling.unscale(objective_model.train_inputs)
        evaluator = NoisyEiEvaluator(work, observed, spec)

        def score(recipes_raw: np.ndarray):
            F = feature_map.features_batch(recipes_raw)
            nei = evaluator.scores(F)
            if spec.constraints:
                pof = _log_pof_matrix(work, F, spec.constraints)
                pof_total = pof.sum(axis=1)
                bad = (pof <= NEG_INF).any(axis=1) | (nei <= NEG_INF)
                total = np.where(bad, NEG_INF, nei + pof_total)
            else:
                pof = np.zeros((len(F), 0))
                pof_total = np.zeros(len(F))
                total = nei
            return total, nei, pof_total, pof

        # Cliff-shaped feasibility surfaces make cold gradient ascent from
        # random points unreliable, so screen a cheap oversampled pool by
        # acquisition value and ascend only from the best scorers.
        rng = np.random.default_rng(member_seeds[j])
        pool_size = max(_SCREENING_FACTOR * starts, 512)
        pool = sample_dirichlet_rejection(domain, pool_size, seed=rng)
        Xp = np.stack([r.as_array() for r in pool.recipes])
        pool_total = score(Xp)[0]
        keep = np.argsort(-pool_total)[:starts]
        X0 = Xp[keep]
        total0 = pool_total[keep]

        final_X, final_total, used_iterations = _ascend_starts(
            score, X0, total0, ub, max_iterations
        )
        iteration_counts.append(used_iterations)

        _, _, final_pof_total, final_pof = score(final_X)
        if spec.constraints:
            best_log_pof = float(np.max(final_pof_total))
            if best_log_pof < INFEASIBLE_LOG_POF:
                per_constraint_best = {
                    c.label(): float(np.exp(np.max(final_pof[:, k])))
                    for k, c in enumerate(spec.constraints)
                }
                raise AllStartsInfeasible(
                    "no start reached non-negligible feasibility probability",
                    detail={
                        "member_index": j,
                        "best_log_pof": best_log_pof,
                        "per_constraint_best_pof": per_constraint_best,
                    },
                )

        order = np.argsort(-final_total)
        pick = None
        for idx in order:
            candidate = final_X[idx]
            if all(
                float(np.linalg.norm(candidate - c.as_array())) > 1e-6
                for c in chosen
            ):
                pick = int(idx)
                break
        if pick is None:
            # Every optimum collides with an earlier member; fall back to
            # fresh feasible draws until one is distinct.
            for _ in range(1000):
                extra = sample_dirichlet_rejection(domain, 1, seed=rng).recipes[0]
                if all(
                    float(np.linalg.norm(extra.as_array() - c.as_array())) > 1e-6
                    for c in chosen
                ):
                    member = extra.as_array()
                    break
            else:
                raise InvalidInput("could not find a distinct batch member")
            member_value, _, member_pof_total, member_pof = (
                v[0] for v in score(member[None, :])
            )
        else:
            member = final_X[pick]
            member_value = final_total[pick]
            member_pof_total = final_pof_total[pick]
            member_pof = final_pof[pick]

        recipe = MixtureRecipe.from_array(member)
        chosen.append(recipe)
        chosen_values.append(float(member_value))
        report = {
            "log_acquisition": float(member_value),
            "log_pof_total": float(member_pof_total),
            "per_constraint_pof": {
                c.label(): float(np.exp(member_pof[k]))
                for k, c in enumerate(spec.constraints)
            },
            "initial_best": float(np.max(total0)),
        }
        feasibility.append(report)
        trace.append(
            {
                "member": j,
                "recipe": recipe.to_dict(),
                "objective_term": float(member_value - member_pof_total),
                "per_constraint_log_pof": {
                    c.label(): float(member_pof[k])
                    for k, c in enumerate(spec.constraints)
                },
            }
        )

        if j + 1 < batch_size:
            F_member = feature_map.features_batch(member[None, :])
            for metric, model in list(work.items()):
                mu = predict(model, F_member).raw_mean(model.scaling)
                work[metric] = condition_on(model, F_member, mu)

    return ProposalResult(
        recipes=tuple(chosen),
        acquisition_values=tuple(chosen_values),
        feasibility=tuple(feasibility),
        trace=tuple(trace),
        diagnostics={
            "starts": starts,
            "screened_pool": pool_size,
            "iterations": iteration_counts,
            "seed": seed,
        },
    )


def _ascend_starts(
    score_fn,
    X0: np.ndarray,
    total0: np.ndarray,
    upper_bounds: np.ndarray,
    max_iterations: int,
    h: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Vectorized projected ascent over all starts in lockstep.

    Works in scaled coordinates z = x / upper_bounds; every probe and every
    accepted step is projected back onto the feasible simplex.
    """
    m = X0.shape[0]
    Z = X0 / upper_bounds[None, :]
    values = total0.copy()
    active = np.ones(m, dtype=bool)
    iterations_used = 0

    for iteration in range(max_iterations):
        if not np.any(active):
            break
        iterations_used = iteration + 1
        idx = np.flatnonzero(active)
        Za = Z[idx]

        grad = np.zeros((len(idx), 4))
        for k in range(4):
            Zp = Za.copy()
            Zp[:, k] += h
            Zm = Za.copy()
            Zm[:, k] -= h
            fp = score_fn(Zp * upper_bounds[None, :])[0]
            fm = score_fn(Zm * upper_bounds[None, :])[0]
            grad[:, k] = (fp - fm) / (2.0 * h)

        norms = np.linalg.norm(grad, axis=1)
        flat = norms < 1e-12
        if np.any(flat):
            active[idx[flat]] = False
            keep = ~flat
            idx, Za, grad = idx[keep], Za[keep], grad[keep]
            if len(idx) == 0:
                continue
            norms = norms[keep]
        # Normalized-direction steps: trial points stay within a couple of
        # domain diameters, which keeps the projection cheap, and the
        # backtracking line search does not care about gradient scale.
        grad = grad / norms[:, None]

        step = np.full(len(idx), 0.5)
        moved = np.zeros(len(idx), dtype=bool)
        new_Z = Za.copy()
        new_values = values[idx].copy()
        for _ in range(12):
            pending = np.flatnonzero(~moved)
            if len(pending) == 0:
                break
            trial_raw = _project_batch(
                (Za[pending] + step[pending, None] * grad[pending])
                * upper_bounds[None, :],
                upper_bounds,
            )
            trial_values = score_fn(trial_raw)[0]
            better = trial_values > new_values[pending] + 1e-12
            accepted = pending[better]
            if len(accepted):
                new_Z[accepted] = trial_raw[better] / upper_bounds[None, :]
                new_values[accepted] = trial_values[better]
                moved[accepted] = True
            step[pending[~better]] *= 0.5

        displacement = np.max(np.abs(new_Z - Za), axis=1)
        Z[idx] = new_Z
        values[idx] = new_values
        done = (~moved) | (displacement < 1e-8)
        active[idx[done]] = False

    return Z * upper_bounds[None, :], values, iterations_used
