"""Failure-mode detection: boundary oversampling, feasibility scarcity, audits.

Everything here is a pure function over plain data (recipes, metric rows,
summary dicts), so the functions are usable from the campaign layer, the CLI
and tests without dragging state machinery along.
"""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np

from .domain import DomainSpec, MixtureRecipe
from .errors import InvalidInput

SCHEMA_VERSION = "diagnostics_v1"

# A scaled coordinate closer than this to either box bound counts as "on the
# boundary" for the oversampling diagnostic.
BOUNDARY_TOL = 1e-3

WARNING_INFEASIBLE_LIKELY = "InfeasibleLikely"


def _recipe_matrix(proposals) -> np.ndarray:
    rows = []
    for item in proposals:
        if isinstance(item, MixtureRecipe):
            rows.append(item.as_array())
        else:
            rows.append(np.asarray(item, dtype=float).ravel())
    if not rows:
        raise InvalidInput("boundary_fraction needs at least one proposal")
    return np.stack(rows)


def boundary_fraction(proposals, domain: DomainSpec) -> float:
    """Fraction of proposals with any scaled coordinate within 1e-3 of a bound.

    Coordinates are scaled to [0, 1] by the domain's box bounds before the
    test, so the metric does not depend on the units of the caps.
    """
    X = _recipe_matrix(proposals)
    if X.shape[1] != domain.upper_bounds.shape[0]:
        raise InvalidInput("proposals and domain disagree on dimension")
    scaled = X / domain.upper_bounds[None, :]
    near = (scaled <= BOUNDARY_TOL) | (scaled >= 1.0 - BOUNDARY_TOL)
    return float(np.mean(np.any(near, axis=1)))


def _metric_value(row, metric: str) -> float:
    if isinstance(row, Mapping):
        return float(row[metric])
    return float(getattr(row, metric))


def audit_training_data(dataset, constraints) -> dict:
    """Count feasible rows per constraint and jointly, with a scarcity warning.

    ``dataset`` is any iterable of metric rows (mappings or objects exposing
    the metric names); ``constraints`` is a sequence of output constraints, or
    any object with an ``output_constraints()`` method. Feasibility is judged
    against the unrelaxed thresholds. A joint count of zero earns the
    ``InfeasibleLikely`` warning: a constrained acquisition built on such data
    has no observed feasible point to anchor to.
    """
    if hasattr(constraints, "output_constraints"):
        constraints = constraints.output_constraints()
    constraints = tuple(constraints)
    rows = list(dataset)
    if not rows:
        raise InvalidInput("audit needs a non-empty dataset")

    per_constraint: dict[str, int] = {}
    joint = 0
    satisfied = np.ones((len(rows), max(len(constraints), 1)), dtype=bool)
    for k, constraint in enumerate(constraints):
        flags = np.array(
            [
                constraint.satisfied_by(_metric_value(row, constraint.metric))
                for row in rows
            ]
        )
        satisfied[:, k] = flags
        per_constraint[constraint.label()] = int(flags.sum())
    joint = int(np.all(satisfied, axis=1).sum())

    warnings = []
    if constraints and joint == 0:
        warnings.append(WARNING_INFEASIBLE_LIKELY)
    return {
        "rows": len(rows),
        "feasible_training_count": per_constraint,
        "joint_feasible_count": joint,
        "warnings": warnings,
    }


def assemble_report(
    *,
    audit: dict | None = None,
    boundary: float | None = None,
    dimension: int | None = None,
    validation_rmse: Mapping[str, float] | None = None,
    extra_warnings: Iterable[str] = (),
) -> dict:
    """Combine audit fragments into one versioned diagnostics document."""
    warnings = list(extra_warnings)
    report: dict = {"schema": SCHEMA_VERSION}
    if boundary is not None:
        if not 0.0 <= boundary <= 1.0:
            raise InvalidInput("boundary fraction must lie in [0, 1]")
        report["boundary_fraction"] = float(boundary)
    if audit is not None:
        report["feasible_training_count"] = dict(
            audit.get("feasible_training_count", {})
        )
        report["joint_feasible_count"] = audit.get("joint_feasible_count")
        report["training_rows"] = audit.get("rows")
        warnings.extend(audit.get("warnings", []))
    if dimension is not None:
        report["dimension"] = int(dimension)
    if validation_rmse is not None:
        report["validation_rmse"] = {
            name: float(value) for name, value in validation_rmse.items()
        }
    report["warnings"] = warnings
    return report


_COMPARE_COLUMNS = (
    ("run", "{}"),
    ("strategy", "{}"),
    ("completed", "{}"),
    ("feasible", "{}"),
    ("best |MFR-target|", "{}"),
    ("boundary fraction", "{}"),
)


def _format_optional(value, digits=4) -> str:
    if value is None:
        return "-"
    return f"{value:.{digits}g}"


def compare_runs(summaries: Sequence[dict]) -> dict:
    """Tabulate campaign summaries side by side, stable by run label.

    Returns the rows as JSON-ready dicts plus an aligned text rendering.
    """
    summaries = list(summaries)
    if len(summaries) < 2:
        raise InvalidInput("comparison needs at least two campaign summaries")

    rows = []
    for summary in summaries:
        label = summary.get("campaign_id") or summary.get("strategy") or "?"
        rows.append(
            {
                "run": str(label),
                "strategy": summary.get("strategy"),
                "completed": int(summary.get("experiments_completed", 0)),
                "feasible": int(summary.get("feasible_count", 0)),
                "best_mfr_distance": summary.get("best_mfr_distance"),
                "boundary_fraction": summary.get("boundary_fraction"),
            }
        )
    rows.sort(key=lambda row: row["run"])

    header = [name for name, _ in _COMPARE_COLUMNS]
    cells = [
        [
            row["run"],
            str(row["strategy"]),
            str(row["completed"]),
            str(row["feasible"]),
            _format_optional(row["best_mfr_distance"]),
            _format_optional(row["boundary_fraction"]),
        ]
        for row in rows
    ]
    widths = [
        max(len(header[j]), *(len(line[j]) for line in cells))
        for j in range(len(header))
    ]
    def render(parts):
        return "  ".join(part.ljust(widths[j]) for j, part in enumerate(parts))

    text_lines = [render(header), render(["-" * w for w in widths])]
    text_lines.extend(render(line) for line in cells)
    return {"schema": SCHEMA_VERSION, "rows": rows, "text": "\n".join(text_lines)}
