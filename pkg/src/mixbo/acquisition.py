"""Acquisition functions: stable log expected improvement, a Monte-Carlo
noisy variant for batches, and probability-of-feasibility composition.

Everything is computed in log space. Feasibility enters additively as log
probabilities; a finite floor (NEG_INF) stands in for minus infinity so the
optimizers never do arithmetic on actual infinities.

The noisy-EI estimator samples the joint posterior over the candidate batch
and all observed locations, takes the per-sample incumbent over the observed
set (penalizing observations whose sampled constraint values are infeasible),
and smooths max(improvement, 0) with a softplus floored at
temperature * log(2). The floor bounds the objective term for hopeless
candidates, so the feasibility term still separates them. Base samples are
quasi-random and fixed per proposal round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import log_ndtr, ndtri, erfcx, logsumexp
from scipy.stats import qmc

from .errors import InvalidInput, NonFiniteSample, SingularKernel
from .gp import GpModel, kernel_matrix, predict, _cholesky_with_jitter

NEG_INF = -1e10

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
# log(sqrt(pi/2)), used by the tail branch of log-EI.
_C2 = 0.5 * math.log(math.pi / 2.0)

METRIC_MFR = "mfr"
METRIC_YOUNGS = "youngs_modulus"
METRIC_IMPACT = "impact_strength"
KNOWN_METRICS = (METRIC_MFR, METRIC_YOUNGS, METRIC_IMPACT)


@dataclass(frozen=True)
class ObjectiveSpec:
    """What 'better' means, normalized internally to maximization.

    ``squared_distance`` scores a sample as -(value - target)^2, the
    target-seeking objective for MFR; ``maximize`` scores the value itself.
    """

    mode: str
    metric: str
    target: float | None = None

    def __post_init__(self):
        if self.mode not in ("squared_distance", "maximize"):
            raise InvalidInput(f"unknown objective mode {self.mode!r}")
        if self.metric not in KNOWN_METRICS:
            raise InvalidInput(f"unknown metric {self.metric!r}")
        if self.mode == "squared_distance":
            if self.target is None or not math.isfinite(self.target):
                raise InvalidInput("squared_distance objective needs a finite target")
        elif self.target is not None:
            raise InvalidInput("maximize objective takes no target")

    @classmethod
    def squared_distance_to_target(
        cls, target: float, metric: str = METRIC_MFR
    ) -> "ObjectiveSpec":
        return cls(mode="squared_distance", metric=metric, target=target)

    @classmethod
    def maximize_metric(cls, metric: str = METRIC_IMPACT) -> "ObjectiveSpec":
        return cls(mode="maximize", metric=metric)

    def utility(self, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        if self.mode == "squared_distance":
            diff = v - self.target
            return -(diff * diff)
        return v

    def to_dict(self) -> dict:
        return {"mode": self.mode, "metric": self.metric, "target": self.target}

    @classmethod
    def from_dict(cls, data: dict) -> "ObjectiveSpec":
        return cls(
            mode=data["mode"], metric=data["metric"], target=data.get("target")
        )


@dataclass(frozen=True)
class ConstraintSpec:
    """An output constraint with an optional relaxation level.

    at_least: metric >= threshold * (1 - 0.1 * level). within_corridor:
    |metric - center| <= half_width * (1 + 0.1 * level); relaxing a corridor
    widens it, so feasibility probability is non-decreasing in the level for
    both kinds.
    """

    metric: str
    kind: str
    threshold: float | None = None
    center: float | None = None
    half_width: float | None = None
    relaxation_level: int = 0

    def __post_init__(self):
        if self.metric not in KNOWN_METRICS:
            raise InvalidInput(f"unknown metric {self.metric!r}")
        if self.kind == "at_least":
            if self.threshold is None or not math.isfinite(self.threshold):
                raise InvalidInput("at_least constraint needs a finite threshold")
        elif self.kind == "within_corridor":
            if self.center is None or not math.isfinite(self.center):
                raise InvalidInput("corridor constraint needs a finite center")
            if self.half_width is None or not self.half_width > 0:
                raise InvalidInput("corridor half_width must be positive")
        else:
            raise InvalidInput(f"unknown constraint kind {self.kind!r}")
        if self.relaxation_level < 0 or int(self.relaxation_level) != self.relaxation_level:
            raise InvalidInput("relaxation_level must be a non-negative integer")

    @classmethod
    def at_least(
        cls, metric: str, threshold: float, relaxation_level: int = 0
    ) -> "ConstraintSpec":
        return cls(
            metric=metric,
            kind="at_least",
            threshold=threshold,
            relaxation_level=relaxation_level,
        )

    @classmethod
    def within_corridor(
        cls,
        metric: str,
        center: float,
        half_width: float,
        relaxation_level: int = 0,
    ) -> "ConstraintSpec":
        return cls(
            metric=metric,
            kind="within_corridor",
            center=center,
            half_width=half_width,
            relaxation_level=relaxation_level,
        )

    def effective_threshold(self) -> float:
        if self.kind != "at_least":
            raise InvalidInput("effective_threshold applies to at_least constraints")
        return self.threshold * (1.0 - 0.1 * self.relaxation_level)

    def effective_bounds(self) -> tuple[float, float]:
        if self.kind != "within_corridor":
            raise InvalidInput("effective_bounds applies to corridor constraints")
        hw = self.half_width * (1.0 + 0.1 * self.relaxation_level)
        return self.center - hw, self.center + hw

    def satisfied_by(self, value: float) -> bool:
        """Check a measured value against the *unrelaxed* constraint."""
        if self.kind == "at_least":
            return value >= self.threshold
        return abs(value - self.center) <= self.half_width

    def relaxed(self, level: int) -> "ConstraintSpec":
        return ConstraintSpec(
            metric=self.metric,
            kind=self.kind,
            threshold=self.threshold,
            center=self.center,
            half_width=self.half_width,
            relaxation_level=level,
        )

    def label(self) -> str:
        if self.kind == "at_least":
            return f"{self.metric}_at_least_{self.threshold:g}"
        return f"{self.metric}_within_{self.center:g}pm{self.half_width:g}"

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "kind": self.kind,
            "threshold": self.threshold,
            "center": self.center,
            "half_width": self.half_width,
            "relaxation_level": self.relaxation_level,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConstraintSpec":
        return cls(
            metric=data["metric"],
            kind=data["kind"],
            threshold=data.get("threshold"),
            center=data.get("center"),
            half_width=data.get("half_width"),
            relaxation_level=int(data.get("relaxation_level", 0)),
        )


@dataclass(frozen=True)
class AcquisitionSpec:
    objective: ObjectiveSpec
    constraints: tuple[ConstraintSpec, ...] = ()
    mc_samples: int = 128
    base_sample_seed: int = 0
    smoothing_temperature: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if self.mc_samples < 16:
            raise InvalidInput("mc_samples must be at least 16")
        if not self.smoothing_temperature > 0:
            raise InvalidInput("smoothing_temperature must be positive")


def _log_h(z: float) -> float:
    """log(phi(z) + z*Phi(z)), the EI kernel, stable over the whole line."""
    if z > -1.0:
        return math.log(
            math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
            + z * 0.5 * math.erfc(-z / math.sqrt(2))
        )
    # Tail branch: h(z) = phi(z) * (1 - sqrt(pi/2)*|z|*erfcx(|z|/sqrt(2))).
    a = abs(z)
    g = math.exp(_C2) * a * erfcx(a / math.sqrt(2.0))
    one_minus_g = 1.0 - g
    if one_minus_g <= 0.0:
        # Beyond ~1e8 the cancellation swallows everything; use the
        # asymptotic h(z) ~ phi(z)/z^2.
        return -0.5 * z * z - _LOG_SQRT_2PI - 2.0 * math.log(a)
    return -0.5 * z * z - _LOG_SQRT_2PI + math.log1p(-g)


def log_ei_analytic(mean: float, std: float, incumbent: float) -> float:
    """log E[max(f - incumbent, 0)] for f ~ Normal(mean, std^2).

    Total on std >= 0; returns the NEG_INF floor for a deterministic
    non-improvement.
    """
    if std < 0:
        raise InvalidInput("std must be non-negative")
    if std == 0.0:
        if mean > incumbent:
            return math.log(mean - incumbent)
        return NEG_INF
    z = (mean - incumbent) / std
    value = math.log(std) + _log_h(z)
    return max(value, NEG_INF)


def _base_normals(seed: int, samples: int, dim: int) -> np.ndarray:
    """Quasi-random standard normal matrix, deterministic per seed."""
    sobol = qmc.Sobol(d=dim, scramble=True, seed=seed)
    u = sobol.random(samples)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return ndtri(u)


def _log_softplus(x: np.ndarray, temperature: float) -> np.ndarray:
    """log(temperature * log1p(exp(x / temperature))), floored at x = 0.

    Below zero the result is pinned to log(temperature * log(2)) instead of
    decaying linearly in x / temperature. Without the pin, a shortfall of a
    few units at the default temperature turns into a log value of minus
    tens of thousands, which drowns the log-feasibility term it gets added
    to and leaves the optimizer chasing infeasible points with flashy
    objective samples.
    """
    x = np.asarray(x, dtype=float)
    t = x / temperature
    out = np.full(t.shape, math.log(temperature) + math.log(math.log(2.0)))
    hi = t > 35.0
    mid = (t >= 0.0) & ~hi
    out[hi] = np.log(x[hi])
    out[mid] = math.log(temperature) + np.log(np.log1p(np.exp(t[mid])))
    return out


def _root_of_covariance(cov: np.ndarray) -> tuple[np.ndarray, bool]:
    """A matrix R with R @ R.T = cov, plus whether R is lower-triangular.

    Cholesky with the jitter ladder first; symmetric eigen root (not
    triangular) as a last resort for genuinely singular covariances.
    """
    try:
        R, _ = _cholesky_with_jitter(cov)
        return R, True
    except SingularKernel:
        w, U = np.linalg.eigh(0.5 * (cov + cov.T))
        w = np.clip(w, 0.0, None)
        return U * np.sqrt(w), False


def _solve_root(root: np.ndarray, triangular: bool, rhs: np.ndarray) -> np.ndarray:
    """Solve root @ out = rhs, respecting how the root was produced."""
    if triangular:
        return solve_triangular(root, rhs, lower=True)
    out, *_ = np.linalg.lstsq(root, rhs, rcond=None)
    return out


def _sampled_feasibility(
    models: Mapping[str, GpModel],
    obs: np.ndarray,
    spec: AcquisitionSpec,
    precomputed: Mapping[str, np.ndarray],
) -> np.ndarray:
    """Per-sample feasibility indicators for the observed locations.

    Draws a joint posterior sample of each constraint metric at the observed
    points (reusing the objective's samples when a constraint shares its
    metric, so indicators stay consistent within a sample) and checks it
    against the effective, possibly relaxed, bounds.
    """
    n = obs.shape[0]
    feasible = np.ones((spec.mc_samples, n), dtype=bool)
    sampled = dict(precomputed)
    for k, constraint in enumerate(spec.constraints):
        metric = constraint.metric
        if metric not in sampled:
            if metric not in models:
                raise InvalidInput(
                    f"no model supplied for constraint metric {metric!r}"
                )
            model = models[metric]
            post = predict(model, obs, joint=True)
            mu = post.raw_mean(model.scaling)
            cov = post.covariance * model.scaling.output_std**2
            root, _ = _root_of_covariance(cov)
            seed = int(
                np.random.SeedSequence(
                    (spec.base_sample_seed, k + 1)
                ).generate_state(1)[0]
            )
            Z = _base_normals(seed, spec.mc_samples, n)
            g = mu + Z @ root.T
            if not np.all(np.isfinite(g)):
                raise NonFiniteSample("constraint posterior sample not finite")
            sampled[metric] = g
        values = sampled[metric]
        if constraint.kind == "at_least":
            feasible &= values >= constraint.effective_threshold()
        else:
            low, high = constraint.effective_bounds()
            feasible &= (values >= low) & (values <= high)
    return feasible


def _weighted_incumbents(
    u_obs: np.ndarray, feasible: np.ndarray
) -> tuple[np.ndarray, float]:
    """Per-sample best observed utility, counting only feasible-sampled rows.

    Rows sampled infeasible enter at a penalty utility well below anything
    observable, so a sample with no feasible incumbent treats every candidate
    improvement as relative to that floor: the objective then barely
    discriminates and the feasibility factor drives the search, which is the
    behavior wanted on all-infeasible data.
    """
    penalty = 1e3 + 10.0 * max(1.0, float(np.abs(u_obs).max()))
    effective = np.where(feasible, u_obs, -penalty)
    return effective.max(axis=1), penalty


class NoisyEiEvaluator:
    """Vectorized q = 1 noisy-EI scorer with frozen base samples.

    Samples the joint posterior over the observed locations once, then for
    each candidate draws the conditional posterior using a dedicated base
    normal column. Used directly by the acquisition optimizer so that every
    candidate in a proposal round sees the same randomness. Incumbent
    utilities are feasibility-weighted per sample using the constraint
    models, never hard-filtered.
    """

    def __init__(
        self,
        models: Mapping[str, GpModel] | GpModel,
        observed_inputs: np.ndarray,
        spec: AcquisitionSpec,
    ):
        if isinstance(models, GpModel):
            models = {spec.objective.metric: models}
        if spec.objective.metric not in models:
            raise InvalidInput(
                f"no model supplied for metric {spec.objective.metric!r}"
            )
        model = models[spec.objective.metric]
        self.model = model
        self.spec = spec
        obs = np.atleast_2d(np.asarray(observed_inputs, dtype=float))
        if obs.shape[0] < 1:
            raise InvalidInput("need at least one observed input")
        self.observed = obs
        n = obs.shape[0]
        sigma = model.scaling.output_std

        post = predict(model, obs, joint=True)
        self.obs_mean_raw = post.raw_mean(model.scaling)
        cov_raw = post.covariance * sigma**2
        self._obs_root, self._root_triangular = _root_of_covariance(cov_raw)

        Z = _base_normals(spec.base_sample_seed, spec.mc_samples, n + 1)
        self._z_obs = Z[:, :n]
        self._z_cand = Z[:, n]

        f_obs = self.obs_mean_raw + self._z_obs @ self._obs_root.T
        if not np.all(np.isfinite(f_obs)):
            raise NonFiniteSample("observed-set posterior sample not finite")
        u_obs = spec.objective.utility(f_obs)
        feasible = _sampled_feasibility(
            models, obs, spec, {spec.objective.metric: f_obs}
        )
        self.incumbents, self.infeasible_penalty = _weighted_incumbents(
            u_obs, feasible
        )

        # cov_obs^-1 (f_obs - mean)^T = root^-T Z^T, solved once and reused
        # by every conditional mean below.
        if self._root_triangular:
            self._B = solve_triangular(
                self._obs_root.T, self._z_obs.T, lower=False
            )
        else:
            self._B, *_ = np.linalg.lstsq(
                self._obs_root.T, self._z_obs.T, rcond=None
            )

        # Pieces for posterior cross-covariance between candidates and the
        # observed set: cov(x, obs) = k(x, obs) - Vx^T Vo in scaled space.
        self._obs_s = model.scaling.scale(obs)
        self._Vo = solve_triangular(
            model.cholesky_factor,
            kernel_matrix(model.train_inputs, self._obs_s, model.hyperparams),
            lower=True,
        )
        self._sigma_out = sigma

    def scores(self, candidates: np.ndarray) -> np.ndarray:
        """Smoothed log noisy EI for each candidate row (raw feature units)."""
        model, spec = self.model, self.spec
        X = np.atleast_2d(np.asarray(candidates, dtype=float))
        Xs = model.scaling.scale(X)

        Kc = kernel_matrix(Xs, model.train_inputs, model.hyperparams)
        Vc = solve_triangular(model.cholesky_factor, Kc.T, lower=True)
        mean_c = model.scaling.destandardize(Kc @ model.alpha)
        var_c = model.hyperparams.signal_variance - np.sum(Vc * Vc, axis=0)
        var_c = np.maximum(var_c, 0.0) * self._sigma_out**2

        cross = (
            kernel_matrix(Xs, self._obs_s, model.hyperparams) - Vc.T @ self._Vo
        ) * self._sigma_out**2

        cond_mean = mean_c[:, None] + cross @ self._B
        W = _solve_root(self._obs_root, self._root_triangular, cross.T)
        quad = np.sum(W * W, axis=0)
        cond_var = np.maximum(var_c - quad, 0.0)

        f_cand = cond_mean + np.sqrt(cond_var)[:, None] * self._z_cand[None, :]
        if not np.all(np.isfinite(f_cand)):
            raise NonFiniteSample("candidate posterior sample not finite")
        u_cand = spec.objective.utility(f_cand)
        improvement = u_cand - self.incumbents[None, :]
        log_terms = _log_softplus(improvement, spec.smoothing_temperature)
        values = logsumexp(log_terms, axis=1) - math.log(spec.mc_samples)
        return np.maximum(values, NEG_INF)


def log_nei_mc(
    models: Mapping[str, GpModel],
    candidate_batch: np.ndarray,
    observed_inputs: np.ndarray,
    spec: AcquisitionSpec,
) -> float:
    """Monte-Carlo log noisy EI of a batch against the observed incumbents."""
    model = models[spec.objective.metric]
    batch = np.atleast_2d(np.asarray(candidate_batch, dtype=float))
    q = batch.shape[0]
    if q < 1:
        raise InvalidInput("candidate batch must contain at least one point")
    if q == 1:
        evaluator = NoisyEiEvaluator(models, observed_inputs, spec)
        return float(evaluator.scores(batch)[0])

    obs = np.atleast_2d(np.asarray(observed_inputs, dtype=float))
    stacked = np.vstack([batch, obs])
    post = predict(model, stacked, joint=True)
    sigma = model.scaling.output_std
    mean_raw = post.raw_mean(model.scaling)
    cov_raw = post.covariance * sigma**2
    root, _ = _root_of_covariance(cov_raw)

    Z = _base_normals(spec.base_sample_seed, spec.mc_samples, stacked.shape[0])
    f = mean_raw + Z @ root.T
    if not np.all(np.isfinite(f)):
        raise NonFiniteSample("joint posterior sample not finite")
    u = spec.objective.utility(f)
    feasible = _sampled_feasibility(
        models, obs, spec, {spec.objective.metric: f[:, q:]}
    )
    incumbents, _ = _weighted_incumbents(u[:, q:], feasible)
    improvement = np.max(u[:, :q], axis=1) - incumbents
    log_terms = _log_softplus(improvement, spec.smoothing_temperature)
    value = float(logsumexp(log_terms) - math.log(spec.mc_samples))
    return max(value, NEG_INF)


def _log_pof_matrix(
    models: Mapping[str, GpModel],
    points: np.ndarray,
    constraints: tuple[ConstraintSpec, ...],
) -> np.ndarray:
    """Per-point, per-constraint log feasibility probabilities (m x k)."""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    m = X.shape[0]
    out = np.zeros((m, len(constraints)))
    for j, constraint in enumerate(constraints):
        model = models[constraint.metric]
        post = predict(model, X)
        mu = post.raw_mean(model.scaling)
        std = post.raw_std(model.scaling)
        if constraint.kind == "at_least":
            tau = constraint.effective_threshold()
            with np.errstate(divide="ignore", invalid="ignore"):
                vals = log_ndtr((mu - tau) / std)
            exact = std == 0.0
            vals = np.where(exact, np.where(mu >= tau, 0.0, NEG_INF), vals)
        else:
            lo, hi = constraint.effective_bounds()
            vals = _log_prob_interval(mu, std, lo, hi)
        out[:, j] = np.maximum(vals, NEG_INF)
    return out


def _log_prob_interval(
    mu: np.ndarray, std: np.ndarray, lo: float, hi: float
) -> np.ndarray:
    """log P(lo <= X <= hi) for X ~ Normal(mu, std^2), elementwise stable.

    Mirrors into whichever tail holds less mass so the difference of CDFs
    never cancels catastrophically.
    """
    mu = np.asarray(mu, dtype=float)
    std = np.asarray(std, dtype=float)
    out = np.empty_like(mu)

    exact = std == 0.0
    out[exact] = np.where(
        (mu[exact] >= lo) & (mu[exact] <= hi), 0.0, NEG_INF
    )

    ok = ~exact
    if np.any(ok):
        za = (lo - mu[ok]) / std[ok]
        zb = (hi - mu[ok]) / std[ok]
        # Mirror when the interval sits in the upper tail.
        flip = za + zb > 0
        za_f = np.where(flip, -zb, za)
        zb_f = np.where(flip, -za, zb)
        log_hi = log_ndtr(zb_f)
        log_lo = log_ndtr(za_f)
        with np.errstate(divide="ignore", invalid="ignore"):
            diff = np.log1p(-np.exp(log_lo - log_hi))
        vals = log_hi + diff
        vals = np.where(np.isfinite(vals), vals, NEG_INF)
        out[ok] = vals
    return np.maximum(out, NEG_INF)


def log_prob_feasible(
    models: Mapping[str, GpModel],
    point: np.ndarray,
    constraints,
) -> float:
    """Joint log probability of satisfying every constraint at one point.

    Constraints are treated as independent (separate GPs per metric), so the
    joint log probability is the sum of per-constraint terms.
    """
    constraints = tuple(constraints)
    if not constraints:
        return 0.0
    matrix = _log_pof_matrix(models, point, constraints)
    total = float(np.sum(matrix[0]))
    if np.any(matrix[0] <= NEG_INF):
        return NEG_INF
    return max(total, NEG_INF)


def constrained_acquisition(
    models: Mapping[str, GpModel],
    batch: np.ndarray,
    observed_inputs: np.ndarray,
    spec: AcquisitionSpec,
) -> float:
    """log noisy EI plus the batch-mean log probability of feasibility."""
    nei = log_nei_mc(models, batch, observed_inputs, spec)
    if nei <= NEG_INF:
        return NEG_INF
    if not spec.constraints:
        return nei
    X = np.atleast_2d(np.asarray(batch, dtype=float))
    matrix = _log_pof_matrix(models, X, spec.constraints)
    per_point = np.sum(matrix, axis=1)
    if np.any(matrix <= NEG_INF):
        return NEG_INF
    return max(nei + float(np.mean(per_point)), NEG_INF)
