"""Gaussian process regression on a scaled box, with MAP hyperparameter fits.

The model is deliberately small: zero mean, ARD squared-exponential kernel,
homoscedastic Gaussian noise. Inputs are mapped to the unit box through a
:class:`ScalingSpec`; targets are standardized with statistics stored on the
same spec so a fitted model can be conditioned on new data without the
scaling drifting underneath it.

Hyperparameters are fitted by multi-start quasi-Newton ascent on the
penalized marginal log likelihood (log-normal lengthscale prior whose median
grows with the square root of the input dimension). All optimization happens
in log space, which keeps every parameter positive without explicit
constraints except for a lower bound on the noise level.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import (
    ConflictingData,
    DegenerateDataWarning,
    DimensionMismatch,
    InvalidInput,
    SingularKernel,
)

JITTER_LADDER = (0.0, 1e-8, 1e-6, 1e-4)
# Lower bound on the noise level: std 1e-6 in standardized output space.
NOISE_VARIANCE_FLOOR = 1e-12
_LOG_2PI = math.log(2.0 * math.pi)

# Log-space search box for the fitter. Targets are standardized, so signal
# variances far above 1 are never statistically meaningful; the cap also
# blocks the degenerate flat-ridge solutions on noiseless collinear data.
_LOG_LENGTHSCALE_RANGE = (-11.5, 23.0)
_LOG_SIGNAL_RANGE = (-23.0, 6.0)
_LOG_NOISE_CEILING = 23.0


@dataclass(frozen=True)
class ScalingSpec:
    """Affine input scaling to the unit box plus output standardization.

    ``output_mean``/``output_std`` may be left as None; :func:`fit` then
    computes them from the training targets and returns a spec with concrete
    values. A zero target spread raises :class:`DegenerateDataWarning` and
    falls back to unit scale.
    """

    input_lower: np.ndarray
    input_upper: np.ndarray
    output_mean: float | None = None
    output_std: float | None = None

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.input_lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.input_upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise DimensionMismatch("input bounds must be 1-d arrays of equal length")
        if not (np.isfinite(lower).all() and np.isfinite(upper).all()):
            raise InvalidInput("input bounds must be finite")
        if np.any(upper <= lower):
            raise InvalidInput("each input upper bound must exceed the lower bound")
        object.__setattr__(self, "input_lower", lower)
        object.__setattr__(self, "input_upper", upper)
        if self.output_std is not None and not self.output_std > 0:
            raise InvalidInput("output_std must be positive")

    @property
    def dim(self) -> int:
        return self.input_lower.shape[0]

    def scale(self, inputs: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(inputs, dtype=float))
        if X.shape[1] != self.dim:
            raise DimensionMismatch(
                f"expected {self.dim} input columns, got {X.shape[1]}"
            )
        return (X - self.input_lower) / (self.input_upper - self.input_lower)

    def unscale(self, scaled: np.ndarray) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(scaled, dtype=float))
        return self.input_lower + Z * (self.input_upper - self.input_lower)

    def with_output_stats(self, targets: np.ndarray) -> "ScalingSpec":
        """Return a spec whose output statistics come from ``targets``."""
        y = np.asarray(targets, dtype=float).ravel()
        mean = float(np.mean(y))
        std = float(np.std(y))
        if std == 0.0:
            warnings.warn(
                "targets have zero spread; using unit output scale",
                DegenerateDataWarning,
                stacklevel=2,
            )
            std = 1.0
        return replace(self, output_mean=mean, output_std=std)

    def standardize(self, targets: np.ndarray) -> np.ndarray:
        if self.output_mean is None or self.output_std is None:
            raise InvalidInput("output statistics not set on this ScalingSpec")
        y = np.asarray(targets, dtype=float).ravel()
        return (y - self.output_mean) / self.output_std

    def destandardize(self, values: np.ndarray) -> np.ndarray:
        if self.output_mean is None or self.output_std is None:
            raise InvalidInput("output statistics not set on this ScalingSpec")
        return np.asarray(values, dtype=float) * self.output_std + self.output_mean

    def to_dict(self) -> dict:
        return {
            "input_lower": self.input_lower.tolist(),
            "input_upper": self.input_upper.tolist(),
            "output_mean": self.output_mean,
            "output_std": self.output_std,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScalingSpec":
        return cls(
            input_lower=np.asarray(data["input_lower"], dtype=float),
            input_upper=np.asarray(data["input_upper"], dtype=float),
            output_mean=data.get("output_mean"),
            output_std=data.get("output_std"),
        )


@dataclass(frozen=True)
class KernelHyperparams:
    """ARD squared-exponential kernel parameters in the scaled space."""

    lengthscales: np.ndarray
    signal_variance: float
    noise_variance: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if ls.ndim != 1:
            raise DimensionMismatch("lengthscales must be a 1-d array")
        if not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise InvalidInput("lengthscales must be finite and positive")
        if not (math.isfinite(self.signal_variance) and self.signal_variance > 0):
            raise InvalidInput("signal_variance must be finite and positive")
        if not (math.isfinite(self.noise_variance) and self.noise_variance >= 0):
            raise InvalidInput("noise_variance must be finite and non-negative")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "noise_variance", float(self.noise_variance))

    @property
    def dim(self) -> int:
        return self.lengthscales.shape[0]

    def to_log_vector(self) -> np.ndarray:
        """Pack as (log lengthscales..., log signal var, log noise var)."""
        return np.concatenate(
            [
                np.log(self.lengthscales),
                [math.log(self.signal_variance)],
                [math.log(max(self.noise_variance, 1e-300))],
            ]
        )

    @classmethod
    def from_log_vector(cls, theta: np.ndarray) -> "KernelHyperparams":
        theta = np.asarray(theta, dtype=float)
        return cls(
            lengthscales=np.exp(theta[:-2]),
            signal_variance=math.exp(theta[-2]),
            noise_variance=math.exp(theta[-1]),
        )

    def to_dict(self) -> dict:
        return {
            "lengthscales": self.lengthscales.tolist(),
            "signal_variance": self.signal_variance,
            "noise_variance": self.noise_variance,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KernelHyperparams":
        return cls(
            lengthscales=np.asarray(data["lengthscales"], dtype=float),
            signal_variance=float(data["signal_variance"]),
            noise_variance=float(data["noise_variance"]),
        )


@dataclass(frozen=True)
class LengthscalePrior:
    """Independent log-normal prior over each lengthscale.

    The default location follows the dimension-scaled heuristic: the prior
    median of every lengthscale is sqrt(2) + 0.5*log(d) in log space, wide
    enough (scale sqrt(3)) to let the data override it when informative.
    """

    loc: float
    scale: float

    @classmethod
    def dimension_scaled(cls, dim: int) -> "LengthscalePrior":
        if dim < 1:
            raise InvalidInput("dimension must be at least 1")
        return cls(loc=math.sqrt(2.0) + 0.5 * math.log(dim), scale=math.sqrt(3.0))

    def log_density(self, log_lengthscales: np.ndarray) -> float:
        t = np.asarray(log_lengthscales, dtype=float)
        z = (t - self.loc) / self.scale
        # Log-normal density evaluated at exp(t): includes the -t Jacobian.
        return float(
            np.sum(-t - math.log(self.scale) - 0.5 * _LOG_2PI - 0.5 * z * z)
        )

    def log_density_grad(self, log_lengthscales: np.ndarray) -> np.ndarray:
        t = np.asarray(log_lengthscales, dtype=float)
        return -1.0 - (t - self.loc) / (self.scale**2)

    def to_dict(self) -> dict:
        return {"loc": self.loc, "scale": self.scale}

    @classmethod
    def from_dict(cls, data: dict) -> "LengthscalePrior":
        return cls(loc=float(data["loc"]), scale=float(data["scale"]))


def kernel_matrix(
    X1: np.ndarray, X2: np.ndarray, hyperparams: KernelHyperparams
) -> np.ndarray:
    """Squared-exponential cross-covariance, without any noise term."""
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if X1.shape[1] != hyperparams.dim or X2.shape[1] != hyperparams.dim:
        raise DimensionMismatch(
            f"kernel expects {hyperparams.dim}-d inputs, "
            f"got {X1.shape[1]} and {X2.shape[1]}"
        )
    diff = (X1[:, None, :] - X2[None, :, :]) / hyperparams.lengthscales
    return hyperparams.signal_variance * np.exp(-0.5 * np.sum(diff * diff, axis=-1))


def _cholesky_with_jitter(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of A, escalating diagonal jitter on failure."""
    n = A.shape[0]
    eye = np.eye(n)
    for jitter in JITTER_LADDER:
        try:
            L = np.linalg.cholesky(A + jitter * eye)
            return L, jitter
        except np.linalg.LinAlgError:
            continue
    raise SingularKernel(
        "kernel matrix not positive definite after jitter escalation",
        detail={"max_jitter": JITTER_LADDER[-1], "size": n},
    )


def _factorize(
    X: np.ndarray, y: np.ndarray, hyperparams: KernelHyperparams
) -> tuple[np.ndarray, np.ndarray, float]:
    K = kernel_matrix(X, X, hyperparams)
    K[np.diag_indices_from(K)] += hyperparams.noise_variance
    L, jitter = _cholesky_with_jitter(K)
    alpha = cho_solve((L, True), y)
    return L, alpha, jitter


@dataclass(frozen=True)
class PosteriorGaussian:
    """Posterior over query points, in standardized output space.

    ``covariance`` is populated only for joint predictions. ``clamped``
    counts variances that were raised from slightly negative values to zero.
    """

    mean: np.ndarray
    variance: np.ndarray
    covariance: np.ndarray | None = None
    clamped: int = 0

    def raw_mean(self, scaling: ScalingSpec) -> np.ndarray:
        return scaling.destandardize(self.mean)

    def raw_variance(self, scaling: ScalingSpec) -> np.ndarray:
        return self.variance * scaling.output_std**2

    def raw_std(self, scaling: ScalingSpec) -> np.ndarray:
        return np.sqrt(self.raw_variance(scaling))


@dataclass(frozen=True)
class GpModel:
    """A fitted model: hyperparams, scaling, and factorized training data.

    ``train_inputs`` are stored scaled, ``train_targets`` standardized.
    The Cholesky factor and alpha vector are derived state kept for reuse.
    """

    hyperparams: KernelHyperparams
    scaling: ScalingSpec
    train_inputs: np.ndarray
    train_targets: np.ndarray
    cholesky_factor: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.train_inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.train_inputs.shape[1]

    @classmethod
    def from_data(
        cls,
        inputs: np.ndarray,
        targets: np.ndarray,
        scaling: ScalingSpec,
        hyperparams: KernelHyperparams,
    ) -> "GpModel":
        """Build a model with given hyperparameters, no fitting involved."""
        X = np.atleast_2d(np.asarray(inputs, dtype=float))
        y = np.asarray(targets, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise DimensionMismatch("inputs and targets disagree on row count")
        if scaling.output_mean is None:
            scaling = scaling.with_output_stats(y)
        Xs = scaling.scale(X)
        ys = scaling.standardize(y)
        if hyperparams.dim != Xs.shape[1]:
            raise DimensionMismatch(
                f"hyperparams are {hyperparams.dim}-d, inputs are {Xs.shape[1]}-d"
            )
        L, alpha, jitter = _factorize(Xs, ys, hyperparams)
        return cls(
            hyperparams=hyperparams,
            scaling=scaling,
            train_inputs=Xs,
            train_targets=ys,
            cholesky_factor=L,
            alpha=alpha,
            jitter=jitter,
        )


def marginal_log_likelihood(
    model: GpModel, hyperparams: KernelHyperparams | None = None
) -> float:
    """MLL of the model's training data under the given hyperparameters."""
    hp = hyperparams if hyperparams is not None else model.hyperparams
    if hp is model.hyperparams:
        L, alpha = model.cholesky_factor, model.alpha
    else:
        L, alpha, _ = _factorize(model.train_inputs, model.train_targets, hp)
    return _mll_from_factors(model.train_targets, L, alpha)


def _mll_from_factors(y: np.ndarray, L: np.ndarray, alpha: np.ndarray) -> float:
    n = y.shape[0]
    return float(
        -0.5 * float(y @ alpha)
        - float(np.sum(np.log(np.diag(L))))
        - 0.5 * n * _LOG_2PI
    )


def mll_gradient(
    model: GpModel, hyperparams: KernelHyperparams | None = None
) -> np.ndarray:
    """Gradient of the MLL w.r.t. log lengthscales, log signal variance and
    log noise variance, in that order (length d + 2)."""
    hp = hyperparams if hyperparams is not None else model.hyperparams
    X, y = model.train_inputs, model.train_targets
    Kf = kernel_matrix(X, X, hp)
    K = Kf.copy()
    K[np.diag_indices_from(K)] += hp.noise_variance
    L, _ = _cholesky_with_jitter(K)
    alpha = cho_solve((L, True), y)
    Kinv = cho_solve((L, True), np.eye(X.shape[0]))
    A = np.outer(alpha, alpha) - Kinv

    grad = np.empty(hp.dim + 2)
    for d in range(hp.dim):
        diff = (X[:, d, None] - X[None, :, d]) / hp.lengthscales[d]
        dK = Kf * (diff * diff)
        grad[d] = 0.5 * float(np.sum(A * dK))
    grad[hp.dim] = 0.5 * float(np.sum(A * Kf))
    grad[hp.dim + 1] = 0.5 * hp.noise_variance * float(np.trace(A))
    return grad


def _check_conflicting_rows(Xs: np.ndarray, ys: np.ndarray) -> None:
    order = np.lexsort(Xs.T)
    Xo, yo = Xs[order], ys[order]
    same = np.all(Xo[1:] == Xo[:-1], axis=1)
    conflict = same & (yo[1:] != yo[:-1])
    if np.any(conflict):
        idx = int(np.argmax(conflict))
        raise ConflictingData(
            "identical scaled inputs carry different targets",
            detail={"targets": [float(yo[idx]), float(yo[idx + 1])]},
        )


def fit(
    inputs: np.ndarray,
    targets: np.ndarray,
    scaling: ScalingSpec,
    prior: LengthscalePrior | None = None,
    restarts: int = 8,
    seed: int = 0,
    max_iterations: int = 200,
) -> GpModel:
    """MAP hyperparameter fit via multi-start bounded quasi-Newton ascent.

    Maximizes MLL plus the lengthscale prior log density in log space.
    Deterministic for fixed (inputs, targets, scaling, restarts, seed).
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise DimensionMismatch("inputs and targets disagree on row count")
    if X.shape[0] < 2:
        raise InvalidInput("need at least 2 observations to fit")
    if restarts < 1:
        raise InvalidInput("restarts must be at least 1")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise InvalidInput("inputs and targets must be finite")

    if scaling.output_mean is None or scaling.output_std is None:
        scaling = scaling.with_output_stats(y)
    Xs = scaling.scale(X)
    ys = scaling.standardize(y)
    _check_conflicting_rows(Xs, ys)

    d = Xs.shape[1]
    if prior is None:
        prior = LengthscalePrior.dimension_scaled(d)

    log_noise_floor = math.log(NOISE_VARIANCE_FLOOR)
    eye = np.eye(Xs.shape[0])

    def negative_objective(theta: np.ndarray) -> tuple[float, np.ndarray]:
        hp = KernelHyperparams.from_log_vector(theta)
        Kf = kernel_matrix(Xs, Xs, hp)
        K = Kf.copy()
        K[np.diag_indices_from(K)] += hp.noise_variance
        try:
            L, _ = _cholesky_with_jitter(K)
        except SingularKernel:
            return 1e12, np.zeros(d + 2)
        alpha = cho_solve((L, True), ys)
        value = _mll_from_factors(ys, L, alpha) + prior.log_density(theta[:d])
        Kinv = cho_solve((L, True), eye)
        A = np.outer(alpha, alpha) - Kinv
        grad = np.empty(d + 2)
        for k in range(d):
            diff = (Xs[:, k, None] - Xs[None, :, k]) / hp.lengthscales[k]
            grad[k] = 0.5 * float(np.sum(A * (Kf * diff * diff)))
        grad[d] = 0.5 * float(np.sum(A * Kf))
        grad[d + 1] = 0.5 * hp.noise_variance * float(np.trace(A))
        grad[:d] += prior.log_density_grad(theta[:d])
        if not math.isfinite(value):
            return 1e12, np.zeros(d + 2)
        return -value, -grad

    bounds = (
        [_LOG_LENGTHSCALE_RANGE] * d
        + [_LOG_SIGNAL_RANGE]
        + [(log_noise_floor, _LOG_NOISE_CEILING)]
    )

    rng = np.random.default_rng(seed)
    start_points = [
        np.concatenate([np.full(d, prior.loc), [0.0], [math.log(1e-2)]])
    ]
    for _ in range(restarts - 1):
        start_points.append(
            np.concatenate(
                [
                    prior.loc + prior.scale * rng.standard_normal(d),
                    rng.standard_normal(1) * 0.7,
                    math.log(1e-3) + rng.standard_normal(1),
                ]
            )
        )

    best_theta, best_value = None, -np.inf
    for theta0 in start_points:
        result = minimize(
            negative_objective,
            np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds]),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": max_iterations, "ftol": 1e-12, "gtol": 1e-6},
        )
        value_k = -float(result.fun)
        if math.isfinite(value_k) and value_k > best_value:
            best_theta, best_value = result.x, value_k

    if best_theta is None:
        raise SingularKernel("every hyperparameter restart failed to factorize")

    hp = KernelHyperparams.from_log_vector(best_theta)
    L, alpha, jitter = _factorize(Xs, ys, hp)
    return GpModel(
        hyperparams=hp,
        scaling=scaling,
        train_inputs=Xs,
        train_targets=ys,
        cholesky_factor=L,
        alpha=alpha,
        jitter=jitter,
    )


def predict(
    model: GpModel, query: np.ndarray, joint: bool = False
) -> PosteriorGaussian:
    """Posterior at raw-unit query points, in standardized output space."""
    Xq = model.scaling.scale(query)
    hp = model.hyperparams
    Ks = kernel_matrix(Xq, model.train_inputs, hp)
    mean = Ks @ model.alpha
    V = solve_triangular(model.cholesky_factor, Ks.T, lower=True)
    if joint:
        cov = kernel_matrix(Xq, Xq, hp) - V.T @ V
        cov = 0.5 * (cov + cov.T)
        var = np.diag(cov).copy()
    else:
        cov = None
        var = hp.signal_variance - np.sum(V * V, axis=0)
    clamped = int(np.sum(var < 0.0))
    if np.any(var < -1e-6 * hp.signal_variance):
        raise SingularKernel(
            "posterior variance collapsed far below zero",
            detail={"min_variance": float(var.min())},
        )
    var = np.maximum(var, 0.0)
    return PosteriorGaussian(mean=mean, variance=var, covariance=cov, clamped=clamped)


def condition_on(
    model: GpModel, new_inputs: np.ndarray, new_targets: np.ndarray
) -> GpModel:
    """Append observations without refitting hyperparameters or scaling."""
    Xn = model.scaling.scale(new_inputs)
    yn = model.scaling.standardize(new_targets)
    if Xn.shape[0] != yn.shape[0]:
        raise DimensionMismatch("new inputs and targets disagree on row count")
    Xall = np.vstack([model.train_inputs, Xn])
    yall = np.concatenate([model.train_targets, yn])
    L, alpha, jitter = _factorize(Xall, yall, model.hyperparams)
    return GpModel(
        hyperparams=model.hyperparams,
        scaling=model.scaling,
        train_inputs=Xall,
        train_targets=yall,
        cholesky_factor=L,
        alpha=alpha,
        jitter=jitter,
    )


@dataclass(frozen=True)
class LooResult:
    """Leave-one-out predictions in raw units, aligned with the input rows."""

    predictions: np.ndarray
    stds: np.ndarray
    targets: np.ndarray
    failed_folds: tuple[int, ...]

    @property
    def rmse(self) -> float:
        ok = np.ones(len(self.targets), dtype=bool)
        for i in self.failed_folds:
            ok[i] = False
        err = self.predictions[ok] - self.targets[ok]
        return float(np.sqrt(np.mean(err * err)))


def loo_cv(
    inputs: np.ndarray,
    targets: np.ndarray,
    scaling: ScalingSpec,
    prior: LengthscalePrior | None = None,
    restarts: int = 8,
    seed: int = 0,
) -> LooResult:
    """Leave-one-out cross validation with a full refit per fold.

    Each fold calls :func:`fit` on the remaining rows with the same seed,
    so the result equals an external loop doing exactly that.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    n = X.shape[0]
    if n < 3:
        raise InvalidInput("need at least 3 rows for leave-one-out validation")
    base = replace(scaling, output_mean=None, output_std=None)
    preds = np.empty(n)
    stds = np.empty(n)
    failed: list[int] = []
    for i in range(n):
        keep = np.arange(n) != i
        try:
            model = fit(
                X[keep], y[keep], base, prior=prior, restarts=restarts, seed=seed
            )
            post = predict(model, X[i : i + 1])
            preds[i] = float(post.raw_mean(model.scaling)[0])
            stds[i] = float(post.raw_std(model.scaling)[0])
        except SingularKernel:
            preds[i] = np.nan
            stds[i] = np.nan
            failed.append(i)
    return LooResult(
        predictions=preds, stds=stds, targets=y.copy(), failed_folds=tuple(failed)
    )


def model_to_json(model: GpModel) -> str:
    """Serialize hyperparams, scaling and raw training data as JSON."""
    doc = {
        "hyperparams": model.hyperparams.to_dict(),
        "scaling": model.scaling.to_dict(),
        "train_inputs": model.scaling.unscale(model.train_inputs).tolist(),
        "train_targets": model.scaling.destandardize(model.train_targets).tolist(),
    }
    return json.dumps(doc, sort_keys=True)


def model_from_json(text: str) -> GpModel:
    doc = json.loads(text)
    return GpModel.from_data(
        inputs=np.asarray(doc["train_inputs"], dtype=float),
        targets=np.asarray(doc["train_targets"], dtype=float),
        scaling=ScalingSpec.from_dict(doc["scaling"]),
        hyperparams=KernelHyperparams.from_dict(doc["hyperparams"]),
    )
