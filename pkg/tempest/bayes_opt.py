"""
Two-dimensional Bayesian optimization in log10 space.

The surrogate is an exact GP with an RBF-ARD kernel on inputs scaled to the
unit square and standardized outputs. Candidates maximize analytic Expected
Improvement; batches are built with constant-liar fantasies and evaluated
concurrently.
"""

import asyncio
import inspect
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Awaitable, Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.optimize import minimize
from scipy.spatial.distance import cdist
from scipy.stats import norm

from tempest.errors import EvaluationFailedError, InvalidArgumentError, NumericalFailureError
from tempest.helpers import substream
from tempest.schema import BoObservation, SearchSpace

logger = logging.getLogger(__name__)

MAX_JITTER = 1e-4
FIT_RESTARTS = 8
EI_RESTARTS = 64
GRID_SIZE = 101
MAX_BATCH = 4

# log-space bounds of (signal variance, length scale x2, noise)
_HYPER_BOUNDS = [
    (math.log(1e-2), math.log(1e2)),
    (math.log(1e-2), math.log(1e1)),
    (math.log(1e-2), math.log(1e1)),
    (math.log(1e-6), math.log(1e-1)),
]

Objective = Callable[[np.ndarray], Union[float, Awaitable[float]]]


@dataclass(frozen=True)
class KernelHypers:
    signal_var: float = 1.0
    length_scales: Tuple[float, float] = (0.3, 0.3)
    noise: float = 1e-6

    def to_vector(self) -> np.ndarray:
        return np.log([self.signal_var, *self.length_scales, self.noise])

    @classmethod
    def from_vector(cls, theta: np.ndarray) -> "KernelHypers":
        values = np.exp(theta)
        return cls(float(values[0]), (float(values[1]), float(values[2])), float(values[3]))


def rbf_kernel(a: np.ndarray, b: np.ndarray, hypers: KernelHypers) -> np.ndarray:
    scale = np.asarray(hypers.length_scales)
    return hypers.signal_var * np.exp(-0.5 * cdist(a / scale, b / scale, "sqeuclidean"))


def _factorize(k: np.ndarray, noise: float) -> Tuple[np.ndarray, float]:
    """Cholesky of k + jitter * I, raising the jitter tenfold until it succeeds or exceeds MAX_JITTER."""
    jitter = noise
    eye = np.eye(k.shape[0])
    while True:
        try:
            return linalg.cholesky(k + jitter * eye, lower=True), jitter
        except linalg.LinAlgError:
            if jitter >= MAX_JITTER:
                raise NumericalFailureError(f"kernel matrix is singular even with jitter {jitter:g}")
            jitter = min(jitter * 10.0 if jitter > 0 else 1e-10, MAX_JITTER)


@dataclass
class GpSurrogate:
    """
    Fitted GP posterior.

    ``x`` holds inputs in unit coordinates; ``y`` holds raw objective values.
    ``jitter`` is the diagonal term actually used in the factorization.
    """

    x: np.ndarray
    y: np.ndarray
    hypers: KernelHypers
    y_mean: float
    y_std: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float

    @property
    def y_standardized(self) -> np.ndarray:
        return (self.y - self.y_mean) / self.y_std

    def predict(self, points: np.ndarray, standardized: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        """
        Posterior mean and standard deviation at unit-square points.

        Args:
            points: Array of shape [n, 2]
            standardized: Return values in standardized output units

        Returns:
            (mean, std), each of shape [n]
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        k_star = rbf_kernel(self.x, points, self.hypers)
        mean = k_star.T @ self.alpha
        v = linalg.solve_triangular(self.chol, k_star, lower=True)
        var = np.maximum(self.hypers.signal_var - np.sum(v * v, axis=0), 0.0)
        sd = np.sqrt(var)
        if standardized:
            return mean, sd
        return mean * self.y_std + self.y_mean, sd * self.y_std


def _condition(x: np.ndarray, y: np.ndarray, hypers: KernelHypers, y_mean: float, y_std: float) -> GpSurrogate:
    ys = (y - y_mean) / y_std
    chol, jitter = _factorize(rbf_kernel(x, x, hypers), hypers.noise)
    alpha = linalg.cho_solve((chol, True), ys)
    return GpSurrogate(x, y, hypers, y_mean, y_std, chol, alpha, jitter)


def neg_log_marginal_likelihood(theta: np.ndarray, x: np.ndarray, ys: np.ndarray) -> float:
    hypers = KernelHypers.from_vector(theta)
    try:
        chol, _ = _factorize(rbf_kernel(x, x, hypers), hypers.noise)
    except NumericalFailureError:
        return 1e10
    alpha = linalg.cho_solve((chol, True), ys)
    return float(0.5 * ys @ alpha + np.sum(np.log(np.diag(chol))) + 0.5 * len(ys) * math.log(2 * math.pi))


def gp_fit(
    x: np.ndarray,
    y: np.ndarray,
    hypers: Optional[KernelHypers] = None,
    restarts: int = FIT_RESTARTS,
    seed: int = 0,
) -> GpSurrogate:
    """
    Fit a GP to observations.

    Args:
        x: Inputs in unit coordinates, shape [n, 2]
        y: Raw objective values, shape [n]
        hypers: Fixed kernel hyperparameters; when None they maximize the
            marginal likelihood over ``restarts`` L-BFGS-B starts
        restarts: Number of starts of the hyperparameter search
        seed: Seed of the random starts

    Returns:
        GpSurrogate
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(y) < 1 or x.shape[0] != len(y):
        raise InvalidArgumentError(f"need matching, non-empty observations (got {x.shape[0]} points, {len(y)} values)")
    if not np.all(np.isfinite(y)):
        raise InvalidArgumentError("observations must be finite")
    y_mean = float(y.mean())
    y_std = float(y.std())
    if y_std == 0.0:
        y_std = 1.0
    ys = (y - y_mean) / y_std

    if hypers is None and len(y) > 1:
        rng = np.random.default_rng(seed)
        lows = np.array([b[0] for b in _HYPER_BOUNDS])
        highs = np.array([b[1] for b in _HYPER_BOUNDS])
        starts = [KernelHypers(noise=1e-4).to_vector()]
        starts += [rng.uniform(lows, highs) for _ in range(restarts - 1)]
        best_theta, best_value = starts[0], math.inf
        for start in starts:
            res = minimize(neg_log_marginal_likelihood, start, args=(x, ys), method="L-BFGS-B", bounds=_HYPER_BOUNDS)
            if np.isfinite(res.fun) and res.fun < best_value:
                best_theta, best_value = res.x, res.fun
        hypers = KernelHypers.from_vector(best_theta)
        logger.debug("fitted kernel %s (nlml %.4g)", hypers, best_value)
    elif hypers is None:
        hypers = KernelHypers()
    return _condition(x, y, hypers, y_mean, y_std)


def ei(mu: np.ndarray, sd: np.ndarray, f_star: float) -> np.ndarray:
    """
    Expected improvement over the incumbent maximum f_star.

    EI = (mu - f*) Phi(z) + sd phi(z) with z = (mu - f*) / sd; where sd is 0
    it is max(mu - f*, 0).
    """
    mu = np.asarray(mu, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(sd < 0):
        raise InvalidArgumentError("standard deviation must be non-negative")
    gain = mu - f_star
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, gain / np.where(sd > 0, sd, 1.0), 0.0)
        value = gain * norm.cdf(z) + sd * norm.pdf(z)
    value = np.where(sd > 0, value, np.maximum(gain, 0.0))
    return np.maximum(value, 0.0)


@dataclass
class BoState:
    """Observations so far in unit coordinates, with the incumbent maximum."""

    iteration: int = 0
    points: List[np.ndarray] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    pending: List[np.ndarray] = field(default_factory=list)

    @property
    def best_value(self) -> float:
        return max(self.values) if self.values else -math.inf

    @property
    def best_point(self) -> Optional[np.ndarray]:
        if not self.values:
            return None
        return self.points[int(np.argmax(self.values))]

    def observe(self, point: np.ndarray, value: float) -> None:
        self.points.append(np.asarray(point, dtype=float))
        self.values.append(float(value))


def unit_grid(size: int = GRID_SIZE) -> np.ndarray:
    axis = np.linspace(0.0, 1.0, size)
    g0, g1 = np.meshgrid(axis, axis, indexing="ij")
    return np.column_stack([g0.ravel(), g1.ravel()])


def _maximize_ei(surrogate: GpSurrogate, f_star: float, rng: np.random.Generator,
                 taken: Sequence[np.ndarray]) -> np.ndarray:
    def negative_ei(u: np.ndarray) -> float:
        mu, sd = surrogate.predict(u[None, :])
        return -float(ei(mu, sd, f_star)[0])

    best_point, best_value = None, 0.0
    for start in rng.uniform(0.0, 1.0, size=(EI_RESTARTS, 2)):
        res = minimize(negative_ei, start, method="L-BFGS-B", bounds=[(0.0, 1.0), (0.0, 1.0)])
        point = np.clip(res.x, 0.0, 1.0)
        if np.isfinite(res.fun) and -res.fun > best_value:
            best_point, best_value = point, -res.fun

    if best_point is not None and all(np.linalg.norm(best_point - t) > 1e-9 for t in taken):
        return best_point

    # Ascent degenerated: take the grid argmax, preferring unexplored points when EI is flat.
    grid = unit_grid()
    mu, sd = surrogate.predict(grid)
    score = ei(mu, sd, f_star)
    if not np.any(score > 0):
        score = sd
    if taken:
        too_close = cdist(grid, np.asarray(taken)).min(axis=1) <= 1e-9
        score = np.where(too_close, -np.inf, score)
    return grid[int(np.argmax(score))]


def propose(surrogate: GpSurrogate, state: BoState, batch: int = MAX_BATCH, seed: int = 0) -> List[np.ndarray]:
    """
    Propose a batch of candidates in unit coordinates.

    Each candidate maximizes EI from 64 random starts; before the next one is
    chosen, the candidate is added to the GP as a fantasy observation at the
    incumbent value (kernel hyperparameters held fixed).

    Args:
        surrogate: Fitted GP
        state: Current observations
        batch: Number of candidates, at most 4
        seed: Seed of the random starts

    Returns:
        List of points in [0, 1]^2
    """
    if not 1 <= batch <= MAX_BATCH:
        raise InvalidArgumentError(f"batch must lie in [1, {MAX_BATCH}], got {batch}")
    rng = np.random.default_rng(seed)
    f_star = state.best_value if state.values else float(np.max(surrogate.y))
    fantasy = surrogate
    candidates: List[np.ndarray] = []
    for _ in range(batch):
        taken = list(state.points) + candidates
        point = _maximize_ei(fantasy, f_star, rng, taken)
        candidates.append(point)
        x = np.vstack([fantasy.x, point])
        y = np.append(fantasy.y, f_star)
        fantasy = _condition(x, y, fantasy.hypers, surrogate.y_mean, surrogate.y_std)
    state.pending = list(candidates)
    return candidates


@dataclass
class BoResult:
    best_point: np.ndarray
    best_value: float
    history: List[BoObservation]
    surrogate: Optional[GpSurrogate] = None
    incumbents: List[float] = field(default_factory=list)


async def _evaluate(objective: Objective, point: np.ndarray, round_no: int,
                    semaphore: asyncio.Semaphore) -> BoObservation:
    start_time = time.time()
    observation = BoObservation(round=round_no, point=[float(v) for v in point])
    async with semaphore:
        try:
            if inspect.iscoroutinefunction(objective):
                value = await objective(point)
            else:
                value = await asyncio.to_thread(objective, point)
            value = float(value)
            if not math.isfinite(value):
                raise NumericalFailureError(f"objective returned {value}")
            observation.value = value
        except Exception as e:
            observation.status = "error"
            observation.error = f"{type(e).__name__}: {e}"
            logger.warning("evaluation at %s failed: %s", observation.point, observation.error)
        finally:
            observation.wall_time = time.time() - start_time
    return observation


async def bo_loop_async(
    space: SearchSpace,
    objective: Objective,
    init_points: Sequence[Sequence[float]],
    iterations: int,
    batch: int = MAX_BATCH,
    seed: int = 0,
    threads: int = MAX_BATCH,
    history_path: Optional[Union[str, Path]] = None,
    hypers: Optional[KernelHypers] = None,
) -> BoResult:
    """
    Maximize an objective over a log10 search space.

    Args:
        space: Two log10-bounded axes
        objective: Maps a point in log10 coordinates to a value (PSNR); may be async
        init_points: Initial points in log10 coordinates
        iterations: Rounds of fit, propose and evaluate after the initial batch
        batch: Candidates per round
        seed: Seed of the "bo" substream
        threads: Cap on concurrent evaluations
        history_path: JSONL file each observation is appended to
        hypers: Fixed kernel hyperparameters (fitted every round when None)

    Returns:
        BoResult with the incumbent in log10 coordinates

    Raises:
        EvaluationFailedError: If no evaluation succeeded
    """
    init = [np.asarray(p, dtype=float) for p in init_points]
    if not init:
        raise InvalidArgumentError("need at least one initial point")
    for p in init:
        if p.shape != (2,) or not space.contains(p):
            raise InvalidArgumentError(f"initial point {p.tolist()} lies outside the search space")
    rng = substream(seed, "bo")
    semaphore = asyncio.Semaphore(max(1, threads))
    state = BoState()
    history: List[BoObservation] = []
    incumbents: List[float] = []
    surrogate: Optional[GpSurrogate] = None

    history_file = None
    if history_path is not None:
        Path(history_path).parent.mkdir(parents=True, exist_ok=True)
        history_file = open(history_path, "w")

    async def evaluate_round(round_no: int, points: List[np.ndarray]) -> None:
        observations = await asyncio.gather(
            *(_evaluate(objective, space.from_unit(u), round_no, semaphore) for u in points)
        )
        for u, obs in zip(points, observations):
            history.append(obs)
            if history_file is not None:
                history_file.write(obs.model_dump_json() + "\n")
                history_file.flush()
            if obs.status == "ok":
                state.observe(u, obs.value)
        state.pending = []
        incumbents.append(state.best_value)
        logger.info("round %d: %d/%d ok, incumbent %.4g", round_no,
                    sum(o.status == "ok" for o in observations), len(observations), state.best_value)

    try:
        await evaluate_round(0, [space.to_unit(p) for p in init])
        for round_no in range(1, iterations + 1):
            state.iteration = round_no
            if state.values:
                surrogate = gp_fit(np.array(state.points), np.array(state.values), hypers,
                                   seed=int(rng.integers(2**31)))
                candidates = propose(surrogate, state, batch, seed=int(rng.integers(2**31)))
            else:
                candidates = list(rng.uniform(0.0, 1.0, size=(batch, 2)))
            logger.info("round %d proposals: %s", round_no,
                        [np.round(space.from_unit(c), 4).tolist() for c in candidates])
            await evaluate_round(round_no, candidates)
    finally:
        if history_file is not None:
            history_file.close()

    if not state.values:
        raise EvaluationFailedError(f"all {len(history)} evaluations failed")
    if surrogate is None or len(surrogate.y) != len(state.values):
        surrogate = gp_fit(np.array(state.points), np.array(state.values), hypers, seed=int(rng.integers(2**31)))
    return BoResult(
        best_point=space.from_unit(state.best_point),
        best_value=state.best_value,
        history=history,
        surrogate=surrogate,
        incumbents=incumbents,
    )


def bo_loop(space: SearchSpace, objective: Objective, init_points, iterations: int, **kwargs) -> BoResult:
    """Synchronous wrapper around :func:`bo_loop_async`."""
    return asyncio.run(bo_loop_async(space, objective, init_points, iterations, **kwargs))


def gp_grid(surrogate: GpSurrogate, space: SearchSpace, f_star: float, size: int = GRID_SIZE) -> pd.DataFrame:
    """
    Posterior mean, std and EI on a size x size grid, in log10 coordinates and objective units.
    """
    unit = unit_grid(size)
    mu, sd = surrogate.predict(unit)
    points = space.from_unit(unit)
    return pd.DataFrame({
        space.names[0]: points[:, 0],
        space.names[1]: points[:, 1],
        "mean": mu,
        "std": sd,
        "ei": ei(mu, sd, f_star),
    })
