"""
Loss terms: heteroscedastic NLL, Gaussian KL and the tempered ELBO.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from tempest.errors import DomainError, InvalidArgumentError
from tempest.schema import Likelihood, LossReport, PriorScaling, TemperConfig
from tempest.tensor_engine import Tensor, as_tensor

logger = logging.getLogger(__name__)

Value = Union[np.ndarray, Tensor, float]

# One posterior draw: (x_hat as seen through the forward operator, -log sigma^2 or None).
ForwardFn = Callable[[int], Tuple[Tensor, Optional[Tensor]]]


def _check_shapes(*values: Value) -> None:
    shapes = {tuple(np.shape(v.data if isinstance(v, Tensor) else v)) for v in values}
    if len(shapes) > 1:
        raise InvalidArgumentError(f"shapes differ: {sorted(shapes)}")


def hetero_nll(y: Value, y_hat: Value, neg_log_s2: Value) -> Value:
    """
    Heteroscedastic Gaussian NLL, mean over pixels of exp(a) * (y - y_hat)^2 - a with a = -log s^2.

    Returns a Tensor when any input is a Tensor, a float otherwise.
    """
    _check_shapes(y, y_hat, neg_log_s2)
    if any(isinstance(v, Tensor) for v in (y, y_hat, neg_log_s2)):
        a = as_tensor(neg_log_s2)
        residual = as_tensor(y_hat) - as_tensor(y)
        return (a.exp() * residual.square() - a).mean()
    a = np.asarray(neg_log_s2, dtype=float)
    return float(np.mean(np.exp(a) * (np.asarray(y) - np.asarray(y_hat)) ** 2 - a))


def mse(y: Value, y_hat: Value) -> Value:
    _check_shapes(y, y_hat)
    if isinstance(y, Tensor) or isinstance(y_hat, Tensor):
        return (as_tensor(y_hat) - as_tensor(y)).square().mean()
    return float(np.mean((np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float)) ** 2))


def kl_gauss_closed(mu_q: Value, sigma_q: Value, mu_p: float, sigma_p: float) -> Value:
    """
    KL[N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)] summed over all elements.

    Per element: log(sigma_p / sigma_q) + (sigma_q^2 + (mu_q - mu_p)^2) / (2 sigma_p^2) - 1/2.
    The prior parameters are scalars; the posterior may be arrays or Tensors.

    Raises:
        DomainError: If any standard deviation is not positive
    """
    sigma_p = float(sigma_p)
    if not sigma_p > 0:
        raise DomainError(f"prior std must be positive, got {sigma_p}")
    sq = sigma_q.data if isinstance(sigma_q, Tensor) else np.asarray(sigma_q, dtype=float)
    if np.any(sq <= 0):
        raise DomainError(f"posterior std must be positive (min {np.min(sq):.3g})")
    if isinstance(mu_q, Tensor) or isinstance(sigma_q, Tensor):
        mu, sigma = as_tensor(mu_q), as_tensor(sigma_q)
        if mu.size != sigma.size:
            raise InvalidArgumentError(f"mu has {mu.size} elements, sigma has {sigma.size}")
        spread = (sigma.square() + (mu - mu_p).square()) * (0.5 / sigma_p ** 2)
        return (spread - sigma.log() + (np.log(sigma_p) - 0.5)).sum()
    mu = np.asarray(mu_q, dtype=float)
    terms = np.log(sigma_p / sq) + (sq ** 2 + (mu - mu_p) ** 2) / (2.0 * sigma_p ** 2) - 0.5
    return float(np.sum(terms))


def gauss_log_pdf(w: np.ndarray, mu: Value, sigma: Value) -> np.ndarray:
    """Elementwise log N(w; mu, sigma^2)."""
    sigma = np.asarray(sigma, dtype=float)
    return -0.5 * np.log(2.0 * np.pi * sigma ** 2) - (w - mu) ** 2 / (2.0 * sigma ** 2)


def kl_mc_samples(
    sample_q: Callable[[np.random.Generator, int], np.ndarray],
    log_q: Callable[[np.ndarray], np.ndarray],
    log_p: Callable[[np.ndarray], np.ndarray],
    n_samples: int,
    seed: int,
) -> np.ndarray:
    """
    Single-draw KL estimates log q(w_i) - log p(w_i) with w_i ~ q.

    Args:
        sample_q: Draws ``n`` samples of w given a generator
        log_q: Log density of q, summed over the weight dimensions of one sample
        log_p: Log density of p, likewise
        n_samples: Number of draws S
        seed: Seed of the draws

    Returns:
        Array of S estimates
    """
    if n_samples < 1:
        raise InvalidArgumentError(f"need at least one sample, got {n_samples}")
    rng = np.random.default_rng(seed)
    w = sample_q(rng, n_samples)
    return np.asarray(log_q(w), dtype=float) - np.asarray(log_p(w), dtype=float)


def kl_mc(sample_q, log_q, log_p, n_samples: int, seed: int) -> float:
    """Monte-Carlo KL estimate: the average of :func:`kl_mc_samples`."""
    return float(np.mean(kl_mc_samples(sample_q, log_q, log_p, n_samples, seed)))


def tempered_prior_std(temper: TemperConfig) -> float:
    """
    Std of the tempered prior N(0, sigma_T^2).

    sqrt_t gives sqrt(T) * sigma, inverse_t gives sigma / sqrt(T), unscaled gives sigma.
    """
    root_t = np.sqrt(temper.temperature)
    if temper.prior_scaling == PriorScaling.SQRT_T:
        return float(root_t * temper.sigma_prior)
    if temper.prior_scaling == PriorScaling.INVERSE_T:
        return float(temper.sigma_prior / root_t)
    return float(temper.sigma_prior)


def tempered_loss(
    y: np.ndarray,
    forward_fn: ForwardFn,
    temper: TemperConfig,
    mc_samples: int,
    likelihood: Likelihood,
    params=None,
) -> Tuple[Tensor, LossReport]:
    """
    T * KL[q || N(0, sigma_T^2)] + E_q[NLL].

    Args:
        y: Observation
        forward_fn: Maps a draw index to (F[x_hat], -log sigma^2); each call samples fresh weights
        temper: Temperature and prior std
        mc_samples: Posterior draws averaged for the NLL
        likelihood: hetero or mse
        params: VariationalParams whose KL to the tempered prior is added; None skips the KL

    Returns:
        (differentiable total, LossReport)
    """
    if mc_samples < 1:
        raise InvalidArgumentError(f"need at least one MC sample, got {mc_samples}")
    y_t = Tensor(np.asarray(y, dtype=float))
    nll: Optional[Tensor] = None
    for draw in range(mc_samples):
        y_hat, neg_log_s2 = forward_fn(draw)
        y_hat = y_hat.reshape(*y_t.shape)
        if likelihood == Likelihood.HETERO:
            if neg_log_s2 is None:
                raise InvalidArgumentError("the heteroscedastic likelihood needs a variance head")
            term = hetero_nll(y_t, y_hat, neg_log_s2.reshape(*y_t.shape))
        else:
            term = mse(y_t, y_hat)
        nll = term if nll is None else nll + term
    nll = nll / mc_samples

    if params is None:
        kl = Tensor(np.zeros(1))
    else:
        sigma_t = tempered_prior_std(temper)
        kl = None
        for name in params.names():
            term = kl_gauss_closed(params.mu[name], params.sigma(name), 0.0, sigma_t)
            kl = term if kl is None else kl + term
    total = kl * temper.temperature + nll
    report = LossReport(
        nll=nll.item(),
        kl=kl.item(),
        elbo_t=temper.temperature * kl.item() + nll.item(),
        temperature=temper.temperature,
        mc_samples=mc_samples,
    )
    return total, report


@dataclass
class Moments:
    """Predictive mean and total variance with its epistemic and aleatoric parts."""

    mean: np.ndarray
    variance: np.ndarray
    epistemic: np.ndarray
    aleatoric: Optional[np.ndarray] = None


def predictive_moments(
    samples: Sequence[np.ndarray], sigma2: Optional[Sequence[Optional[np.ndarray]]] = None
) -> Moments:
    """
    Moments of the predictive distribution from posterior samples.

    mean = E[x], variance = E[x^2] - E[x]^2 + E[s^2]. The aleatoric term is
    dropped when no sample carries a variance.

    Args:
        samples: At least two reconstructions
        sigma2: Optional per-sample aleatoric variances

    Returns:
        Moments
    """
    if len(samples) < 2:
        raise InvalidArgumentError(f"predictive moments need at least 2 samples, got {len(samples)}")
    stack = np.stack([np.asarray(s, dtype=float) for s in samples])
    mean = stack.mean(axis=0)
    # Clamp cancellation noise; E[x^2] - E[x]^2 is non-negative.
    epistemic = np.maximum(np.mean(stack ** 2, axis=0) - mean ** 2, 0.0)
    aleatoric = None
    if sigma2 is not None and any(s is not None for s in sigma2):
        if any(s is None for s in sigma2) or len(sigma2) != len(samples):
            raise InvalidArgumentError("aleatoric variances must accompany every sample or none")
        aleatoric = np.mean(np.stack([np.asarray(s, dtype=float) for s in sigma2]), axis=0)
    variance = epistemic + aleatoric if aleatoric is not None else epistemic.copy()
    return Moments(mean=mean, variance=variance, epistemic=epistemic, aleatoric=aleatoric)
