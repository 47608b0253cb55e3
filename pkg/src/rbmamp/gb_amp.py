"""AMP solver for y = F x + noise under a Gauss-Bernoulli prior.

The prior on each coefficient is a spike-and-slab mixture
(1 - rho_i) delta(x) + rho_i N(mu, sigma2) with per-coefficient support
probabilities rho_i.  The solver exposes a per-sweep hook so an external
support model can read the evidence ln g_i and rewrite the rho_i between
the cavity update and the denoising step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit


class DimensionError(ValueError):
    """Array dimensions are inconsistent between model components."""


class DivergenceError(RuntimeError):
    """A non-finite value appeared inside the AMP iteration."""

    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass(frozen=True)
class MeasurementModel:
    """Linear AWGN channel: y = F x + Normal(0, delta).

    F is a dense M x N sensing matrix, y the length-M observation vector,
    delta the noise variance.  F2 = F * F is cached because every AMP
    sweep needs it.
    """

    F: np.ndarray
    y: np.ndarray
    delta: float
    F2: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        F = np.ascontiguousarray(self.F, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        if F.ndim != 2:
            raise DimensionError(f"F must be a 2-d matrix, got ndim={F.ndim}")
        m, n = F.shape
        if m < 1 or n < 1:
            raise DimensionError(f"F must be at least 1x1, got {m}x{n}")
        if y.shape != (m,):
            raise DimensionError(
                f"y has shape {y.shape}, expected ({m},) to match F's row count"
            )
        if not np.all(np.isfinite(F)):
            raise ValueError("F contains non-finite entries")
        if not np.all(np.isfinite(y)):
            raise ValueError("y contains non-finite entries")
        if not self.delta >= 0.0:
            raise ValueError(f"delta must be non-negative, got {self.delta}")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "F2", F * F)

    @property
    def m(self):
        return self.F.shape[0]

    @property
    def n(self):
        return self.F.shape[1]


@dataclass(frozen=True)
class GbPrior:
    """Gauss-Bernoulli prior: (1 - rho_i) delta(x) + rho_i N(mu, sigma2)."""

    rho: np.ndarray
    mu: float
    sigma2: float

    def __post_init__(self):
        rho = np.ascontiguousarray(self.rho, dtype=np.float64)
        if rho.ndim != 1:
            raise DimensionError(f"rho must be a vector, got ndim={rho.ndim}")
        if np.any(rho < 0.0) or np.any(rho > 1.0):
            raise ValueError("rho entries must lie in [0, 1]")
        if not self.sigma2 > 0.0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not np.isfinite(self.mu):
            raise ValueError("mu must be finite")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @classmethod
    def iid(cls, n, rho, mu, sigma2):
        """Homogeneous prior with a scalar support probability."""
        return cls(np.full(n, float(rho)), mu, sigma2)

    def mean(self):
        """Prior mean per coefficient, rho_i * mu."""
        return self.rho * self.mu

    def variance(self):
        """Prior variance per coefficient, rho_i (sigma2 + mu^2) - (rho_i mu)^2."""
        a = self.rho * self.mu
        return self.rho * (self.sigma2 + self.mu**2) - a**2


@dataclass(frozen=True)
class AmpOptions:
    max_iter: int = 300
    tol: float = 1e-8           # on the RMS change of a per sweep
    damping: float = 0.5        # fraction of the new iterate kept

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.tol > 0.0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")


@dataclass(frozen=True)
class AmpState:
    """One snapshot of the AMP fixed-point iteration.

    a, c     posterior mean / variance per coefficient
    V, omega variance / mean messages on the measurement side
    R, S     cavity means / variances per coefficient
    ln_g     support log-likelihood ratios ln Z_on - ln Z_off
    pi       posterior support probabilities
    iter     number of completed sweeps
    """

    a: np.ndarray
    c: np.ndarray
    V: np.ndarray
    omega: np.ndarray
    R: np.ndarray
    S: np.ndarray
    ln_g: np.ndarray
    pi: np.ndarray
    iter: int


@dataclass(frozen=True)
class AmpResult:
    """Signal estimate plus convergence metadata returned by run_amp."""

    x_hat: np.ndarray
    support_posterior: np.ndarray
    converged: bool
    iters: int
    state: AmpState


def support_log_evidence(R, S, mu, sigma2):
    """Log-likelihood ratio ln g = ln Z_on - ln Z_off per coefficient.

    Z_off = N(0; R, S) is the cavity evidence for a zero coefficient,
    Z_on = N(R; mu, sigma2 + S) the evidence for a slab draw.  Evaluated
    fully in the log domain; S values down at the noise floor (1e-8 and
    below) are routine at convergence.
    """
    R = np.asarray(R, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    tot = S + sigma2
    return 0.5 * np.log(S / tot) + R**2 / (2.0 * S) - (R - mu) ** 2 / (2.0 * tot)


def denoise(R, S, rho, mu, sigma2):
    """Scalar Bernoulli-Gaussian posterior statistics.

    Posterior is proportional to [(1-rho) delta(x) + rho N(x; mu, sigma2)]
    * N(x; R, S).  Returns (a, c, ln_g, pi): posterior mean, posterior
    variance, the support log-likelihood ratio, and the posterior support
    probability.  Accepts scalars or broadcastable arrays.
    """
    scalar = np.isscalar(R) and np.isscalar(S)
    R = np.asarray(R, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    if not (np.all(np.isfinite(R)) and np.all(np.isfinite(S))):
        raise ValueError("denoise inputs R, S must be finite")
    if np.any(S <= 0.0):
        raise ValueError("cavity variance S must be positive")
    if not sigma2 > 0.0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    if np.any(rho < 0.0) or np.any(rho > 1.0) or not np.isfinite(mu):
        raise ValueError("rho must lie in [0, 1] and mu must be finite")

    tot = S + sigma2
    m_slab = (R * sigma2 + mu * S) / tot    # slab posterior mean
    v_slab = S * sigma2 / tot               # slab posterior variance
    ln_g = support_log_evidence(R, S, mu, sigma2)
    # pi = rho Z_on / ((1-rho) Z_off + rho Z_on), stable for rho in {0, 1}
    # because logit maps those to -inf/+inf and expit saturates exactly.
    pi = expit(ln_g + logit(rho))
    a = pi * m_slab
    c = pi * v_slab + pi * (1.0 - pi) * m_slab**2   # >= 0 by construction
    if scalar:
        return float(a), float(c), float(ln_g), float(pi)
    return a, c, ln_g, pi


def init_state(model, prior):
    """Start AMP from the prior: a = prior mean, c = prior variance.

    omega = F a and V = F^2 c seed the measurement-side messages; the
    Onsager memory term is suppressed on the first subsequent sweep
    because there is no previous residual yet.
    """
    if prior.rho.shape[0] != model.n:
        raise DimensionError(
            f"prior rho has length {prior.rho.shape[0]}, expected N={model.n}"
        )
    a = prior.mean()
    c = prior.variance()
    return AmpState(
        a=a,
        c=c,
        V=model.F2 @ c,
        omega=model.F @ a,
        R=np.zeros(model.n),
        S=np.ones(model.n),
        ln_g=np.zeros(model.n),
        pi=prior.rho.copy(),
        iter=0,
    )


def amp_iterate(state, model, prior, opts, rho_source=None):
    """One full AMP sweep; returns the next state.

    Order within the sweep: measurement messages (V, omega) with the
    Onsager correction, cavity fields (R, S), evidence ln_g, then the
    per-coefficient denoiser with damping on (a, c).  When rho_source is
    given it is called as rho_source(ln_g, iter) between the cavity and
    denoise stages and its output replaces prior.rho for this sweep.
    """
    if state.a.shape[0] != model.n:
        raise DimensionError(
            f"state has N={state.a.shape[0]}, model expects N={model.n}"
        )
    F, F2, y, delta = model.F, model.F2, model.y, model.delta

    V = F2 @ state.c
    if state.iter == 0:
        omega = F @ state.a
    else:
        omega = F @ state.a - V * (y - state.omega) / (delta + state.V)
    inv_dv = 1.0 / (delta + V)
    S = 1.0 / (F2.T @ inv_dv)
    R = state.a + S * (F.T @ ((y - omega) * inv_dv))

    ln_g = support_log_evidence(R, S, prior.mu, prior.sigma2)
    if rho_source is None:
        rho = prior.rho
    else:
        rho = np.asarray(rho_source(ln_g, state.iter), dtype=np.float64)
    a_new, c_new, _, pi = denoise(R, S, rho, prior.mu, prior.sigma2)

    g = opts.damping
    a = (1.0 - g) * state.a + g * a_new
    c = (1.0 - g) * state.c + g * c_new

    for name, arr in (("V", V), ("omega", omega), ("S", S), ("R", R),
                      ("a", a), ("c", c)):
        if not np.all(np.isfinite(arr)):
            raise DivergenceError(f"non-finite values in {name}", state.iter)

    return AmpState(a=a, c=c, V=V, omega=omega, R=R, S=S, ln_g=ln_g, pi=pi,
                    iter=state.iter + 1)


def run_amp(model, prior, opts=None, rho_source=None):
    """Iterate AMP until the estimate a stops moving or max_iter is hit.

    Convergence is declared when the mean squared per-coefficient change
    of a over one sweep drops below tol^2.  Non-convergence is reported
    through the flag, not an error; a DivergenceError from a sweep
    propagates.  rho_source, when given, is invoked once per sweep (see
    amp_iterate) and realizes the support-model-driven prior; None keeps
    the static prior.rho, which is the iid / empirical baseline behavior.
    """
    if opts is None:
        opts = AmpOptions()
    state = init_state(model, prior)
    converged = False
    for _ in range(opts.max_iter):
        a_prev = state.a
        state = amp_iterate(state, model, prior, opts, rho_source=rho_source)
        if np.mean((state.a - a_prev) ** 2) < opts.tol**2:
            converged = True
            break
    return AmpResult(
        x_hat=state.a,
        support_posterior=state.pi,
        converged=converged,
        iters=state.iter,
        state=state,
    )
