"""Bridges the AMP evidence to per-coefficient sparsities through an RBM.

Each AMP sweep hands the support log-evidence ln g_i to the RBM as an
external visible field; the factorized visible means are then converted
back into sparsities rho_i with the evidence removed, so the denoiser
does not count it twice.  Early sweeps re-solve the factorization from
scratch; after a warm-up number of sweeps the magnetizations persist and
receive a single fixed-point step each ("persistent" schedule).

Also provides the two static baselines: a homogeneous sparsity and an
empirical per-pixel sparsity profile.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .rbm import (
    FpiOptions,
    MagnetizationState,
    clamp_mean,
    hidden_update,
    solve_fpi,
    visible_local_field,
)


def rho_from_magnetization(m_v, ln_g):
    """Sparsities from visible means with the field contribution removed:
    rho_i = sigm(ln m_i - ln(1 - m_i) - ln g_i).

    Using rho_i = m_i directly would double-count the evidence the AMP
    side already folded into the means.
    """
    m_v = clamp_mean(np.asarray(m_v, dtype=np.float64))
    return expit(logit(m_v) - np.asarray(ln_g, dtype=np.float64))


@dataclass
class BaselinePrior:
    """Static sparsity profile: kind "iid" (scalar broadcast) or
    "empirical" (stored per-pixel vector)."""

    kind: str
    rho: np.ndarray | float

    def __post_init__(self):
        if self.kind not in ("iid", "empirical"):
            raise ValueError(f"kind must be 'iid' or 'empirical', got {self.kind!r}")
        rho = np.asarray(self.rho, dtype=np.float64)
        if np.any(rho < 0.0) or np.any(rho > 1.0):
            raise ValueError("rho entries must lie in [0, 1]")
        if self.kind == "iid" and rho.ndim != 0:
            raise ValueError("iid baseline takes a scalar rho")
        if self.kind == "empirical" and rho.ndim != 1:
            raise ValueError("empirical baseline takes a rho vector")
        self.rho = rho


def baseline_rho(prior, n):
    """Materialize the baseline as a length-n vector; constant across
    AMP sweeps."""
    if prior.kind == "iid":
        return np.full(n, float(prior.rho))
    if prior.rho.shape[0] != n:
        raise ValueError(
            f"empirical rho has length {prior.rho.shape[0]}, expected {n}"
        )
    return prior.rho.copy()


@dataclass
class RbmSupportPrior:
    """Mutable per-reconstruction driver of the RBM support model.

    Carries the persistent magnetizations; one instance serves exactly
    one reconstruction.  Distinct reconstructions share the immutable
    rbm and get fresh instances.  persistent_start counts AMP sweeps:
    sweeps before it re-solve the factorization to convergence from a
    reset state, later sweeps take one persistent fixed-point step.
    """

    rbm: object
    fpi: FpiOptions = field(default_factory=FpiOptions)
    persistent_start: int = 50
    visible_init: str = "zero"          # "zero" or "bias"
    rng: object = None                  # only used by visible_init="bias"
    mags: MagnetizationState = None
    last_fpi_converged: bool = True
    fpi_failures: int = 0

    def __post_init__(self):
        if self.persistent_start < 1:
            raise ValueError(
                f"persistent_start must be >= 1, got {self.persistent_start}"
            )
        if self.visible_init not in ("zero", "bias"):
            raise ValueError(
                f"visible_init must be 'zero' or 'bias', got {self.visible_init!r}"
            )
        if self.visible_init == "bias" and self.rng is None:
            raise ValueError("visible_init='bias' needs an rng")
        if self.mags is None:
            self.mags = MagnetizationState(
                m_v=np.zeros(self.rbm.n_v), m_h=np.zeros(self.rbm.n_h)
            )
        if (self.mags.m_v.shape[0] != self.rbm.n_v
                or self.mags.m_h.shape[0] != self.rbm.n_h):
            raise ValueError("magnetization dimensions do not match the rbm")

    def initial_rho(self):
        """Sparsities implied by the visible biases alone; used to seed
        the AMP estimate before any evidence exists."""
        return expit(self.rbm.vbias)

    def _reset_mags(self):
        self.mags.m_h = np.zeros(self.rbm.n_h)
        if self.visible_init == "bias":
            p = expit(self.rbm.vbias)
            self.mags.m_v = (self.rng.random(self.rbm.n_v) < p).astype(np.float64)
        else:
            self.mags.m_v = np.zeros(self.rbm.n_v)


def update_support(prior, ln_g, amp_iter):
    """Advance the RBM factorization under field ln_g and return rho.

    The sparsities are computed as sigm(theta) where theta is the visible
    local field excluding ln_g.  At any visible fixed point this equals
    sigm(logit(m_v) - ln_g) exactly, but stays accurate when |ln_g|
    reaches 1e7 and the subtraction form would lose every significant
    digit; with zero couplings it reduces bitwise to sigm(vbias).
    """
    ln_g = np.asarray(ln_g, dtype=np.float64)
    if ln_g.shape[0] != prior.rbm.n_v:
        raise ValueError(
            f"ln_g has length {ln_g.shape[0]}, expected n_v={prior.rbm.n_v}"
        )
    method = prior.fpi.method
    if amp_iter < prior.persistent_start:
        prior._reset_mags()
        state, converged, _ = solve_fpi(prior.rbm, ln_g, prior.fpi, prior.mags)
        prior.last_fpi_converged = converged
        if not converged:
            # Non-convergence here is a warning condition: keep the last
            # iterate's means and let the outer AMP loop proceed.
            prior.fpi_failures += 1
        prior.mags.m_v = state.m_v
        prior.mags.m_h = state.m_h
        theta = visible_local_field(prior.rbm, state.m_h, method, state.m_v)
    else:
        m_h = hidden_update(prior.rbm, prior.mags.m_v, method, prior.mags.m_h)
        theta = visible_local_field(prior.rbm, m_h, method, prior.mags.m_v)
        prior.mags.m_h = m_h
        prior.mags.m_v = clamp_mean(expit(theta + ln_g))
    return expit(theta)
