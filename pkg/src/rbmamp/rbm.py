"""Binary restricted Boltzmann machine with mean-field and TAP factorizations.

Provides the two fixed-point factorizations of the visible/hidden means
(naive mean-field and its second-order TAP correction), their free
energies with an optional external field on the visible layer, a damped
fixed-point solver, an exact-enumeration oracle for small models, CD-1
training, and a bit-exact binary serialization ("RBM1" files).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp, xlogy

MEAN_EPS = 1e-12            # clamp window keeping means inside (0, 1)
ENUMERATION_LIMIT = 24      # max n_v + n_h for exact enumeration

RBM_MAGIC = b"RBM1"


class ModelFormatError(ValueError):
    """An RBM1 byte stream failed a structural check."""


class EnumerationSizeError(ValueError):
    """Model too large for exact enumeration."""


def clamp_mean(m):
    """Pull means into [MEAN_EPS, 1 - MEAN_EPS]; entropies and logits are
    singular at exactly 0 and 1."""
    return np.clip(m, MEAN_EPS, 1.0 - MEAN_EPS)


@dataclass(frozen=True)
class BinaryRbm:
    """Bipartite binary energy model.

    E(v, h) = - vbias.v - hbias.h - v.W.h over v in {0,1}^n_v and
    h in {0,1}^n_h.  W2 = W * W is cached for the TAP terms.
    """

    vbias: np.ndarray
    hbias: np.ndarray
    W: np.ndarray
    W2: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        vbias = np.ascontiguousarray(self.vbias, dtype=np.float64)
        hbias = np.ascontiguousarray(self.hbias, dtype=np.float64)
        W = np.ascontiguousarray(self.W, dtype=np.float64)
        if W.ndim != 2:
            raise ValueError(f"W must be a matrix, got ndim={W.ndim}")
        n_v, n_h = W.shape
        if vbias.shape != (n_v,):
            raise ValueError(
                f"vbias has shape {vbias.shape}, expected ({n_v},) to match W"
            )
        if hbias.shape != (n_h,):
            raise ValueError(
                f"hbias has shape {hbias.shape}, expected ({n_h},) to match W"
            )
        for name, arr in (("vbias", vbias), ("hbias", hbias), ("W", W)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        object.__setattr__(self, "vbias", vbias)
        object.__setattr__(self, "hbias", hbias)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "W2", W * W)

    @property
    def n_v(self):
        return self.W.shape[0]

    @property
    def n_h(self):
        return self.W.shape[1]


@dataclass
class MagnetizationState:
    """Layer means of a factorized RBM; variances are derived, m(1-m)."""

    m_v: np.ndarray
    m_h: np.ndarray

    @property
    def v_v(self):
        return self.m_v * (1.0 - self.m_v)

    @property
    def v_h(self):
        return self.m_h * (1.0 - self.m_h)

    def copy(self):
        return MagnetizationState(self.m_v.copy(), self.m_h.copy())


@dataclass(frozen=True)
class FpiOptions:
    """Fixed-point iteration controls.

    method is "nmf" or "tap".  Damping (fraction of the new update kept)
    is the standard cure for the oscillations that large couplings can
    induce.
    """

    method: str = "tap"
    tol: float = 1e-6
    max_iter: int = 200
    fpi_damping: float = 0.5

    def __post_init__(self):
        if self.method not in ("nmf", "tap"):
            raise ValueError(f"method must be 'nmf' or 'tap', got {self.method!r}")
        if not self.tol > 0.0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if not 0.0 < self.fpi_damping <= 1.0:
            raise ValueError(
                f"fpi_damping must lie in (0, 1], got {self.fpi_damping}"
            )


def _check_method(method):
    if method not in ("nmf", "tap"):
        raise ValueError(f"method must be 'nmf' or 'tap', got {method!r}")


def hidden_update(rbm, m_v, method, m_h_prev=None):
    """One sigmoid update of the hidden means given visible means.

    NMF: m_h = sigm(hbias + W^T m_v).  TAP adds the Onsager term
    (1/2 - m_h_prev) * (W^2)^T v_v inside the sigmoid, with the previous
    iterate's own mean in the retro-action factor (Jacobi-style sweep).
    """
    _check_method(method)
    m_v = np.asarray(m_v, dtype=np.float64)
    arg = rbm.hbias + rbm.W.T @ m_v
    if method == "tap":
        if m_h_prev is None:
            raise ValueError("TAP hidden update needs the previous hidden means")
        v_v = m_v * (1.0 - m_v)
        arg = arg + (0.5 - np.asarray(m_h_prev)) * (rbm.W2.T @ v_v)
    return clamp_mean(expit(arg))


def visible_local_field(rbm, m_h, method, m_v_prev=None):
    """Pre-sigmoid argument of the visible update, excluding any external
    field: vbias + W m_h (+ TAP Onsager term).

    Kept separate because the support-prior bridge needs this field with
    the external evidence cancelled exactly (the evidence can be ~1e7 in
    magnitude at convergence, where forming logit(m_v) - field would lose
    all precision).
    """
    _check_method(method)
    m_h = np.asarray(m_h, dtype=np.float64)
    theta = rbm.vbias + rbm.W @ m_h
    if method == "tap":
        if m_v_prev is None:
            raise ValueError("TAP visible update needs the previous visible means")
        v_h = m_h * (1.0 - m_h)
        theta = theta + (0.5 - np.asarray(m_v_prev)) * (rbm.W2 @ v_h)
    return theta


def visible_update(rbm, m_h, field_v, method, m_v_prev=None):
    """One sigmoid update of the visible means given hidden means.

    field_v is the external per-site field on the visible layer (the AMP
    evidence ln g; zeros recover the plain RBM update).
    """
    theta = visible_local_field(rbm, m_h, method, m_v_prev)
    return clamp_mean(expit(theta + np.asarray(field_v, dtype=np.float64)))


def free_energy(rbm, m_v, m_h, field_v, method):
    """Variational free energy of the factorized ansatz.

    NMF: -vbias.m_v - hbias.m_h - m_v.W.m_h - field.m_v plus the binary
    entropy terms sum H(m) + H(1-m) with H(x) = x ln x.  TAP subtracts
    (1/2) sum_ij W_ij^2 v_v,i v_h,j.
    """
    _check_method(method)
    m_v = np.asarray(m_v, dtype=np.float64)
    m_h = np.asarray(m_h, dtype=np.float64)
    for name, m in (("m_v", m_v), ("m_h", m_h)):
        if np.any(m < 0.0) or np.any(m > 1.0) or not np.all(np.isfinite(m)):
            raise ValueError(f"{name} means must lie in [0, 1]")
    m_v = clamp_mean(m_v)
    m_h = clamp_mean(m_h)
    field_v = np.asarray(field_v, dtype=np.float64)
    f = -(rbm.vbias @ m_v) - (rbm.hbias @ m_h) - m_v @ rbm.W @ m_h
    f -= field_v @ m_v
    f += np.sum(xlogy(m_v, m_v) + xlogy(1.0 - m_v, 1.0 - m_v))
    f += np.sum(xlogy(m_h, m_h) + xlogy(1.0 - m_h, 1.0 - m_h))
    if method == "tap":
        v_v = m_v * (1.0 - m_v)
        v_h = m_h * (1.0 - m_h)
        f -= 0.5 * (v_v @ rbm.W2 @ v_h)
    return float(f)


def fpi_step(rbm, field_v, state, method):
    """Exactly one hidden update followed by one visible update, undamped."""
    m_h = hidden_update(rbm, state.m_v, method, state.m_h)
    m_v = visible_update(rbm, m_h, field_v, method, state.m_v)
    return MagnetizationState(m_v=m_v, m_h=m_h)


def solve_fpi(rbm, field_v, opts, init):
    """Damped fixed-point iteration of the layer means.

    Alternates hidden then visible updates until max |change in m_v| per
    sweep drops below opts.tol or max_iter sweeps elapse.  Oscillation
    shows up as converged=False, never as an error.
    """
    m_v = np.asarray(init.m_v, dtype=np.float64).copy()
    m_h = np.asarray(init.m_h, dtype=np.float64).copy()
    if m_v.shape != (rbm.n_v,) or m_h.shape != (rbm.n_h,):
        raise ValueError(
            f"initial means have shapes {m_v.shape}/{m_h.shape}, "
            f"expected ({rbm.n_v},)/({rbm.n_h},)"
        )
    g = opts.fpi_damping
    converged = False
    iters = 0
    for iters in range(1, opts.max_iter + 1):
        m_h_new = hidden_update(rbm, m_v, opts.method, m_h)
        m_h = (1.0 - g) * m_h + g * m_h_new
        m_v_new = visible_update(rbm, m_h, field_v, opts.method, m_v)
        m_v_next = (1.0 - g) * m_v + g * m_v_new
        delta = np.max(np.abs(m_v_next - m_v))
        m_v = m_v_next
        if delta < opts.tol:
            converged = True
            break
    return MagnetizationState(m_v=m_v, m_h=m_h), converged, iters


def exact_enumeration(rbm, field_v):
    """Exact visible/hidden marginals and ln Z by summing all states.

    Accumulates exp(-E(v, h) + field.v) over every joint configuration
    in the log domain.  Bounded to n_v + n_h <= 24.
    """
    n_v, n_h = rbm.n_v, rbm.n_h
    if n_v + n_h > ENUMERATION_LIMIT:
        raise EnumerationSizeError(
            f"n_v + n_h = {n_v + n_h} exceeds the enumeration bound "
            f"{ENUMERATION_LIMIT}"
        )
    field_v = np.asarray(field_v, dtype=np.float64)
    sv = ((np.arange(2**n_v)[:, None] >> np.arange(n_v)) & 1).astype(np.float64)
    sh = ((np.arange(2**n_h)[:, None] >> np.arange(n_h)) & 1).astype(np.float64)
    log_w = (
        (sv @ (rbm.vbias + field_v))[:, None]
        + (sh @ rbm.hbias)[None, :]
        + (sv @ rbm.W) @ sh.T
    )
    ln_z = float(logsumexp(log_w))
    p = np.exp(log_w - ln_z)
    pv = sv.T @ p.sum(axis=1)
    ph = p.sum(axis=0) @ sh
    return pv, ph, ln_z


def cd1_epoch(rbm, data, lr, weight_decay, batch_size, rng):
    """One contrastive-divergence epoch over shuffled minibatches.

    Positive statistics pair the data with the hidden probabilities
    p_h0; the reconstruction chain samples h0 ~ Bernoulli(p_h0) and then
    uses mean-field probabilities for v1 and h1.  The l2 decay applies
    to W only.  Returns the updated model; deterministic given rng.
    """
    data = np.asarray(data, dtype=np.float64)
    if not np.all((data == 0.0) | (data == 1.0)):
        raise ValueError("training data must be binary (entries in {0, 1})")
    if data.shape[1] != rbm.n_v:
        raise ValueError(
            f"data has {data.shape[1]} columns, expected n_v={rbm.n_v}"
        )
    W = rbm.W.copy()
    vb = rbm.vbias.copy()
    hb = rbm.hbias.copy()
    perm = rng.permutation(data.shape[0])
    for start in range(0, data.shape[0], batch_size):
        idx = perm[start:start + batch_size]
        v0 = data[idx]
        b = v0.shape[0]
        p_h0 = expit(hb + v0 @ W)
        h0 = (rng.random(p_h0.shape) < p_h0).astype(np.float64)
        p_v1 = expit(vb + h0 @ W.T)
        p_h1 = expit(hb + p_v1 @ W)
        W += lr * ((v0.T @ p_h0 - p_v1.T @ p_h1) / b - weight_decay * W)
        vb += lr * np.sum(v0 - p_v1, axis=0) / b
        hb += lr * np.sum(p_h0 - p_h1, axis=0) / b
    return BinaryRbm(vbias=vb, hbias=hb, W=W)


@dataclass(frozen=True)
class TrainConfig:
    n_h: int
    epochs: int
    lr: float = 0.005
    weight_decay: float = 0.001
    batch_size: int = 100
    seed: int = 0


def train_rbm(cfg, data, epoch_callback=None):
    """CD-1 training from a small random start.

    W ~ Normal(0, 0.01^2), biases zero; small couplings keep the TAP
    expansion in its valid regime from the first epoch.  The optional
    epoch_callback(epoch_index, rbm) runs after every epoch.
    """
    data = np.asarray(data, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    n_v = data.shape[1]
    rbm = BinaryRbm(
        vbias=np.zeros(n_v),
        hbias=np.zeros(cfg.n_h),
        W=rng.normal(0.0, 0.01, size=(n_v, cfg.n_h)),
    )
    for epoch in range(cfg.epochs):
        rbm = cd1_epoch(rbm, data, cfg.lr, cfg.weight_decay, cfg.batch_size, rng)
        if epoch_callback is not None:
            epoch_callback(epoch, rbm)
    return rbm


def serialize_rbm(rbm):
    """RBM1 byte layout: magic, little-endian u32 n_v, u32 n_h, then f64
    arrays vbias, hbias, W (row-major)."""
    parts = [
        RBM_MAGIC,
        struct.pack("<II", rbm.n_v, rbm.n_h),
        rbm.vbias.astype("<f8").tobytes(),
        rbm.hbias.astype("<f8").tobytes(),
        np.ascontiguousarray(rbm.W).astype("<f8").tobytes(),
    ]
    return b"".join(parts)


def deserialize_rbm(data):
    """Parse an RBM1 byte stream, checking magic and exact length."""
    if data[:4] != RBM_MAGIC:
        raise ModelFormatError("not an RBM1 file")
    if len(data) < 12:
        raise ModelFormatError(f"unexpected end of file at offset {len(data)}")
    n_v, n_h = struct.unpack("<II", data[4:12])
    expected = 12 + 8 * (n_v + n_h + n_v * n_h)
    if len(data) < expected:
        raise ModelFormatError(f"unexpected end of file at offset {len(data)}")
    if len(data) > expected:
        raise ModelFormatError(
            f"trailing data after offset {expected} ({len(data) - expected} bytes)"
        )
    off = 12
    vbias = np.frombuffer(data, dtype="<f8", count=n_v, offset=off)
    off += 8 * n_v
    hbias = np.frombuffer(data, dtype="<f8", count=n_h, offset=off)
    off += 8 * n_h
    W = np.frombuffer(data, dtype="<f8", count=n_v * n_h, offset=off)
    return BinaryRbm(vbias=vbias.copy(), hbias=hbias.copy(),
                     W=W.reshape(n_v, n_h).copy())


def save_rbm(rbm, path):
    with open(path, "wb") as fh:
        fh.write(serialize_rbm(rbm))


def load_rbm(path):
    with open(path, "rb") as fh:
        return deserialize_rbm(fh.read())
