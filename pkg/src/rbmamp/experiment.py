"""Reconstruction experiments: measurement generation, the four method
drivers, support metrics, and the sweep/tabulation harness."""

from __future__ import annotations

import csv
import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .dataset import binarize
from .gb_amp import AmpOptions, DivergenceError, GbPrior, MeasurementModel, run_amp
from .rbm import FpiOptions
from .rbm_prior import RbmSupportPrior, update_support

METHODS = ("IidGB", "EmpiricalGB", "RbmNmf", "RbmTap")

SUMMARY_FIELDS = ("alpha", "method", "success_rate", "mcc_mean", "mcc_std",
                  "oracle")
DETAIL_FIELDS = ("image_id", "alpha", "method", "rho_true", "mse", "mcc",
                 "converged", "iters", "seed")


def derive_rng(master_seed, *labels):
    """Per-task generator: the task labels are hashed into extra entropy
    words under the master seed, so every (seed, label) pair names one
    reproducible stream independent of scheduling."""
    words = [int(master_seed) & 0xFFFFFFFFFFFFFFFF]
    for label in labels:
        digest = hashlib.sha256(str(label).encode("utf-8")).digest()
        words.append(int.from_bytes(digest[:8], "little"))
    return np.random.default_rng(np.random.SeedSequence(words))


@dataclass(frozen=True)
class SweepConfig:
    alphas: tuple
    methods: tuple
    n_test: int
    delta: float = 1e-8
    seed: int = 0
    success_mse: float = 1e-4
    amp: AmpOptions = field(default_factory=AmpOptions)
    fpi: FpiOptions = field(default_factory=FpiOptions)
    persistent_start: int = 50
    f_variance: str = "1/N"         # or "1/sqrt(N)"
    visible_init: str = "zero"

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        if any(not 0.0 < a <= 1.0 for a in alphas):
            raise ValueError("alphas must lie in (0, 1]")
        if list(alphas) != sorted(alphas):
            raise ValueError("alphas must be sorted ascending")
        methods = tuple(self.methods)
        for m in methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}, expected one of {METHODS}")
        if self.n_test < 1:
            raise ValueError(f"n_test must be >= 1, got {self.n_test}")
        if self.f_variance not in ("1/N", "1/sqrt(N)"):
            raise ValueError(
                f"f_variance must be '1/N' or '1/sqrt(N)', got {self.f_variance!r}"
            )
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "methods", methods)


@dataclass(frozen=True)
class PriorModels:
    """Fitted assets shared by every reconstruction of a sweep: the slab
    parameters, the empirical per-pixel sparsities, and the trained RBM
    (only the methods that need them have to be present)."""

    mu: float
    sigma2: float
    rho_emp: np.ndarray = None
    rbm: object = None


@dataclass(frozen=True)
class ReconResult:
    x_hat: np.ndarray
    support_posterior: np.ndarray
    mse: float
    mcc: float
    converged: bool
    iters: int


def make_measurement(x, alpha, delta, rng, f_variance="1/N"):
    """Draw a sensing matrix with iid Normal(0, 1/N) entries (or the
    1/sqrt(N)-variance alternative) and the noisy projections of x."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    m = int(round(alpha * n))
    if m < 1:
        raise ValueError(f"alpha={alpha} with N={n} gives M={m} measurements")
    var = 1.0 / n if f_variance == "1/N" else 1.0 / np.sqrt(n)
    F = rng.normal(0.0, np.sqrt(var), size=(m, n))
    y = F @ x
    if delta > 0.0:
        y = y + np.sqrt(delta) * rng.standard_normal(m)
    return MeasurementModel(F=F, y=y, delta=delta)


def mcc(support_est, support_true):
    """Matthews correlation from the 2x2 confusion matrix; 0 whenever a
    denominator factor vanishes."""
    est = np.asarray(support_est).astype(bool)
    true = np.asarray(support_true).astype(bool)
    if est.shape != true.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {true.shape}")
    tp = float(np.sum(est & true))
    tn = float(np.sum(~est & ~true))
    fp = float(np.sum(est & ~true))
    fn = float(np.sum(~est & true))
    denom2 = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom2 == 0.0:
        return 0.0
    return (tp * tn - fp * fn) / np.sqrt(denom2)


def measurement_rng(cfg, alpha, image_id):
    """Measurements depend on (seed, alpha, image) only, never on the
    method, so every method sees the same F and y."""
    return derive_rng(cfg.seed, f"measurement|alpha={alpha!r}|image={image_id}")


def reconstruct_one(x_true, method, models, cfg, alpha, image_id=0):
    """Reconstruct one signal with one method at measurement rate alpha."""
    x_true = np.asarray(x_true, dtype=np.float64)
    n = x_true.shape[0]
    rng = measurement_rng(cfg, alpha, image_id)
    model = make_measurement(x_true, alpha, cfg.delta, rng, cfg.f_variance)
    rho_source = None
    if method == "IidGB":
        rho = np.full(n, float(np.mean(x_true > 0.0)))
    elif method == "EmpiricalGB":
        if models.rho_emp is None:
            raise ValueError("EmpiricalGB needs models.rho_emp")
        rho = np.asarray(models.rho_emp, dtype=np.float64)
    elif method in ("RbmNmf", "RbmTap"):
        if models.rbm is None:
            raise ValueError(f"{method} needs models.rbm")
        fpi = replace(cfg.fpi, method="nmf" if method == "RbmNmf" else "tap")
        support = RbmSupportPrior(
            rbm=models.rbm,
            fpi=fpi,
            persistent_start=cfg.persistent_start,
            visible_init=cfg.visible_init,
            rng=(derive_rng(cfg.seed, f"fpi-init|alpha={alpha!r}|image={image_id}")
                 if cfg.visible_init == "bias" else None),
        )
        rho = support.initial_rho()

        def rho_source(ln_g, amp_iter, _support=support):
            return update_support(_support, ln_g, amp_iter)
    else:
        raise ValueError(f"unknown method {method!r}")

    prior = GbPrior(rho=rho, mu=models.mu, sigma2=models.sigma2)
    res = run_amp(model, prior, cfg.amp, rho_source=rho_source)
    mse = float(np.mean((res.x_hat - x_true) ** 2))
    support_est = res.support_posterior > 0.5
    support_true = binarize(x_true[None, :], 0.0)[0].astype(bool)
    return ReconResult(
        x_hat=res.x_hat,
        support_posterior=res.support_posterior,
        mse=mse,
        mcc=float(mcc(support_est, support_true)),
        converged=res.converged,
        iters=res.iters,
    )


def oracle_curve(test_images, alphas):
    """Fraction of images whose support fraction rho is <= alpha, per
    alpha (inclusive boundary: a rho = alpha image counts as
    recoverable)."""
    support = binarize(test_images, 0.0)
    rho = support.mean(axis=1)
    return np.array([float(np.mean(rho <= a)) for a in alphas])


# Worker-side state for parallel sweeps.  Populated by the pool
# initializer; fork start is cheap but initializer args keep this
# correct under any start method.
_WORKER = {}


def _sweep_init(cfg, models, images):
    _WORKER["cfg"] = cfg
    _WORKER["models"] = models
    _WORKER["images"] = images


def _sweep_task(task):
    alpha, method, image_id = task
    cfg, models, images = _WORKER["cfg"], _WORKER["models"], _WORKER["images"]
    return _detail_row(cfg, models, images[image_id], alpha, method, image_id)


def _detail_row(cfg, models, x_true, alpha, method, image_id):
    rho_true = float(np.mean(x_true > 0.0))
    try:
        r = reconstruct_one(x_true, method, models, cfg, alpha, image_id)
        mse_val, mcc_val, converged, iters = r.mse, r.mcc, r.converged, r.iters
    except DivergenceError as err:
        mse_val, mcc_val, converged, iters = float("inf"), 0.0, False, err.iteration
    return {
        "image_id": image_id,
        "alpha": alpha,
        "method": method,
        "rho_true": rho_true,
        "mse": mse_val,
        "mcc": mcc_val,
        "converged": converged,
        "iters": iters,
        "seed": cfg.seed,
    }


def summarize(cfg, detail_rows, oracle):
    """Aggregate detail rows into one summary row per (alpha, method).
    A pure reduction: every statistic is recomputable from the rows."""
    summary = []
    for k, alpha in enumerate(cfg.alphas):
        for method in cfg.methods:
            rows = [r for r in detail_rows
                    if r["alpha"] == alpha and r["method"] == method]
            mccs = np.array([r["mcc"] for r in rows])
            successes = np.array([r["mse"] <= cfg.success_mse for r in rows])
            summary.append({
                "alpha": alpha,
                "method": method,
                "success_rate": float(np.mean(successes)),
                "mcc_mean": float(np.mean(mccs)),
                "mcc_std": float(np.std(mccs)),
                "oracle": float(oracle[k]),
            })
    return summary


def run_sweep(cfg, test_images, models, jobs=1):
    """Reconstruct every (alpha, method, image) combination.

    Returns (summary_rows, detail_rows).  Individual failures become
    rows with infinite MSE; they never abort the sweep.  Results are
    reduced in (alpha, method, image) order whatever the execution
    order, so jobs > 1 changes wall time only.
    """
    test_images = np.asarray(test_images, dtype=np.float64)[: cfg.n_test]
    tasks = [(alpha, method, i)
             for alpha in cfg.alphas
             for method in cfg.methods
             for i in range(test_images.shape[0])]
    if jobs > 1:
        with ProcessPoolExecutor(
            max_workers=jobs,
            initializer=_sweep_init,
            initargs=(cfg, models, test_images),
        ) as pool:
            detail = list(pool.map(_sweep_task, tasks, chunksize=4))
    else:
        detail = [_detail_row(cfg, models, test_images[i], alpha, method, i)
                  for alpha, method, i in tasks]
    oracle = oracle_curve(test_images, cfg.alphas)
    return summarize(cfg, detail, oracle), detail


def _format_cell(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)        # shortest round-trip representation
    return str(value)


def write_csv(rows, fields, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_format_cell(row[f]) for f in fields])


def write_summary_csv(rows, path):
    write_csv(rows, SUMMARY_FIELDS, path)


def write_detail_csv(rows, path):
    write_csv(rows, DETAIL_FIELDS, path)
