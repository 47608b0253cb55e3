"""Command-line entry points: train an RBM support model, sweep
reconstruction experiments to CSV, inspect model files.

Exit codes: 0 success, 2 configuration/validation, 3 I/O or corrupt
files, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import copy
import importlib.resources
import json
import os
import sys

import numpy as np
from scipy.special import expit

from . import dataset, experiment, rbm
from .gb_amp import AmpOptions, DivergenceError
from .rbm import FpiOptions, TrainConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4

PRESETS = ("paper", "desk")


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


def load_preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}, expected one of {PRESETS}")
    ref = importlib.resources.files("rbmamp").joinpath(f"presets/{name}.json")
    return json.loads(ref.read_text())


def _deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def build_config(preset="desk", config_path=None, seed=None, jobs=None):
    """Preset, then the config file, then explicit flags; later layers win."""
    cfg = load_preset(preset)
    if config_path is not None:
        try:
            with open(config_path) as fh:
                user = json.load(fh)
        except OSError as err:
            raise ConfigError(f"cannot read config {config_path}: {err}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config {config_path} is not valid JSON: {err}") from err
        if not isinstance(user, dict):
            raise ConfigError("config document must be a JSON object")
        cfg = _deep_merge(cfg, user)
    if seed is not None:
        cfg["seed"] = seed
    if jobs is not None:
        cfg["jobs"] = jobs
    return cfg


def _require(cfg, key, kind, where="config"):
    if key not in cfg:
        raise ConfigError(f"{where}.{key} is missing")
    value = cfg[key]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ConfigError(f"{where}.{key} has type {type(value).__name__}")
    return value


def _validate_common(cfg):
    seed = _require(cfg, "seed", int)
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be a u64, got {seed}")
    jobs = _require(cfg, "jobs", int)
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    thr = _require(cfg, "binarize_threshold", float)
    if not 0.0 <= thr < 1.0:
        raise ConfigError(f"binarize_threshold must lie in [0, 1), got {thr}")
    floor = _require(cfg, "sigma2_floor", float)
    if floor <= 0.0:
        raise ConfigError(f"sigma2_floor must be positive, got {floor}")


def _existing_path(cfg, key):
    path = _require(cfg.get("paths", {}), key, str, where="paths")
    if not os.path.exists(path):
        raise ConfigError(f"paths.{key} does not exist: {path}")
    return path


def make_train_config(cfg):
    t = cfg.get("train", {})
    tc = TrainConfig(
        n_h=_require(t, "n_hidden", int, "train"),
        epochs=_require(t, "epochs", int, "train"),
        lr=_require(t, "lr", float, "train"),
        weight_decay=_require(t, "weight_decay", float, "train"),
        batch_size=_require(t, "batch_size", int, "train"),
        seed=cfg["seed"],
    )
    if tc.n_h < 1:
        raise ConfigError(f"train.n_hidden must be >= 1, got {tc.n_h}")
    if tc.epochs < 0:
        raise ConfigError(f"train.epochs must be >= 0, got {tc.epochs}")
    if tc.lr < 0.0 or tc.weight_decay < 0.0:
        raise ConfigError("train.lr and train.weight_decay must be >= 0")
    if tc.batch_size < 1:
        raise ConfigError(f"train.batch_size must be >= 1, got {tc.batch_size}")
    samples = _require(t, "train_samples", int, "train")
    if samples < 1:
        raise ConfigError(f"train.train_samples must be >= 1, got {samples}")
    return tc, samples


def make_sweep_config(cfg):
    s = cfg.get("sweep", {})
    amp = s.get("amp", {})
    fpi = s.get("fpi", {})
    try:
        return experiment.SweepConfig(
            alphas=tuple(_require(s, "alphas", list, "sweep")),
            methods=tuple(_require(s, "methods", list, "sweep")),
            n_test=_require(s, "n_test", int, "sweep"),
            delta=_require(s, "delta", float, "sweep"),
            seed=cfg["seed"],
            success_mse=_require(s, "success_mse", float, "sweep"),
            amp=AmpOptions(
                max_iter=_require(amp, "max_iter", int, "sweep.amp"),
                tol=_require(amp, "tol", float, "sweep.amp"),
                damping=_require(amp, "damping", float, "sweep.amp"),
            ),
            fpi=FpiOptions(
                tol=_require(fpi, "tol", float, "sweep.fpi"),
                max_iter=_require(fpi, "max_iter", int, "sweep.fpi"),
                fpi_damping=_require(fpi, "fpi_damping", float, "sweep.fpi"),
            ),
            persistent_start=_require(s, "persistent_start", int, "sweep"),
            f_variance=_require(s, "f_variance", str, "sweep"),
            visible_init=_require(s, "visible_init", str, "sweep"),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from err


def cmd_train(cfg):
    _validate_common(cfg)
    tc, samples = make_train_config(cfg)
    train_path = _existing_path(cfg, "mnist_train")
    model_out = _require(cfg.get("paths", {}), "model_out", str, "paths")

    images = dataset.load_idx(train_path)
    data = dataset.binarize(images, cfg["binarize_threshold"])
    if samples > data.shape[0]:
        raise ConfigError(
            f"train.train_samples={samples} exceeds the {data.shape[0]} "
            "available images"
        )
    train = data[:samples]
    # Diagnostics probe: the next batch after the training slice when the
    # file has one, else the tail of the slice.
    if data.shape[0] >= samples + tc.batch_size:
        probe = data[samples:samples + tc.batch_size]
    else:
        probe = train[-tc.batch_size:]

    def report(epoch, model):
        p_h = expit(model.hbias + probe @ model.W)
        p_v = expit(model.vbias + p_h @ model.W.T)
        err = float(np.mean((probe - p_v) ** 2))
        print(f"epoch {epoch + 1}/{tc.epochs} recon_mse={err:.6f}")

    print(f"training: n_v={train.shape[1]} n_h={tc.n_h} samples={samples} "
          f"epochs={tc.epochs} seed={tc.seed}")
    model = rbm.train_rbm(tc, train, epoch_callback=report)
    out_dir = os.path.dirname(model_out)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    rbm.save_rbm(model, model_out)
    print(f"wrote {model_out}")
    return EXIT_OK


def cmd_sweep(cfg):
    _validate_common(cfg)
    sweep_cfg = make_sweep_config(cfg)
    needs_rbm = any(m in ("RbmNmf", "RbmTap") for m in sweep_cfg.methods)
    needs_train = (cfg.get("gb") is None
                   or "EmpiricalGB" in sweep_cfg.methods)
    test_path = _existing_path(cfg, "mnist_test")
    model_in = None
    if needs_rbm:
        model_in = _existing_path(cfg, "model_in")
    train_path = _existing_path(cfg, "mnist_train") if needs_train else None
    results_dir = _require(cfg.get("paths", {}), "results_dir", str, "paths")

    test_images = dataset.load_idx(test_path).images
    rho_emp = None
    if cfg.get("gb") is not None:
        mu = _require(cfg["gb"], "mu", float, "gb")
        sigma2 = _require(cfg["gb"], "sigma2", float, "gb")
        if sigma2 <= 0.0:
            raise ConfigError(f"gb.sigma2 must be positive, got {sigma2}")
    if train_path is not None:
        train_images = dataset.load_idx(train_path)
        if cfg.get("gb") is None:
            mu, sigma2 = dataset.fit_gb_params(train_images, cfg["sigma2_floor"])
        if "EmpiricalGB" in sweep_cfg.methods:
            support = dataset.binarize(train_images, cfg["binarize_threshold"])
            rho_emp = support.mean(axis=0)
    model = rbm.load_rbm(model_in) if model_in else None
    if model is not None and model.n_v != test_images.shape[1]:
        raise ConfigError(
            f"model has n_v={model.n_v} but test images have "
            f"{test_images.shape[1]} pixels"
        )

    models = experiment.PriorModels(mu=mu, sigma2=sigma2, rho_emp=rho_emp,
                                    rbm=model)
    print(f"sweep: alphas={list(sweep_cfg.alphas)} methods={list(sweep_cfg.methods)} "
          f"n_test={sweep_cfg.n_test} seed={sweep_cfg.seed} "
          f"mu={mu:.6f} sigma2={sigma2:.6f} jobs={cfg['jobs']}")
    summary, detail = experiment.run_sweep(sweep_cfg, test_images, models,
                                           jobs=cfg["jobs"])
    os.makedirs(results_dir, exist_ok=True)
    summary_path = os.path.join(results_dir, "summary.csv")
    detail_path = os.path.join(results_dir, "detail.csv")
    experiment.write_summary_csv(summary, summary_path)
    experiment.write_detail_csv(detail, detail_path)
    for row in summary:
        print(f"alpha={row['alpha']:<6g} method={row['method']:<12s} "
              f"success={row['success_rate']:.3f} mcc={row['mcc_mean']:.3f} "
              f"oracle={row['oracle']:.3f}")
    print(f"wrote {summary_path} and {detail_path}")
    return EXIT_OK


def cmd_inspect(path):
    model = rbm.load_rbm(path)
    w = model.W.ravel()
    qs = np.quantile(w, [0.0, 0.01, 0.25, 0.5, 0.75, 0.99, 1.0])
    print(f"RBM1 model {path}")
    print(f"  n_v={model.n_v} n_h={model.n_h}")
    print(f"  |vbias|_2={np.linalg.norm(model.vbias):.6g} "
          f"|hbias|_2={np.linalg.norm(model.hbias):.6g} "
          f"|W|_F={np.linalg.norm(w):.6g}")
    print("  W quantiles (0,1,25,50,75,99,100%): "
          + " ".join(f"{q:.4g}" for q in qs))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rbmamp",
        description="Compressed-sensing reconstruction with an RBM support prior",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("train", "train the RBM support model"),
                           ("sweep", "run reconstruction sweeps to CSV")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--preset", choices=PRESETS, default="desk")
        p.add_argument("--config", metavar="PATH", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
    p = sub.add_parser("inspect", help="validate and summarize a model file")
    p.add_argument("model", metavar="PATH")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "inspect":
            return cmd_inspect(args.model)
        cfg = build_config(args.preset, args.config, args.seed, args.jobs)
        if args.command == "train":
            return cmd_train(cfg)
        return cmd_sweep(cfg)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (dataset.IdxFormatError, rbm.ModelFormatError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
