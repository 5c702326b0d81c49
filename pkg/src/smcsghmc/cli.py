"""Command-line interface: ``smcsghmc {gmm-demo,pretrain,sample,eval,ood}``.

Exit codes: 0 success, 2 configuration error, 3 sampler degeneracy, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .core import ParticleSet, rng_stream
from .errors import ConfigError, DegeneracyError, FormatError, ShapeError
from .inference import (
    WeightedEnsemble,
    classification_report,
    fpr95_threshold,
    ood_metrics,
)
from .io import (
    Checkpoint,
    atomic_write,
    config_reference,
    load_checkpoint,
    load_config,
    load_ensemble_source,
    save_checkpoint,
    save_store,
    write_csv,
)
from .model import GaussianPrior, MlpModel
from .pretrain import OptimizerConfig, evaluate, train
from .proposal import HmcProposal, SghmcProposal
from .sampler import PretrainedInit, PriorInit, SamplerConfig, run
from .targets import GmmTarget, TemperedPosterior

log = logging.getLogger("smcsghmc")

EXIT_OK, EXIT_CONFIG, EXIT_DEGENERATE, EXIT_IO = 0, 2, 3, 4

GMM_DEFAULTS = dict(particles=1000, epochs=400, warmup=200, step_size=0.2, trajectory_length=10)
BNN_DEFAULTS = dict(particles=10, epochs=50, warmup=25, step_size=2e-5)

DIAGNOSTICS_HEADER = ["epoch", "ess", "resampled", "mean_loglik", "val_loss"]


def _sampler_config(cfg):
    return SamplerConfig(
        particles=cfg["particles"], epochs=cfg["epochs"], warmup=cfg["warmup"],
        step_size=cfg["step_size"], trajectory_length=cfg["trajectory_length"],
        batch_size=cfg["batch_size"], temperature_warmup=cfg["temperature_warmup"],
        temperature_sampling=cfg["temperature_sampling"],
        resample_threshold=cfg["resample_threshold"], resample_scheme=cfg["resample_scheme"],
        resample_every_iteration=cfg["resample_every_iteration"],
        seed=cfg["seed"], threads=cfg["threads"],
    )


def _data_path(p):
    if p is None:
        return None
    root = os.environ.get("SMCSGHMC_DATA_DIR")
    path = Path(p)
    if not path.is_absolute() and root:
        path = Path(root) / path
    return path


def load_splits(cfg):
    """Build ``(train, val, test)`` datasets from the data keys of ``cfg``."""
    kind = cfg["dataset"]
    if kind == "idx":
        if not cfg["train_images"] or not cfg["train_labels"]:
            raise ConfigError("dataset = idx needs train_images and train_labels")
        pool = data_mod.load_idx(_data_path(cfg["train_images"]), _data_path(cfg["train_labels"]),
                                 cfg["n_classes"])
        n_val = cfg["n_val"] if cfg["n_val"] is not None else len(pool) // 5
        if cfg["test_images"]:
            test = data_mod.load_idx(_data_path(cfg["test_images"]), _data_path(cfg["test_labels"]),
                                     cfg["n_classes"], "test")
            if cfg["n_test"] is not None:
                test = test.subset(np.arange(min(cfg["n_test"], len(test))), "test")
            n_test = 0
        else:
            test = None
            n_test = cfg["n_test"] if cfg["n_test"] is not None else len(pool) // 6
        n_train = cfg["n_train"] if cfg["n_train"] is not None else len(pool) - n_val - n_test
        train_set, val, pooled_test = data_mod.split(pool, n_train, n_val, n_test, cfg["split_seed"])
        return train_set, val, test if test is not None else pooled_test
    if kind in ("two_moons", "blobs"):
        n = cfg["synthetic_n"]
        if kind == "two_moons":
            pool = data_mod.make_two_moons(n, cfg["two_moons_noise"], cfg["split_seed"])
        else:
            pool = data_mod.make_blobs(n, cfg["blob_centers"], cfg["blob_sd"], cfg["split_seed"])
        n_val = cfg["n_val"] if cfg["n_val"] is not None else n // 5
        n_test = cfg["n_test"] if cfg["n_test"] is not None else n // 5
        n_train = cfg["n_train"] if cfg["n_train"] is not None else n - n_val - n_test
        return data_mod.split(pool, n_train, n_val, n_test, cfg["split_seed"])
    raise ConfigError(f"unknown dataset {kind!r}")


def load_ood_splits(cfg):
    kind = cfg["ood_dataset"]
    if kind == "idx":
        if not cfg["ood_val_images"] or not cfg["ood_test_images"]:
            raise ConfigError("ood_dataset = idx needs ood_val_images and ood_test_images")
        return (data_mod.load_idx(_data_path(cfg["ood_val_images"]), None, cfg["n_classes"], "ood_val"),
                data_mod.load_idx(_data_path(cfg["ood_test_images"]), None, cfg["n_classes"], "ood_test"))
    if kind == "blob":
        c = [cfg["ood_center"]]
        n = cfg["ood_n"]
        # distinct seeds keep the two OOD splits independent of each other
        val = data_mod.make_blobs(n, c, cfg["ood_sd"], cfg["split_seed"] + 1)
        test = data_mod.make_blobs(n, c, cfg["ood_sd"], cfg["split_seed"] + 2)
        return val, test
    raise ConfigError(f"unknown ood_dataset {kind!r}")


def _model(cfg, n_features=None):
    model = MlpModel(cfg["layer_sizes"], cfg["activation"])
    if n_features is not None and model.layer_sizes[0] != n_features:
        raise ConfigError(f"layer_sizes starts with {model.layer_sizes[0]} but data has {n_features} features")
    return model


def _diag_rows(diag):
    return [[r.epoch, r.ess, r.resampled, r.mean_loglik, r.val_loss] for r in diag.records]


def _emit(metrics, out, name):
    atomic_write(out / name, json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    for k in sorted(metrics):
        print(f"{k}={metrics[k]}")


# ---------------------------------------------------------------------------


def cmd_gmm_demo(cfg, out):
    target = GmmTarget()
    config = _sampler_config(cfg)
    init = PriorInit(GaussianPrior(cfg["gmm_init_variance"]))
    proposal = HmcProposal(config.step_size, config.trajectory_length)
    try:
        store, diag, _ = run(config, target, proposal, init)
    except DegeneracyError as exc:
        write_csv(out / "diagnostics.csv", DIAGNOSTICS_HEADER, _diag_rows(exc.diagnostics))
        raise
    w = store.normalized_weights(cfg["ensemble_normalization"])
    pts = store.params
    modes = target.nearest_mode(pts)
    mass = np.bincount(modes, weights=w, minlength=target.n_components)
    write_csv(out / "samples.csv", ["x", "y", "weight"], zip(pts[:, 0], pts[:, 1], w))
    write_csv(out / "mode_mass.csv", ["mode", "mean_x", "mean_y", "mass"],
              [[i, *target.means[i], mass[i]] for i in range(target.n_components)])
    write_csv(out / "diagnostics.csv", DIAGNOSTICS_HEADER, _diag_rows(diag))
    save_store(out / "samples.store", store, seed=cfg["seed"], epoch=config.epochs)
    summary = {"samples": len(store), "min_mode_mass": float(mass.min()),
               "max_mode_mass": float(mass.max()), "log_evidence": diag.log_evidence}
    _emit(summary, out, "summary.json")
    return EXIT_OK


def cmd_pretrain(cfg, out):
    train_set, val, _ = load_splits(cfg)
    model = _model(cfg, train_set.dim)
    opt = OptimizerConfig(cfg["learning_rate"], cfg["momentum"], cfg["weight_decay"],
                          cfg["pretrain_batch_size"], cfg["pretrain_epochs"], cfg["lr_decay"])
    params, history = train(model, train_set, opt, rng_stream(cfg["seed"], 0), val_set=val)
    ckpt = Checkpoint(params[None, :], np.zeros(1), model.layer_sizes, model.activation,
                      cfg["seed"], opt.epochs)
    save_checkpoint(out / "checkpoint.bin", ckpt)
    write_csv(out / "history.csv", ["epoch", "train_loss", "val_loss", "val_acc"],
              [[h["epoch"], h["train_loss"], h["val_loss"], h["val_acc"]] for h in history])
    val_loss, val_acc = evaluate(model, params, val)
    _emit({"val_loss": val_loss, "val_acc": val_acc, "dim": model.dim}, out, "pretrain.json")
    return EXIT_OK


def cmd_sample(cfg, out, init_arg="prior"):
    train_set, val, _ = load_splits(cfg)
    config = _sampler_config(cfg)
    prior = GaussianPrior(cfg["prior_variance"])
    if init_arg == "prior":
        model = _model(cfg, train_set.dim)
        init = PriorInit(prior)
    else:
        ckpt = load_checkpoint(init_arg)
        model = ckpt.model() or _model(cfg)
        if model.layer_sizes[0] != train_set.dim:
            raise ConfigError(f"checkpoint expects {model.layer_sizes[0]} features, data has {train_set.dim}")
        if len(ckpt.params) == 1:
            init = PretrainedInit(ckpt.params[0], cfg["init_jitter"], cfg["prior_variance"])
        elif len(ckpt.params) == config.particles:
            init = ParticleSet(ckpt.params, ckpt.log_weights)
        else:
            raise ConfigError(f"checkpoint holds {len(ckpt.params)} rows; need 1 or {config.particles}")
    target = TemperedPosterior(model, prior, train_set)
    proposal = SghmcProposal(config.step_size, config.batch_size)

    def monitor(particles):
        ens = WeightedEnsemble.from_log_weights(model, particles.params, particles.log_weights)
        return classification_report(ens, val, cfg["ece_bins"])["nll"]

    try:
        store, diag, particles = run(config, target, proposal, init, monitor=monitor)
    except DegeneracyError as exc:
        write_csv(out / "diagnostics.csv", DIAGNOSTICS_HEADER, _diag_rows(exc.diagnostics))
        raise
    header = dict(layer_sizes=model.layer_sizes, activation=model.activation,
                  seed=cfg["seed"], epoch=config.epochs)
    save_store(out / "samples.store", store, **header)
    save_checkpoint(out / "particles.bin", Checkpoint(particles.params, particles.log_weights, **header))
    write_csv(out / "diagnostics.csv", DIAGNOSTICS_HEADER, _diag_rows(diag))
    last = diag.records[-1]
    _emit({"samples": len(store), "final_ess": last.ess, "final_val_loss": last.val_loss,
           "log_evidence": diag.log_evidence, "nonfinite": diag.nonfinite_total}, out, "sample.json")
    return EXIT_OK


def _ensemble(path, cfg):
    store, header = load_ensemble_source(path)
    if not header["layer_sizes"]:
        raise ConfigError(f"{path} holds no network description")
    model = MlpModel(header["layer_sizes"], header["activation"])
    return WeightedEnsemble.from_store(model, store, cfg["ensemble_normalization"])


def cmd_eval(cfg, out, store_path, split_name="test"):
    ens = _ensemble(store_path, cfg)
    splits = dict(zip(("train", "val", "test"), load_splits(cfg)))
    metrics = classification_report(ens, splits[split_name], cfg["ece_bins"])
    metrics["split"] = split_name
    metrics["members"] = len(ens)
    _emit(metrics, out, "eval.json")
    return EXIT_OK


def cmd_ood(cfg, out, store_path):
    ens = _ensemble(store_path, cfg)
    _, id_val, id_test = load_splits(cfg)
    ood_val, ood_test = load_ood_splits(cfg)
    tau = fpr95_threshold(ens.energy(id_val.features), cfg["tpr"])
    test = ood_metrics(ens.energy(id_test.features), ens.energy(ood_test.features), tau)
    val = ood_metrics(ens.energy(id_val.features), ens.energy(ood_val.features), tau)
    metrics = {"tau": tau, **test, **{f"val_{k}": v for k, v in val.items()}}
    _emit(metrics, out, "ood.json")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="smcsghmc", description=__doc__.splitlines()[0])
    parser.add_argument("--print-config", action="store_true", help="list every config key and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", type=Path, help="flat key = value configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")

    def sampler_flags(p):
        p.add_argument("--particles", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--warmup", type=int)
        p.add_argument("--step-size", type=float)

    p = sub.add_parser("gmm-demo", help="SMC with HMC moves on the 25-mode Gaussian mixture")
    common(p)
    sampler_flags(p)

    p = sub.add_parser("pretrain", help="SGD pretraining of the MLP")
    common(p)
    p.add_argument("--epochs", type=int, help="pretraining epochs")

    p = sub.add_parser("sample", help="SMC-SGHMC sampling of the network posterior")
    common(p)
    sampler_flags(p)
    p.add_argument("--init", default="prior", help="'prior' or a checkpoint path")

    p = sub.add_parser("eval", help="accuracy / NLL / ECE of a weighted ensemble")
    common(p)
    p.add_argument("--store", required=True, type=Path, help="sample store or checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("ood", help="energy-score OOD detection with a validation-set threshold")
    common(p)
    p.add_argument("--store", required=True, type=Path, help="sample store or checkpoint")
    return parser


def _overrides(args):
    ov = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = v.strip()
    for flag in ("seed", "threads", "particles", "warmup", "step_size"):
        if getattr(args, flag, None) is not None:
            ov[flag] = getattr(args, flag)
    if getattr(args, "epochs", None) is not None:
        ov["pretrain_epochs" if args.command == "pretrain" else "epochs"] = args.epochs
    return ov


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_config:
        print(config_reference())
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    defaults = GMM_DEFAULTS if args.command == "gmm-demo" else BNN_DEFAULTS
    try:
        cfg = load_config(args.config, _overrides(args), defaults)
        if args.command == "gmm-demo":
            return cmd_gmm_demo(cfg, args.out)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, args.out)
        if args.command == "sample":
            return cmd_sample(cfg, args.out, args.init)
        if args.command == "eval":
            return cmd_eval(cfg, args.out, args.store, args.split)
        return cmd_ood(cfg, args.out, args.store)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegeneracyError as exc:
        print(f"sampler degeneracy: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
