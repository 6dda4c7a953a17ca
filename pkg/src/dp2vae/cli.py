"""Command-line front end.

Subcommands: partition, pretrain, train, generate, evaluate, accountant, audit.
Artifacts go to ``--out``; each embeds the resolved config and the package
version. Exit codes: 0 ok, 1 runtime failure, 2 usage, 3 bad input data or
checkpoint, 4 numeric failure, 5 audit violation.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from .accountant import PrivacyParams, eps_for_training
from .audit import audit_step_divergence
from .config import FIELD_TYPES, RunConfig, UsageError, parse_config
from .cvae import CvaeParams, generate
from .data_io import (Checkpoint, LabeledDataset, load_checkpoint, load_dataset, save_checkpoint,
                      write_synthetic, read_idx_images, read_idx_labels)
from .errors import (AuditViolation, CheckpointError, DataError, DP2VAEError, NumericError)
from .evaluation import classifier_report, fit_features, frechet_distance, gaussian_fit, report_lines
from .numerics import RngStream, tune_allocator
from .training import (TrainConfig, init_stage2, metrics_csv_lines, pack_decoder, pack_partition,
                       pack_pool, pack_stage2, partition_dataset, stage1_pretrain, stage2_step,
                       unpack_decoder, unpack_partition, unpack_pool, unpack_stage2)

log = logging.getLogger("dp2vae")

COMMANDS = ("partition", "pretrain", "train", "generate", "evaluate", "accountant", "audit")
GENERATE_STREAM = 4
AUDIT_STREAM = 5
DATA_STREAM = 6

EXIT_RUNTIME, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_AUDIT = 1, 2, 3, 4, 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dp2vae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dp2vae {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        for key, kind in FIELD_TYPES.items():
            if kind == "bool":
                p.add_argument(f"--{key}", nargs="?", const="true", default=None)
            else:
                p.add_argument(f"--{key}", default=None)
        if name == "train":
            p.add_argument("--resume", action="store_true",
                           help="continue from stage2_state.ckpt in --out")
            p.add_argument("--stop_after", type=int, default=None,
                           help="save state and stop once this many steps are done")
    return parser


def _paths(cfg: RunConfig) -> dict:
    names = {
        "config": "config.txt",
        "partition": "partition.ckpt",
        "pool": "pool.ckpt",
        "stage1_report": "stage1_report.txt",
        "decoder": "decoder.ckpt",
        "stage2_state": "stage2_state.ckpt",
        "metrics": "stage2_metrics.csv",
        "privacy_report": "privacy_report.txt",
        "synthetic": "synthetic",
        "evaluation_csv": "evaluation.csv",
        "evaluation_report": "evaluation_report.txt",
    }
    return {k: os.path.join(cfg.out, v) for k, v in names.items()}


def _header(cfg: RunConfig) -> list:
    return [f"version={__version__}"] + [f"config.{k}={v}" for k, v in cfg.artifact_dict().items()]


def _write_lines(path, lines):
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _stamp(ckpt: Checkpoint, cfg: RunConfig) -> Checkpoint:
    ckpt.metadata["version"] = __version__
    ckpt.metadata["config"] = cfg.artifact_dict()
    return ckpt


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(K=cfg.K, batch_size=cfg.B, pretrain_steps=cfg.T_p, lr_pretrain=cfg.lr_p,
                       lr=cfg.lr, clip_bound=cfg.C, latent_dim=cfg.d_z,
                       freeze_encoders=cfg.freeze_encoders, amplification=cfg.amplification,
                       eps_every=cfg.eps_every)


def _require(cfg: RunConfig, *keys):
    for key in keys:
        if not getattr(cfg, key):
            raise UsageError(f"missing required setting {key}", key)


def _train_data(cfg: RunConfig) -> LabeledDataset:
    _require(cfg, "train_images", "train_labels")
    return load_dataset(cfg.train_images, cfg.train_labels)


def _test_data(cfg: RunConfig) -> LabeledDataset:
    _require(cfg, "test_images", "test_labels")
    return load_dataset(cfg.test_images, cfg.test_labels)


def _partition(cfg: RunConfig, n: int, paths: dict):
    if os.path.exists(paths["partition"]):
        part = unpack_partition(load_checkpoint(paths["partition"]))
        if part.K != cfg.K or part.seed != cfg.seed or sum(part.sizes()) != n:
            raise UsageError(f"{paths['partition']} was built for different K/seed/data")
        return part
    part = partition_dataset(n, cfg.K, cfg.seed)
    save_checkpoint(_stamp(pack_partition(part), cfg), paths["partition"])
    return part


def cmd_partition(cfg, args, paths):
    data = _train_data(cfg)
    part = partition_dataset(len(data), cfg.K, cfg.seed)
    save_checkpoint(_stamp(pack_partition(part), cfg), paths["partition"])
    print(f"partition K={part.K} n={len(data)} sizes={min(part.sizes())}..{max(part.sizes())}")


def cmd_pretrain(cfg, args, paths):
    data = _train_data(cfg)
    part = _partition(cfg, len(data), paths)
    pool = stage1_pretrain(data, part, _train_config(cfg), cfg.seed, workers=cfg.workers)
    save_checkpoint(_stamp(pack_pool(pool), cfg), paths["pool"])
    lines = _header(cfg)
    for k, (a, b) in enumerate(zip(pool.init_elbo, pool.final_elbo)):
        lines.append(f"subset{k}.elbo_init={a!r}")
        lines.append(f"subset{k}.elbo_final={b!r}")
    lines += [f"note={n}" for n in pool.notes]
    _write_lines(paths["stage1_report"], lines)
    improved = sum(b > a for a, b in zip(pool.init_elbo, pool.final_elbo))
    print(f"pretrained {pool.K} encoders; elbo improved on {improved}/{pool.K} subsets")


def _save_stage2(state, cfg, paths):
    save_checkpoint(_stamp(pack_stage2(state), cfg), paths["stage2_state"])


def cmd_train(cfg, args, paths):
    data = _train_data(cfg)
    part = _partition(cfg, len(data), paths)
    tcfg = _train_config(cfg)
    if args.resume:
        state = unpack_stage2(load_checkpoint(paths["stage2_state"]))
    else:
        pool = unpack_pool(load_checkpoint(paths["pool"]))
        state = init_stage2(pool, tcfg, part, PrivacyParams(cfg.C, cfg.sigma, cfg.delta), cfg.seed)
        header = ["# " + line for line in _header(cfg)]
        _write_lines(paths["metrics"], header + metrics_csv_lines([]))
    target = cfg.T if args.stop_after is None else min(cfg.T, args.stop_after)
    first = len(state.metrics)
    while state.step < target:
        stage2_step(state, data, part, tcfg)
    with open(paths["metrics"], "a") as f:
        for line in metrics_csv_lines(state.metrics[first:])[1:]:
            f.write(line + "\n")
    _save_stage2(state, cfg, paths)
    spend = state.accountant.spend()
    if state.step < cfg.T:
        print(f"stopped at step {state.step}/{cfg.T}; epsilon={spend.epsilon!r}")
        return
    save_checkpoint(_stamp(pack_decoder(state.decoder), cfg), paths["decoder"])
    report = _header(cfg) + [f"steps={spend.steps}", f"epsilon={spend.epsilon!r}",
                             f"delta={spend.delta!r}", f"alpha={spend.best_order!r}"]
    report += [f"event={e}" for e in state.events]
    _write_lines(paths["privacy_report"], report)
    print(f"epsilon={spend.epsilon!r} delta={spend.delta!r} alpha={spend.best_order!r}")


def cmd_generate(cfg, args, paths):
    decoder = unpack_decoder(load_checkpoint(paths["decoder"]))
    labels = np.repeat(np.arange(10), cfg.samples_per_class)
    images = generate(decoder, labels, RngStream(cfg.seed, GENERATE_STREAM))
    img_path, lbl_path = write_synthetic(LabeledDataset(images, labels, "synthetic"),
                                         paths["synthetic"])
    print(f"wrote {len(labels)} samples to {img_path}, {lbl_path}")


def cmd_evaluate(cfg, args, paths):
    real_train = _train_data(cfg)
    real_test = _test_data(cfg)
    syn_dir = paths["synthetic"]
    synthetic = LabeledDataset(
        read_idx_images(os.path.join(syn_dir, "synthetic-images-idx3-ubyte")).reshape(-1, 784),
        read_idx_labels(os.path.join(syn_dir, "synthetic-labels-idx1-ubyte")),
        "synthetic")
    fmap = fit_features(real_train.images, "pca", cfg.feature_dim)
    fd = frechet_distance(gaussian_fit(fmap.transform(real_test.images)),
                          gaussian_fit(fmap.transform(synthetic.images)))
    reports = [classifier_report(kind, synthetic, real_test, runs=cfg.eval_runs, seed=cfg.seed)
               for kind in ("logreg", "mlp")]
    lines = report_lines(fd, reports)
    _write_lines(paths["evaluation_csv"], ["# " + h for h in _header(cfg)] + lines)
    summary = _header(cfg) + [f"frechet_pca={fd!r}"]
    summary += [f"{r.kind}_accuracy_mean={r.mean_accuracy!r}" for r in reports]
    _write_lines(paths["evaluation_report"], summary)
    print(" ".join(summary[-3:]))


def cmd_accountant(cfg, args, paths):
    spend = eps_for_training(cfg.K, cfg.sigma, cfg.T, cfg.delta)
    print(f"epsilon={spend.epsilon!r} delta={spend.delta!r} alpha={spend.best_order!r}")


def cmd_audit(cfg, args, paths):
    data = _train_data(cfg)
    tcfg = _train_config(cfg)
    privacy = PrivacyParams(cfg.C, cfg.sigma, cfg.delta)
    rng = RngStream(cfg.seed, AUDIT_STREAM)
    worst = 0.0
    bound = None
    for _ in range(cfg.audit_batches):
        params = CvaeParams(tcfg.new_encoder(rng), tcfg.new_decoder(rng))
        batch, adjacent = random_adjacent_batches(data, cfg.audit_batch_size, rng)
        d, bound = audit_step_divergence(batch, adjacent, params, privacy, cfg.audit_alpha,
                                         rng=rng, lr=cfg.lr)
        worst = max(worst, d)
    print(f"max_d_alpha={worst!r} bound={bound!r} alpha={cfg.audit_alpha!r} "
          f"batches={cfg.audit_batches} violations=0")


def random_adjacent_batches(data: LabeledDataset, size: int, rng: RngStream):
    """A random batch and a copy with one random position replaced by an outside record."""
    idx = rng.choice(len(data), size + 1)
    batch_idx = idx[:size]
    adjacent_idx = batch_idx.copy()
    adjacent_idx[rng.integers(size)] = idx[size]
    return ((data.images[batch_idx], data.labels[batch_idx]),
            (data.images[adjacent_idx], data.labels[adjacent_idx]))


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def run_command(argv) -> int:
    try:
        args = build_parser().parse_args(argv)
        flags = {k: getattr(args, k) for k in FIELD_TYPES}
        cfg = parse_config(flags, args.config)
        paths = _paths(cfg)
        if args.command not in ("accountant",):
            os.makedirs(cfg.out, exist_ok=True)
            _write_lines(paths["config"], [f"# dp2vae {__version__}"] + cfg.lines())
        HANDLERS[args.command](cfg, args, paths)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AuditViolation as exc:
        print(f"audit violation: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except (DP2VAEError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    tune_allocator()
    return run_command(sys.argv[1:] if argv is None else argv)
