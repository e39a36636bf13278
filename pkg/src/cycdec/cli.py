"""Command line: synth, train, eval, gradcheck, report."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import iue
from . import numcore as nc
from .backbone import ConfigError as BackboneConfigError
from .config import ConfigError, RunConfig, load_run_config
from .data import (DataError, SynthConfig, TrialFormatError, load_trialset, loso_splits,
                   save_trialset, synth_generate)
from .estimator import CycleDecoderClassifier
from .model import Decoder, DecoderConfig
from .report import read_results_csv, results_csv, results_text, summarize_accuracy, table
from .train import CheckpointFormatError, LossWeights, load_checkpoint, save_checkpoint, total_loss

log = logging.getLogger("cycdec")


class CompatibilityError(ValueError):
    pass


def _config(args) -> RunConfig:
    if args.config:
        return load_run_config(args.config)
    return config_mod.from_mapping(RunConfig, {}, dict(os.environ))


def synth_config(rc: RunConfig) -> SynthConfig:
    return SynthConfig(n_subjects=rc.synth_subjects, trials_per_class=rc.synth_trials_per_class,
                       C=rc.synth_channels, T=rc.synth_times, sample_rate=rc.synth_sample_rate,
                       class_freqs=tuple(rc.synth_class_freqs),
                       active_channels=rc.synth_active_channels,
                       subject_gain_jitter=rc.synth_gain_jitter, noise_std=rc.synth_noise_std,
                       rng_seed=rc.seed)


def cmd_synth(args) -> int:
    rc = _config(args)
    out = Path(args.out or rc.data_path)
    ts = synth_generate(synth_config(rc))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_trialset(out, ts)
    print(f"wrote {len(ts)} trials ({ts.n_channels} ch x {ts.n_times} samples) to {out}")
    return 0


def run_loso(rc: RunConfig, ts, out_dir: Path | None = None) -> list:
    """Train one model per held-out subject; returns per-fold result rows."""
    rows = []
    plan = loso_splits(ts, rc.val_fraction, rc.seed)
    for fold in plan.folds:
        est = CycleDecoderClassifier.from_run_config(rc)
        est.fit(ts.trials[fold.train], ts.labels[fold.train],
                X_val=ts.trials[fold.val], y_val=ts.labels[fold.val])
        logits, depth = est.model_.predict_logits(ts.trials[fold.test])
        acc = float((est.classes_[logits.argmax(axis=1)] == ts.labels[fold.test]).mean())
        rows.append(dict(subject=fold.test_subject, n_test=len(fold.test), accuracy=acc,
                         mean_cycles=float(depth.mean()), best_epoch=est.best_epoch_,
                         val_accuracy=est.best_val_accuracy_))
        log.info("subject %d: test acc %.3f (best epoch %d)", fold.test_subject, acc, est.best_epoch_)
        if out_dir is not None:
            save_checkpoint(out_dir / f"fold_{fold.test_subject:02d}.cyc", est.checkpoint_)
    return rows


def cmd_train(args) -> int:
    rc = _config(args)
    ts = load_trialset(rc.data_path)
    # fail on config/shape problems before anything is written
    DecoderConfig.from_run_config(rc, ts.n_channels, ts.n_times, ts.n_classes).validate()
    out_dir = Path(args.out or rc.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = run_loso(rc, ts, out_dir)
    (out_dir / "results.csv").write_text(results_csv(rows))
    (out_dir / "results.txt").write_text(results_text(rows, rc.sample_std))
    print(table(rows, rc.sample_std))
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ts = load_trialset(args.data)
    cfg = ckpt.config
    if (ts.n_channels, ts.n_times, ts.n_classes) != (cfg.n_channels, cfg.n_times, cfg.n_classes):
        raise CompatibilityError(
            f"checkpoint expects C={cfg.n_channels}, T={cfg.n_times}, K={cfg.n_classes}; "
            f"dataset has C={ts.n_channels}, T={ts.n_times}, K={ts.n_classes}")
    if args.subject is not None:
        ts = ts.subset(np.flatnonzero(ts.subjects == args.subject))
        if len(ts) == 0:
            raise DataError(f"no trials for subject {args.subject}")
    model = ckpt.build()
    logits, depth = model.predict_logits(ts.trials)
    pred = logits.argmax(axis=1)
    acc = float((pred == ts.labels).mean())
    if args.predictions:
        lines = ["trial,label,prediction,cycles"]
        lines += [f"{i},{y},{p},{c}" for i, (y, p, c) in enumerate(zip(ts.labels, pred, depth))]
        Path(args.predictions).write_text("\n".join(lines) + "\n")
    print(f"accuracy = {acc!r}")
    print(f"mean_cycles = {float(depth.mean())!r}")
    print(f"n_trials = {len(ts)}")
    return 0


def gradcheck_suite(seed: int = 0, h: float = 1e-4, tol: float = 1e-4) -> nc.GradCheckReport:
    """Full composite loss of a toy decoder against five-point central differences."""
    cfg = DecoderConfig(n_channels=3, n_times=30, n_classes=4, temporal_kernel=5,
                        temporal_filters=2, pool_stride=3, windows=(6, 4), d=4, d_h=5, L_max=3)
    model = Decoder(cfg, seed)
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, (2, 3, 30))
    y = np.array([1, 3])
    targets = iue.mcts_targets(model.forward(X), y, iue.MctsConfig(16, rng_seed=seed))
    lw = LossWeights(0.3, 0.7, True)
    return nc.grad_check(lambda: total_loss(model.forward(X), y, targets, lw, cfg.tau_ens),
                         model.parameters(), h=h, tol=tol, stencil=5)


def cmd_gradcheck(args) -> int:
    report = gradcheck_suite(args.seed)
    print(report)
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


def cmd_report(args) -> int:
    if args.results:
        acc = [r["accuracy"] for r in read_results_csv(Path(args.results).read_text())]
    else:
        acc = args.values
    mean, std = summarize_accuracy(acc, args.sample_std)
    print(f"mean = {mean:.3f}")
    print(f"std = {std:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cycdec", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic trial file")
    p.add_argument("--config")
    p.add_argument("--out", help="output path (default: data_path from the config)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="leave-one-subject-out training")
    p.add_argument("--config")
    p.add_argument("--out", help="output directory (default: out_dir from the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subject", type=int)
    p.add_argument("--predictions", help="write per-trial predictions as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="mean and std of per-subject accuracies")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--results", help="results.csv written by train")
    g.add_argument("--values", type=float, nargs="+")
    p.add_argument("--sample-std", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


EXPECTED_ERRORS = (ConfigError, BackboneConfigError, DataError, TrialFormatError,
                   CheckpointFormatError, CompatibilityError, FileNotFoundError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
