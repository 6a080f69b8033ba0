"""Experiment orchestration: config files, multi-trial runs, the ablation
matrix, embedding export, and the `dualda` command line.

Config files are `key = value` lines, `#` starts a comment. A minimal file
needs only `variant` and `dataset`; everything else has defaults. CSV
outputs use '.' decimals, LF line endings, and repr() floats so reruns are
byte-identical.

Exit codes: 0 success, 1 config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import gradcheck
from .data import (DomainDataset, dataset_checksum, domain_shift,
                   gen_blob_shift, gen_two_moons, load_idx)
from .errors import ConfigError, ContractError
from .model import DualModel, Variant
from .nn import BoundComponents
from .optim import Schedule
from .trainer import MetricsRecord, TrainConfig, train

DATASETS = ("two_moons", "blobs", "idx")
VARIANT_ORDER = tuple(v.value for v in Variant)


@dataclass
class RunConfig:
    variant: str = ""
    dataset: str = ""
    # training
    epochs: int = 60
    batch_size: Optional[int] = None   # resolved: 64 synthetic, 128 idx
    k: int = 4
    mcd_warmup: float = 0.25
    eta0: float = 0.002
    alpha: float = 10.0
    beta: float = 0.75
    gamma: float = 10.0
    momentum: float = 0.9
    seed: int = 0
    trials: int = 5
    eval_every: int = 10
    # model
    feature_dim: int = 32
    g_hidden: int = 64
    head_hidden: int = 16
    # synthetic datasets
    n_source: int = 500
    n_target: int = 500
    noise_sigma: float = 0.1
    theta_degrees: float = 40.0
    translate_x: float = 0.0
    translate_y: float = 0.0
    blob_classes: int = 3
    separation: float = 4.0
    shift_x: float = 2.0
    shift_y: float = 0.0
    # idx dataset paths
    source_images: str = ""
    source_labels: str = ""
    target_images: str = ""
    target_labels: str = ""
    # outputs
    out_dir: str = "runs"
    embed_per_domain: int = 1000

    def resolved_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 128 if self.dataset == "idx" else 64

    def train_config(self, trial_seed: int) -> TrainConfig:
        return TrainConfig(
            variant=Variant.parse(self.variant),
            epochs=self.epochs,
            batch_size=self.resolved_batch_size(),
            k=self.k,
            schedule=Schedule(self.eta0, self.alpha, self.beta, self.gamma,
                              self.momentum),
            seed=trial_seed,
            eval_every=self.eval_every,
            feature_dim=self.feature_dim,
            g_hidden=(self.g_hidden,),
            head_hidden=(self.head_hidden,),
            mcd_warmup_frac=self.mcd_warmup,
        )


_INT_KEYS = {"epochs", "batch_size", "k", "seed", "trials", "eval_every",
             "feature_dim", "g_hidden", "head_hidden", "n_source", "n_target",
             "blob_classes", "embed_per_domain"}
_FLOAT_KEYS = {"eta0", "alpha", "beta", "gamma", "momentum", "noise_sigma",
               "theta_degrees", "translate_x", "translate_y", "separation",
               "shift_x", "shift_y", "mcd_warmup"}
_STR_KEYS = {"variant", "dataset", "source_images", "source_labels",
             "target_images", "target_labels", "out_dir"}
_POSITIVE_KEYS = {"epochs", "batch_size", "k", "trials", "eval_every",
                  "feature_dim", "g_hidden", "head_hidden", "n_source",
                  "n_target", "blob_classes", "embed_per_domain"}


def parse_config(path) -> RunConfig:
    """Parse and validate a key=value config file into a RunConfig."""
    cfg = RunConfig()
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in _INT_KEYS:
                try:
                    parsed = int(value)
                except ValueError:
                    raise ConfigError(
                        f"line {lineno}: invalid integer for {key}: {value!r}")
            elif key in _FLOAT_KEYS:
                try:
                    parsed = float(value)
                except ValueError:
                    raise ConfigError(
                        f"line {lineno}: invalid number for {key}: {value!r}")
            elif key in _STR_KEYS:
                parsed = value
            else:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            setattr(cfg, key, parsed)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if not cfg.variant:
        raise ConfigError("missing required config key 'variant'")
    if not cfg.dataset:
        raise ConfigError("missing required config key 'dataset'")
    try:
        Variant.parse(cfg.variant)
    except ContractError as e:
        raise ConfigError(str(e))
    if cfg.dataset not in DATASETS:
        raise ConfigError(
            f"unknown dataset {cfg.dataset!r}; valid values: {', '.join(DATASETS)}")
    for key in _POSITIVE_KEYS:
        value = getattr(cfg, key)
        if value is not None and value < 1:
            raise ConfigError(f"{key} must be a positive integer, got {value}")
    if cfg.eta0 <= 0:
        raise ConfigError(f"eta0 must be > 0, got {cfg.eta0}")
    if min(cfg.alpha, cfg.beta, cfg.gamma) < 0:
        raise ConfigError("alpha, beta and gamma must be >= 0")
    if not 0 <= cfg.momentum < 1:
        raise ConfigError(f"momentum must lie in [0, 1), got {cfg.momentum}")
    if not 0.0 < cfg.mcd_warmup < 1.0:
        raise ConfigError(f"mcd_warmup must lie in (0, 1), got {cfg.mcd_warmup}")
    if cfg.noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")
    if cfg.seed < 0:
        raise ConfigError("seed must be nonnegative")
    if cfg.dataset == "idx":
        if not cfg.source_images or not cfg.source_labels:
            raise ConfigError("idx dataset needs source_images and source_labels")
        if not cfg.target_images or not cfg.target_labels:
            raise ConfigError("idx dataset needs target_images and target_labels "
                              "(target labels are used for evaluation only)")


def _derived_seed(trial_seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(trial_seed), stream]).generate_state(1)[0])


def build_datasets(cfg: RunConfig, trial_seed: int
                   ) -> Tuple[DomainDataset, DomainDataset]:
    """Source/target pair for one trial, deterministic in trial_seed."""
    if cfg.dataset == "two_moons":
        source = gen_two_moons(cfg.n_source, cfg.noise_sigma,
                               _derived_seed(trial_seed, 0))
        raw_target = gen_two_moons(cfg.n_target, cfg.noise_sigma,
                                   _derived_seed(trial_seed, 1))
        target = domain_shift(raw_target, cfg.theta_degrees,
                              (cfg.translate_x, cfg.translate_y))
        return source, target
    if cfg.dataset == "blobs":
        return gen_blob_shift(cfg.n_source, cfg.blob_classes, cfg.separation,
                              (cfg.shift_x, cfg.shift_y),
                              _derived_seed(trial_seed, 0))
    source = load_idx(cfg.source_images, cfg.source_labels, "source")
    target = load_idx(cfg.target_images, cfg.target_labels, "target")
    return source, target


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))  # shortest round-trip decimal, '.' separator
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def _write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    mean = float(np.mean(values))
    std = 0.0 if len(values) < 2 else float(np.std(values, ddof=1))
    return mean, std


def run_experiment(cfg: RunConfig) -> int:
    """Train `trials` seeds, writing run_{i}.csv, checkpoints, a manifest,
    and a summary with mean/sample-std of the final target accuracy."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "INCOMPLETE"
    marker.write_text("experiment in progress or aborted\n")
    try:
        finals: List[Tuple[int, int, str, float, float]] = []
        for trial in range(cfg.trials):
            trial_seed = cfg.seed + trial
            source, target = build_datasets(cfg, trial_seed)
            model, records = train(cfg.train_config(trial_seed), source, target)
            _write_csv(out / f"run_{trial}.csv", MetricsRecord.COLUMNS,
                       [r.row() for r in records])
            model.save(out / f"checkpoint_{trial}.bin")
            checksum = dataset_checksum(source) + ":" + dataset_checksum(target)
            finals.append((trial, trial_seed, checksum,
                           records[-1].src_acc, records[-1].tgt_acc))
        _write_csv(out / "manifest.csv",
                   ("trial", "seed", "dataset_checksum", "final_src_acc",
                    "final_tgt_acc"), finals)
        mean, std = _mean_std([f[4] for f in finals])
        _write_csv(out / "summary.csv",
                   ("variant", "dataset", "trials", "mean_tgt_acc", "std_tgt_acc"),
                   [(cfg.variant, cfg.dataset, cfg.trials, mean, std)])
    except Exception as e:
        marker.write_text(f"experiment failed: {e}\n")
        print(f"error: {e}", file=sys.stderr)
        return 2
    marker.unlink()
    return 0


def export_embeddings(model: DualModel, source: DomainDataset,
                      target: DomainDataset, n_per_domain: int,
                      out_path) -> None:
    """Project transform-layer outputs of both domains to 2-D by PCA and
    write x,y,domain,label rows.

    The principal axes come from the top-2 eigenvectors of the centered
    covariance; each eigenvector's largest-magnitude loading is made
    positive so the projection is sign-deterministic.
    """
    if n_per_domain > min(source.n, target.n):
        raise ContractError(
            f"n_per_domain {n_per_domain} exceeds a dataset "
            f"({min(source.n, target.n)} samples)")

    def transform_out(ds: DomainDataset) -> np.ndarray:
        tape = ad.Tape()
        b = BoundComponents(tape, model.invariant)
        x = tape.leaf(ds.features[:n_per_domain])
        return b.transform.forward(b.extractor.forward(x)).data

    feats = np.vstack([transform_out(source), transform_out(target)])
    centered = feats - feats.mean(axis=0)
    cov = centered.T @ centered / max(feats.shape[0] - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    if eigvals[1] <= 1e-12 * max(eigvals[0], 1.0):
        raise ContractError(
            f"embedding covariance is rank-deficient (second eigenvalue "
            f"{eigvals[1]:.3e}); cannot project to 2-D")
    axes = eigvecs[:, :2]
    for j in range(2):
        if axes[np.argmax(np.abs(axes[:, j])), j] < 0:
            axes[:, j] = -axes[:, j]
    coords = centered @ axes

    rows = []
    for i, ds in ((0, source), (1, target)):
        for j in range(n_per_domain):
            label = "" if ds.labels is None else int(ds.labels[j])
            rows.append((coords[i * n_per_domain + j, 0],
                         coords[i * n_per_domain + j, 1], ds.domain_tag, label))
    _write_csv(out_path, ("x", "y", "domain", "label"), rows)


def ablation_matrix(configs: Sequence[RunConfig], out_dir) -> List[Dict]:
    """Run all seven variants over each dataset config with shared seeds.

    Returns one row per variant with per-dataset mean/std target accuracy,
    plus an `avg` of the means when several dataset configs are given;
    also writes ablation.csv under out_dir.
    """
    if isinstance(configs, RunConfig):
        configs = [configs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds_names = []
    for i, cfg in enumerate(configs):
        name = cfg.dataset if len(configs) == 1 else f"ds{i}_{cfg.dataset}"
        ds_names.append(name)

    table: List[Dict] = [{"variant": v} for v in VARIANT_ORDER]
    for name, cfg in zip(ds_names, configs):
        for row in table:
            sub = replace(cfg, variant=row["variant"],
                          out_dir=str(out / name / row["variant"]))
            status = run_experiment(sub)
            if status != 0:
                raise RuntimeError(
                    f"run failed for variant {row['variant']} on {name}")
            with open(Path(sub.out_dir) / "summary.csv") as f:
                summary = list(csv.DictReader(f))[0]
            row[f"{name}_mean"] = float(summary["mean_tgt_acc"])
            row[f"{name}_std"] = float(summary["std_tgt_acc"])
    header = ["variant"]
    for name in ds_names:
        header += [f"{name}_mean", f"{name}_std"]
    if len(ds_names) > 1:
        header.append("avg")
        for row in table:
            row["avg"] = float(np.mean([row[f"{n}_mean"] for n in ds_names]))
    _write_csv(out / "ablation.csv", header,
               [[row[h] for h in header] for row in table])
    return table


def _cmd_run(args) -> int:
    cfg = _load_cli_config(args)
    return run_experiment(cfg)


def _cmd_ablate(args) -> int:
    configs = []
    for path in args.config:
        cfg = parse_config(path)
        if args.seed is not None:
            cfg.seed = args.seed
        configs.append(cfg)
    out = args.out or configs[0].out_dir
    ablation_matrix(configs, out)
    return 0


def _cmd_embed(args) -> int:
    cfg = _load_cli_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source, target = build_datasets(cfg, cfg.seed)
    if args.checkpoint:
        model = DualModel.build(source.input_dim, cfg.feature_dim,
                                source.num_classes, cfg.seed,
                                g_hidden=(cfg.g_hidden,),
                                head_hidden=(cfg.head_hidden,))
        model.load(args.checkpoint)
    else:
        model, _ = train(cfg.train_config(cfg.seed), source, target)
    n = min(cfg.embed_per_domain, source.n, target.n)
    export_embeddings(model, source, target, n, out / "embeddings.csv")
    print(f"wrote {out / 'embeddings.csv'}")
    return 0


def _cmd_check_grad(args) -> int:
    ok = gradcheck.run_suite(trials_ops=args.trials, trials_losses=args.trials,
                             seed=args.seed or 0)
    print("gradient suite:", "PASS" if ok else "FAIL")
    return 0 if ok else 2


def _load_cli_config(args) -> RunConfig:
    cfg = parse_config(args.config)
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dualda",
        description="Dual-module adversarial domain adaptation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train one variant over several seeds")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.set_defaults(fn=_cmd_run)

    p_ablate = sub.add_parser("ablate", help="run the 7-variant ablation matrix")
    p_ablate.add_argument("--config", action="append", required=True,
                          help="dataset config; repeat for several datasets")
    p_ablate.add_argument("--out", default=None)
    p_ablate.add_argument("--seed", type=int, default=None)
    p_ablate.set_defaults(fn=_cmd_ablate)

    p_embed = sub.add_parser("embed", help="train and export a 2-D PCA embedding")
    p_embed.add_argument("--config", required=True)
    p_embed.add_argument("--out", default=None)
    p_embed.add_argument("--seed", type=int, default=None)
    p_embed.add_argument("--checkpoint", default=None,
                         help="load parameters instead of the fresh training result")
    p_embed.set_defaults(fn=_cmd_embed)

    p_grad = sub.add_parser("check-grad", help="finite-difference gradient suite")
    p_grad.add_argument("--trials", type=int, default=25)
    p_grad.add_argument("--seed", type=int, default=None)
    p_grad.set_defaults(fn=_cmd_check_grad)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (ContractError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
