"""Command-line entry point: ``adassl train|mmd-curve|prop-check|kde``.

Exit codes: 0 on success, 2 for usage or configuration problems, 3 when a
computation fails numerically.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .datagen import SplitDataset, make_rng, make_two_moons, read_dataset_csv, split_ssl
from .divergence import (KernelSpec, kde_density, mixup_energy_ratio, mmd_exceedance,
                         mmd_vs_labeled_size, write_density_csv, write_mmd_curve_csv)
from .errors import AdaError, ConfigError, NumericError, UsageError
from .model import NetworkSpec, forward_features, load_params, save_params
from .trainer import ABLATIONS, LabeledSet, TrainConfig, fit

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
PRESETS = ("twomoon-ada", "twomoon-baseline")
DEFAULT_SIZES = (4, 8, 16, 32, 64, 128, 256, 512, 1000)
MIN_PROP_TRIALS = 100


@dataclass
class ExperimentConfig:
    """Every knob a command reads, as one flat record.

    Defaults equal the ``twomoon-ada`` preset.

    Training and network fields are validated by building the
    :class:`TrainConfig` and :class:`NetworkSpec` they feed.
    """

    ablation: str = "full"
    seed: int = 0
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    lr_drop_epochs: list[int] | None = None
    lr_drop_factor: float = 0.1
    weight_decay: float = 0.003
    alpha: float = 2.0
    gamma: float = 0.1
    grl_scale: float = 1.0
    track_divergence: bool = True
    feature_layers: list[int] = field(default_factory=lambda: [16, 16])
    discriminator_layers: list[int] = field(default_factory=lambda: [16, 16])
    # data
    n_labeled: int = 6
    n_unlabeled: int = 1000
    noise_sd: float = 0.1
    test_size: int = 1000
    data: str | None = None
    # divergence experiments
    pool_size: int = 5000
    sizes: list[int] = field(default_factory=lambda: list(DEFAULT_SIZES))
    trials: int | None = None
    prop_n: int = 50
    prop_m: int = 1000
    epsilons: list[float] = field(default_factory=lambda: [0.3, 0.5, 0.8])
    kernel_bound: float = 1.0
    n_mix: int = 100_000
    # kde
    checkpoint: str | None = None
    dims: list[int] = field(default_factory=lambda: [0, 1, 2])
    grid_size: int = 256
    # output
    out: str = "out"
    format: str = "csv"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {sorted(ABLATIONS)}, got "
                              f"{self.ablation!r}", field="ablation")
        if self.format not in ("csv", "json"):
            raise ConfigError(f"format must be csv or json, got {self.format!r}", field="format")
        positive = ("n_labeled", "test_size", "pool_size", "prop_n", "prop_m", "n_mix",
                    "grid_size")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}", field=name)
        if self.n_unlabeled < 0:
            raise ConfigError("n_unlabeled must be >= 0", field="n_unlabeled")
        if not self.noise_sd >= 0:
            raise ConfigError(f"noise_sd must be non-negative, got {self.noise_sd}",
                              field="noise_sd")
        if not self.sizes or min(self.sizes) < 1:
            raise ConfigError("sizes must be a non-empty list of positive integers",
                              field="sizes")
        if self.trials is not None and self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}", field="trials")
        if any(e < 0 for e in self.epsilons):
            raise ConfigError("epsilons must be non-negative", field="epsilons")
        if not self.kernel_bound > 0:
            raise ConfigError("kernel_bound must be positive", field="kernel_bound")
        if not self.dims or any(d < 0 for d in self.dims):
            raise ConfigError("dims must be non-empty, non-negative feature indices",
                              field="dims")
        self.train_config()
        self.network_spec()

    @classmethod
    def check_keys(cls, values: dict, source: str = "config") -> None:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown {source} key(s): {', '.join(unknown)}", field=unknown[0])

    @classmethod
    def from_dict(cls, values: dict, source: str = "config") -> "ExperimentConfig":
        cls.check_keys(values, source)
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(f"bad value in {source}: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            lr_drop_epochs=self.lr_drop_epochs, lr_drop_factor=self.lr_drop_factor,
            weight_decay=self.weight_decay, alpha=self.alpha, gamma=self.gamma,
            grl_scale=self.grl_scale, seed=self.seed,
            track_divergence=self.track_divergence).with_ablation(self.ablation)

    def network_spec(self, input_dim: int = 2, num_classes: int = 2) -> NetworkSpec:
        return NetworkSpec(input_dim=input_dim, num_classes=num_classes,
                           feature_layers=tuple(self.feature_layers),
                           discriminator_layers=tuple(self.discriminator_layers),
                           grl_scale=self.grl_scale, gamma=self.gamma)


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}",
                          field="preset")
    text = resources.files("adassl").joinpath("presets", f"{name}.json").read_text()
    return json.loads(text)


def _read_json_config(path: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON (line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return doc


def resolve_config(preset: str | None, config_path: str | None,
                   overrides: dict) -> ExperimentConfig:
    """Merge preset, then config file, then flags (later wins)."""
    merged: dict = {}
    if preset:
        merged.update(load_preset(preset))
    if config_path:
        doc = _read_json_config(config_path)
        ExperimentConfig.check_keys(doc, source=f"config file {config_path}")
        merged.update(doc)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(merged)


# ---------------------------------------------------------------- data


def experiment_data(cfg: ExperimentConfig) -> tuple[SplitDataset, LabeledSet]:
    """Training split and test set for ``cfg.seed``.

    The pool and its split come from one stream seeded by ``seed``; the
    test set uses an independent stream so it never overlaps the pool.
    """
    if cfg.data:
        ds = read_dataset_csv(cfg.data)
        return ds, LabeledSet(ds.labeled_x, ds.labeled_y)
    rng = make_rng(cfg.seed)
    pool = make_two_moons(cfg.n_labeled + cfg.n_unlabeled, cfg.noise_sd, rng)
    ds = split_ssl(pool, cfg.n_labeled, rng)
    test = make_two_moons(cfg.test_size, cfg.noise_sd,
                          make_rng(np.random.SeedSequence([cfg.seed, 1])))
    return ds, LabeledSet(test.labeled_x, test.labeled_y)


# --------------------------------------------------------------- output


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write(path, lambda tmp: Path(tmp).write_text(text))


def atomic_write(path: Path, writer) -> None:
    """Run ``writer(tmp_path)`` and move the result over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


# ------------------------------------------------------------- commands


def cmd_train(cfg: ExperimentConfig) -> int:
    ds, test = experiment_data(cfg)
    spec = cfg.network_spec(ds.dim, ds.num_classes)
    params, report = fit(ds, spec, cfg.train_config(), test)
    out = Path(cfg.out)
    if cfg.format == "csv":
        atomic_write_text(out / "metrics.csv", report.to_csv())
    else:
        atomic_write_text(out / "metrics.json", report.to_json())
    atomic_write(out / "params.ckpt", lambda tmp: save_params(params, spec, tmp))
    final = report.final
    summary = {
        "ablation": cfg.ablation,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "initial": {"mmd": report.initial_mmd, "energy_sq": report.initial_energy_sq},
        "final": asdict(final),
    }
    atomic_write_text(out / "summary.json", _dump_json(summary))
    return EXIT_OK


def cmd_mmd_curve(cfg: ExperimentConfig) -> int:
    trials = 100 if cfg.trials is None else cfg.trials
    pool = make_two_moons(cfg.pool_size, cfg.noise_sd, make_rng(cfg.seed)).labeled_x
    rows = mmd_vs_labeled_size(pool, cfg.sizes, trials, KernelSpec(bound=cfg.kernel_bound),
                               make_rng(np.random.SeedSequence([cfg.seed, 2])),
                               n_unlabeled=cfg.n_unlabeled)
    atomic_write(Path(cfg.out) / "mmd_curve.csv", lambda tmp: write_mmd_curve_csv(rows, tmp))
    return EXIT_OK


def cmd_prop_check(cfg: ExperimentConfig) -> int:
    """Mixup energy ratio on the training split, then MMD tail rates on a fresh pool."""
    trials = 1000 if cfg.trials is None else cfg.trials
    if trials < MIN_PROP_TRIALS:
        raise ConfigError(f"trials must be >= {MIN_PROP_TRIALS} for a meaningful rate, got "
                          f"{trials}", field="trials")
    ds, _ = experiment_data(cfg)
    ratio = mixup_energy_ratio(ds.labeled_x, ds.unlabeled_x, cfg.alpha, cfg.n_mix,
                               make_rng(np.random.SeedSequence([cfg.seed, 4])))
    prop2 = {"alpha": cfg.alpha, "n_mix": cfg.n_mix, "n_labeled": ds.n_labeled,
             "n_unlabeled": ds.n_unlabeled, "ratio": ratio, "deviation": ratio - 0.25}
    pool = make_two_moons(cfg.pool_size, cfg.noise_sd, make_rng(cfg.seed)).labeled_x
    rows = mmd_exceedance(pool, cfg.prop_n, cfg.prop_m, cfg.epsilons, trials,
                          KernelSpec(bound=cfg.kernel_bound),
                          make_rng(np.random.SeedSequence([cfg.seed, 3])))
    prop1 = {
        "n": cfg.prop_n, "m": cfg.prop_m, "trials": trials, "kernel_bound": cfg.kernel_bound,
        "rows": [{**asdict(r), "holds": r.holds} for r in rows],
    }
    out = Path(cfg.out)
    atomic_write_text(out / "prop1.json", _dump_json(prop1))
    atomic_write_text(out / "prop2.json", _dump_json(prop2))
    return EXIT_OK


def cmd_kde(cfg: ExperimentConfig) -> int:
    if not cfg.checkpoint:
        raise UsageError("kde needs --checkpoint")
    if not os.path.isfile(cfg.checkpoint):
        raise UsageError(f"checkpoint not found: {cfg.checkpoint}")
    params, spec = load_params(cfg.checkpoint)
    ds, _ = experiment_data(cfg)
    if ds.dim != spec.input_dim:
        raise UsageError(f"checkpoint expects {spec.input_dim}-d inputs, data is {ds.dim}-d")
    if ds.n_unlabeled == 0:
        raise UsageError("kde needs unlabeled samples")
    if max(cfg.dims) >= spec.feature_dim:
        raise ConfigError(f"dims must be < feature width {spec.feature_dim}", field="dims")
    sets = {"labeled": forward_features(params, spec, ds.labeled_x).values,
            "unlabeled": forward_features(params, spec, ds.unlabeled_x).values}
    out = Path(cfg.out)
    for d in cfg.dims:
        # one grid per dimension so the two curves are directly comparable
        column = np.concatenate([f[:, d] for f in sets.values()])
        pad = 4 * max(kde_density(f[:, d]).bandwidth for f in sets.values())
        grid = np.linspace(column.min() - pad, column.max() + pad, cfg.grid_size)
        for name, feats in sets.items():
            curve = kde_density(feats[:, d], grid)
            atomic_write(out / f"kde_{name}_{d}.csv",
                         lambda tmp, c=curve: write_density_csv(c, tmp))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "mmd-curve": cmd_mmd_curve,
    "prop-check": cmd_prop_check,
    "kde": cmd_kde,
}


# ------------------------------------------------------------- parsing


def parse_seed_range(text: str) -> list[int]:
    """``"3..6"`` -> ``[3, 4, 5, 6]`` (inclusive)."""
    try:
        lo, hi = (int(p) for p in text.split(".."))
    except ValueError:
        raise UsageError(f"--seeds expects a..b, got {text!r}") from None
    if hi < lo:
        raise UsageError(f"--seeds range is empty: {text!r}")
    return list(range(lo, hi + 1))


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adassl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with ExperimentConfig keys")
        p.add_argument("--preset", choices=PRESETS)
        p.add_argument("--seed", type=int)
        p.add_argument("--seeds", help="inclusive range a..b; one output subdirectory per seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--data", help="dataset CSV instead of generated two-moon data")
        p.add_argument("--n-labeled", dest="n_labeled", type=int)
        p.add_argument("--noise-sd", dest="noise_sd", type=float)
        p.add_argument("--alpha", type=float)
        if name == "train":
            p.add_argument("--ablation", choices=sorted(ABLATIONS))
            p.add_argument("--gamma", type=float)
            p.add_argument("--grl-scale", dest="grl_scale", type=float)
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--format", choices=("csv", "json"))
        if name in ("mmd-curve", "prop-check"):
            p.add_argument("--trials", type=int)
            p.add_argument("--pool-size", dest="pool_size", type=int)
        if name == "mmd-curve":
            p.add_argument("--sizes", type=_int_list, help="comma-separated labeled sizes")
        if name == "prop-check":
            p.add_argument("--epsilons", type=_float_list)
            p.add_argument("--n-mix", dest="n_mix", type=int)
        if name == "kde":
            p.add_argument("--checkpoint")
            p.add_argument("--dims", type=_int_list)
    return parser


_NON_CONFIG = {"command", "config", "preset", "seeds"}


def _run_one(command: str, cfg: ExperimentConfig) -> int:
    try:
        return COMMANDS[command](cfg)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AdaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    try:
        cfg = resolve_config(args.preset, args.config, overrides)
        seeds = parse_seed_range(args.seeds) if args.seeds else None
    except (AdaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if seeds is None:
        return _run_one(args.command, cfg)

    configs = [replace(cfg, seed=s, out=str(Path(cfg.out) / f"seed_{s}")) for s in seeds]
    workers = min(len(configs), os.cpu_count() or 1)
    if workers == 1:
        codes = [_run_one(args.command, c) for c in configs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            codes = list(pool.map(_run_one, [args.command] * len(configs), configs))
    return max(codes)


if __name__ == "__main__":
    sys.exit(main())
