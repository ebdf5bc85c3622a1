"""Training loop: pseudo-label, mix, forward, backward, momentum update."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import Tape, backward, soft_cross_entropy, softmax
from .datagen import MixBatch, SplitDataset, cross_set_mixup, one_hot, sample_beta, unmixed_batch
from .divergence import energy_distance_sq, mmd
from .errors import ConfigError, NumericError, ParseError, UsageError
from .model import (NetworkParams, NetworkSpec, ada_objective, forward_class,
                    forward_domain, forward_features, init_params)

ABLATIONS = {
    # name: (enable_alignment, enable_mixup)
    "baseline": (False, False),
    "dist": (True, False),
    "aug": (False, True),
    "full": (True, True),
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    lr_drop_epochs: tuple[int, ...] | None = None
    lr_drop_factor: float = 0.1
    weight_decay: float = 0.0
    alpha: float = 1.0
    gamma: float = 1.0
    grl_scale: float = 1.0
    seed: int = 0
    enable_alignment: bool = True
    enable_mixup: bool = True
    track_divergence: bool = True

    def __post_init__(self):
        if self.lr_drop_epochs is not None:
            object.__setattr__(self, "lr_drop_epochs", tuple(int(e) for e in self.lr_drop_epochs))
        checks = [
            ("epochs", self.epochs >= 1),
            ("batch_size", self.batch_size >= 1),
            ("lr", math.isfinite(self.lr) and self.lr > 0),
            ("momentum", 0 <= self.momentum < 1),
            ("lr_drop_factor", 0 < self.lr_drop_factor <= 1),
            ("weight_decay", self.weight_decay >= 0),
            ("alpha", math.isfinite(self.alpha) and self.alpha > 0),
            ("gamma", math.isfinite(self.gamma) and self.gamma >= 0),
            ("grl_scale", math.isfinite(self.grl_scale) and self.grl_scale >= 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"invalid {name}: {getattr(self, name)!r}", field=name)

    @property
    def drop_epochs(self) -> tuple[int, ...]:
        if self.lr_drop_epochs is not None:
            return self.lr_drop_epochs
        return (self.epochs // 2, (3 * self.epochs) // 4)

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.drop_epochs if epoch >= e)
        return self.lr * self.lr_drop_factor ** drops

    @property
    def ablation(self) -> str:
        for name, flags in ABLATIONS.items():
            if flags == (self.enable_alignment, self.enable_mixup):
                return name
        raise AssertionError("unreachable")

    def with_ablation(self, name: str) -> "TrainConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}",
                              field="ablation")
        align, mix = ABLATIONS[name]
        return replace(self, enable_alignment=align, enable_mixup=mix)


@dataclass
class OptimizerState:
    buffers: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "OptimizerState":
        return cls([np.zeros_like(a) for a in params.arrays()])


def sgd_momentum_update(params: NetworkParams, grads, state: OptimizerState, lr: float,
                        momentum: float, weight_decay: float = 0.0):
    """``v <- momentum * v + grad``; ``p <- p - lr * v``."""
    new_arrays, new_buffers = [], []
    for p, g, v in zip(params.arrays(), grads, state.buffers):
        if weight_decay:
            g = g + weight_decay * p
        v = momentum * v + g
        new_buffers.append(v)
        new_arrays.append(p - lr * v)
    for a in new_arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("parameter update produced NaN or Inf")
    return params.replace(new_arrays), OptimizerState(new_buffers)


def pseudo_labels(params: NetworkParams, spec: NetworkSpec, x_u) -> np.ndarray:
    """Softmax class predictions of the current model; nothing is recorded."""
    return softmax(forward_class(params, spec, x_u).values)


def effective_spec(spec: NetworkSpec, config: TrainConfig) -> NetworkSpec:
    gamma = config.gamma if config.enable_alignment else 0.0
    return replace(spec, gamma=gamma, grl_scale=config.grl_scale)


def build_batch(params: NetworkParams, spec: NetworkSpec, config: TrainConfig,
                x_l, y_l, x_u, rng: np.random.Generator) -> MixBatch:
    """Training batch for the configured ablation.

    ``y_l`` is one-hot.  Mixup pairs the b-th labeled and unlabeled samples,
    so both batches must have equal length when mixup is on.
    """
    if config.enable_mixup:
        y_u = pseudo_labels(params, spec, x_u)
        lam = sample_beta(config.alpha, len(x_l), rng)
        return cross_set_mixup(x_l, y_l, x_u, y_u, lam)
    if config.enable_alignment:
        y_u = pseudo_labels(params, spec, x_u)
        return unmixed_batch(x_l, y_l, x_u, y_u)
    n = len(x_l)
    return MixBatch(np.asarray(x_l, dtype=np.float64), np.asarray(y_l, dtype=np.float64),
                    np.tile([1.0, 0.0], (n, 1)), np.ones(n))


def train_step(params: NetworkParams, opt_state: OptimizerState, config: TrainConfig,
               spec: NetworkSpec, labeled_batch, unlabeled_batch, rng: np.random.Generator,
               lr: float | None = None):
    """One update on a labeled ``(x, one_hot_y)`` batch and an unlabeled batch.

    Returns ``(params, opt_state, loss)``.  ``spec`` supplies the architecture;
    ``gamma`` and ``grl_scale`` come from ``config``.
    """
    x_l, y_l = labeled_batch
    if len(x_l) == 0:
        raise UsageError("labeled batch is empty")
    if (config.enable_mixup or config.enable_alignment) and len(unlabeled_batch) == 0:
        raise UsageError("unlabeled batch is empty")
    spec = effective_spec(spec, config)
    batch = build_batch(params, spec, config, x_l, y_l, unlabeled_batch, rng)
    tape = Tape()
    tensors = params.tensors()
    loss = ada_objective(params, spec, batch, tape)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    grads = backward(loss, tape, tensors)
    params, opt_state = sgd_momentum_update(
        params, grads, opt_state, config.lr if lr is None else lr, config.momentum,
        config.weight_decay)
    return params, opt_state, value


def predict(params: NetworkParams, spec: NetworkSpec, x) -> np.ndarray:
    """Argmax class; ties go to the lowest index."""
    return np.argmax(forward_class(params, spec, x).values, axis=1)


def evaluate_error(params: NetworkParams, spec: NetworkSpec, x, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise UsageError("cannot evaluate on an empty test set")
    return float(np.mean(predict(params, spec, x) != y))


def feature_divergence(params: NetworkParams, spec: NetworkSpec, x_l, x_u) -> tuple[float, float]:
    """(MMD, energy distance) between feature sets of labeled and unlabeled inputs.

    The MMD bandwidth is the median heuristic on the pooled features.
    """
    f_l = forward_features(params, spec, x_l).values
    f_u = forward_features(params, spec, x_u).values
    return mmd(f_l, f_u), energy_distance_sq(f_l, f_u, method="moments")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_err: float
    test_err: float | None
    mmd: float | None
    energy_sq: float | None


CSV_FIELDS = ["epoch", "loss", "train_err", "test_err", "mmd", "energy_sq"]


@dataclass
class MetricsReport:
    rows: list[EpochMetrics] = field(default_factory=list)
    initial_mmd: float | None = None
    initial_energy_sq: float | None = None

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def final(self) -> EpochMetrics:
        return self.rows[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([r.epoch] + ["" if v is None else repr(float(v))
                                    for v in (r.loss, r.train_err, r.test_err, r.mmd,
                                              r.energy_sq)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != CSV_FIELDS:
            raise ParseError(f"expected header {','.join(CSV_FIELDS)}", line=1)
        out = []
        for lineno, r in enumerate(rows[1:], start=2):
            if len(r) != len(CSV_FIELDS):
                raise ParseError("wrong number of fields", line=lineno)
            try:
                vals = [None if v == "" else float(v) for v in r[1:]]
                out.append(EpochMetrics(int(r[0]), *vals))
            except (ValueError, TypeError):
                raise ParseError(f"malformed metrics row {r!r}", line=lineno) from None
        return cls(out)

    def to_dict(self) -> dict:
        return {
            "initial": {"mmd": self.initial_mmd, "energy_sq": self.initial_energy_sq},
            "epochs": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        init = doc.get("initial", {})
        return cls([EpochMetrics(**r) for r in doc["epochs"]], init.get("mmd"),
                   init.get("energy_sq"))


@dataclass
class LabeledSet:
    x: np.ndarray
    y: np.ndarray


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "labeled", "unlabeled", "mix")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.Generator(np.random.PCG64(s)) for n, s in zip(names, children)}


def fit(dataset: SplitDataset, spec: NetworkSpec, config: TrainConfig,
        test_set: LabeledSet | tuple | None = None,
        params: NetworkParams | None = None) -> tuple[NetworkParams, MetricsReport]:
    """Train for ``config.epochs`` passes over the unlabeled set.

    Each epoch shuffles the unlabeled samples into ``ceil(m / batch_size)``
    batches and pairs each with a same-sized labeled batch drawn with
    replacement.  Without unlabeled data (supervised baseline) an epoch is
    ``ceil(n / batch_size)`` steps.
    """
    if dataset.dim != spec.input_dim or dataset.num_classes != spec.num_classes:
        raise ConfigError("dataset and network spec disagree on input dim or classes")
    if (config.enable_alignment or config.enable_mixup) and dataset.n_unlabeled == 0:
        raise ConfigError("alignment and mixup need unlabeled samples", field="ablation")
    if test_set is not None and not isinstance(test_set, LabeledSet):
        test_set = LabeledSet(*test_set)

    rng = _streams(config.seed)
    if params is None:
        params = init_params(spec, rng["init"])
    opt = OptimizerState.zeros_like(params)
    x_l, y_l = dataset.labeled_x, dataset.labeled_y
    y_l_hot = one_hot(y_l, dataset.num_classes)
    x_u = dataset.unlabeled_x
    m = dataset.n_unlabeled
    pass_size = m if m else dataset.n_labeled
    steps = math.ceil(pass_size / config.batch_size)

    report = MetricsReport()
    if config.track_divergence and m:
        report.initial_mmd, report.initial_energy_sq = feature_divergence(params, spec, x_l, x_u)

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng["unlabeled"].permutation(pass_size)
        losses = []
        for s in range(steps):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            pick = rng["labeled"].integers(0, dataset.n_labeled, len(idx))
            unl = x_u[idx] if m else x_u[:0]
            params, opt, loss = train_step(params, opt, config, spec, (x_l[pick], y_l_hot[pick]),
                                           unl, rng["mix"], lr=lr)
            losses.append(loss)
        divergence = (None, None)
        if config.track_divergence and m:
            divergence = feature_divergence(params, spec, x_l, x_u)
        test_err = None
        if test_set is not None:
            test_err = evaluate_error(params, spec, test_set.x, test_set.y)
        report.rows.append(EpochMetrics(epoch, float(np.mean(losses)),
                                        evaluate_error(params, spec, x_l, y_l), test_err,
                                        *divergence))
    return params, report


def _halves(x: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(len(x))
    cut = len(x) // 2
    return x[order[:cut]], x[order[cut:]]


def domain_probe_loss(params: NetworkParams, spec: NetworkSpec, x_l, x_u,
                      rng: np.random.Generator, steps: int = 300, lr: float = 0.1) -> float:
    """Held-out loss of a fresh discriminator trained on frozen features.

    Both feature sets are split in half.  One half of each trains a new
    discriminator head, and the class-balanced domain loss is measured on the
    other halves.  Higher means the two sets are harder to tell apart.
    """
    f_l = forward_features(params, spec, x_l).values
    f_u = forward_features(params, spec, x_u).values
    if len(f_l) < 2 or len(f_u) < 2:
        raise UsageError("domain probe needs at least two samples in each set")
    fit_l, eval_l = _halves(f_l, rng)
    fit_u, eval_u = _halves(f_u, rng)
    head_spec = NetworkSpec(input_dim=spec.feature_dim, num_classes=spec.num_classes,
                            feature_layers=(), discriminator_layers=spec.discriminator_layers)
    head = init_params(head_spec, rng)
    opt = OptimizerState.zeros_like(head)

    def balanced(p, a, b, tape=None):
        x = np.concatenate([a, b])
        targets = np.concatenate([np.tile([1.0, 0.0], (len(a), 1)),
                                  np.tile([0.0, 1.0], (len(b), 1))])
        # each domain contributes half of the loss regardless of its size
        weights = np.concatenate([np.full(len(a), len(x) / (2 * len(a))),
                                  np.full(len(b), len(x) / (2 * len(b)))])
        logits = forward_domain(p, head_spec, x, tape, reverse=False)
        return soft_cross_entropy(logits, targets, weights, tape)

    for _ in range(steps):
        tape = Tape()
        loss = balanced(head, fit_l, fit_u, tape)
        grads = backward(loss, tape, head.tensors())
        head, opt = sgd_momentum_update(head, grads, opt, lr, 0.9)
    return balanced(head, eval_l, eval_u).item()
