"""Feature extractor, classifier and gradient-reversed domain discriminator.

The network has three parts sharing one input pipeline::

    x -> g (dense+relu)* -> features -+-> f (dense)                 -> class logits
                                      +-> GRL -> h (dense+relu)* -> dense -> domain logits
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, add, dense, grad_reverse, relu, scale, soft_cross_entropy
from .datagen import MixBatch
from .errors import ConfigError, DimensionError, ParseError

CHECKPOINT_FORMAT = "adassl-params"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int = 2
    num_classes: int = 2
    feature_layers: tuple[int, ...] = (64, 64)
    discriminator_layers: tuple[int, ...] = (64, 64)
    grl_scale: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "feature_layers", tuple(int(w) for w in self.feature_layers))
        object.__setattr__(self, "discriminator_layers",
                           tuple(int(w) for w in self.discriminator_layers))
        for name in ("input_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}", field=name)
        for name in ("feature_layers", "discriminator_layers"):
            if any(w < 1 for w in getattr(self, name)):
                raise ConfigError(f"{name} widths must be >= 1", field=name)
        for name in ("grl_scale", "gamma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be a non-negative number, got {v}", field=name)

    @property
    def feature_dim(self) -> int:
        return self.feature_layers[-1] if self.feature_layers else self.input_dim


Layer = tuple[Tensor, Tensor]


@dataclass
class NetworkParams:
    feature: list[Layer] = field(default_factory=list)
    classifier: Layer | None = None
    discriminator: list[Layer] = field(default_factory=list)

    def named(self) -> list[tuple[str, Tensor]]:
        """All parameter tensors in a fixed order with stable names."""
        out = []
        for i, (w, b) in enumerate(self.feature):
            out += [(f"feature.{i}.weight", w), (f"feature.{i}.bias", b)]
        w, b = self.classifier
        out += [("classifier.weight", w), ("classifier.bias", b)]
        for i, (w, b) in enumerate(self.discriminator):
            out += [(f"discriminator.{i}.weight", w), (f"discriminator.{i}.bias", b)]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def arrays(self) -> list[np.ndarray]:
        return [t.values for t in self.tensors()]

    def replace(self, arrays) -> "NetworkParams":
        """New params with the same structure holding ``arrays``."""
        arrays = list(arrays)
        it = iter(arrays)

        def take(layers):
            return [(_param(next(it), w.name), _param(next(it), b.name)) for w, b in layers]

        feature = take(self.feature)
        (classifier,) = take([self.classifier])
        discriminator = take(self.discriminator)
        return NetworkParams(feature, classifier, discriminator)

    def equals(self, other: "NetworkParams") -> bool:
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _param(values, name=None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def _he_layer(fan_in: int, fan_out: int, rng: np.random.Generator, name: str) -> Layer:
    limit = math.sqrt(6.0 / fan_in)  # uniform(-l, l) has variance 2 / fan_in
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return _param(w, f"{name}.weight"), _param(np.zeros(fan_out), f"{name}.bias")


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> NetworkParams:
    """He-scaled uniform weights and zero biases."""
    feature = []
    width = spec.input_dim
    for i, out in enumerate(spec.feature_layers):
        feature.append(_he_layer(width, out, rng, f"feature.{i}"))
        width = out
    classifier = _he_layer(width, spec.num_classes, rng, "classifier")
    disc = []
    for i, out in enumerate(spec.discriminator_layers):
        disc.append(_he_layer(width, out, rng, f"discriminator.{i}"))
        width = out
    disc.append(_he_layer(width, 2, rng, f"discriminator.{len(spec.discriminator_layers)}"))
    return NetworkParams(feature, classifier, disc)


def _as_input(inputs, spec: NetworkSpec) -> Tensor:
    x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    if x.values.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"inputs must be [B, {spec.input_dim}], got {x.shape}")
    return x


def forward_features(params: NetworkParams, spec: NetworkSpec, inputs,
                     tape: Tape | None = None) -> Tensor:
    h = _as_input(inputs, spec)
    for w, b in params.feature:
        h = relu(dense(h, w, b, tape), tape)
    return h


def _classify(params: NetworkParams, feats: Tensor, tape: Tape | None) -> Tensor:
    w, b = params.classifier
    return dense(feats, w, b, tape)


def _discriminate(params: NetworkParams, feats: Tensor, tape: Tape | None) -> Tensor:
    h = feats
    *hidden, (w_out, b_out) = params.discriminator
    for w, b in hidden:
        h = relu(dense(h, w, b, tape), tape)
    return dense(h, w_out, b_out, tape)


def forward_class(params: NetworkParams, spec: NetworkSpec, inputs,
                  tape: Tape | None = None) -> Tensor:
    """Un-normalized class logits ``f(g(x))``."""
    return _classify(params, forward_features(params, spec, inputs, tape), tape)


def forward_domain(params: NetworkParams, spec: NetworkSpec, inputs,
                   tape: Tape | None = None, reverse: bool = True) -> Tensor:
    """Domain logits ``h(GRL(g(x)))``; ``reverse=False`` drops the GRL."""
    feats = forward_features(params, spec, inputs, tape)
    if reverse:
        feats = grad_reverse(feats, spec.grl_scale, tape)
    return _discriminate(params, feats, tape)


def ada_objective(params: NetworkParams, spec: NetworkSpec, batch: MixBatch,
                  tape: Tape | None = None) -> Tensor:
    """Mixing-weighted class loss plus ``gamma`` times the domain loss.

    The domain term goes through the gradient reverse layer, so minimizing
    the total trains ``h`` to separate labeled from unlabeled features while
    pushing ``g`` to make them indistinguishable.  With ``gamma == 0`` the
    discriminator is left out of the graph entirely.
    """
    feats = forward_features(params, spec, batch.inputs, tape)
    class_loss = soft_cross_entropy(_classify(params, feats, tape), batch.class_targets,
                                    batch.lambdas, tape)
    if spec.gamma == 0:
        return class_loss
    dom_logits = _discriminate(params, grad_reverse(feats, spec.grl_scale, tape), tape)
    dom_loss = soft_cross_entropy(dom_logits, batch.domain_targets, None, tape)
    return add(class_loss, scale(dom_loss, spec.gamma, tape), tape)


def spec_to_dict(spec: NetworkSpec) -> dict:
    d = asdict(spec)
    d["feature_layers"] = list(spec.feature_layers)
    d["discriminator_layers"] = list(spec.discriminator_layers)
    return d


def save_params(params: NetworkParams, spec: NetworkSpec, path) -> None:
    """JSON checkpoint; floats are written with repr so reloading is exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": spec_to_dict(spec),
        "layers": [
            {"name": name, "shape": list(t.shape), "values": t.values.ravel().tolist()}
            for name, t in params.named()
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_params(path) -> tuple[NetworkParams, NetworkSpec]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"checkpoint is not valid JSON: {exc.msg}", line=exc.lineno) from None
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint format/version in {path}")
    spec = NetworkSpec(**doc["spec"])
    template = init_params(spec, np.random.default_rng(0))
    expected = template.named()
    layers = doc["layers"]
    if [entry["name"] for entry in layers] != [n for n, _ in expected]:
        raise ParseError("checkpoint layer names do not match its network spec")
    arrays = []
    for entry, (name, t) in zip(layers, expected):
        arr = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != t.shape:
            raise ParseError(f"layer {name} has shape {arr.shape}, expected {t.shape}")
        arrays.append(arr)
    return template.replace(arrays), spec
