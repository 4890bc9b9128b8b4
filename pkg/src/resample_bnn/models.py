"""Declarative model specs binding deterministic and flipout layers.

A ModelSpec is data, not code: the on-disk format is line-oriented,
``layer <kind> key=value ...`` after ``input``/``classes`` headers, so
experiments can vary the architecture without touching the library. The
baseline and Bayesian variants are built from the same spec; the Bayesian
one swaps every parameterized layer for its flipout twin and therefore has
exactly twice the parameter count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .layers import (ConvLayer, DenseLayer, FlattenLayer, MaxPoolLayer,
                     ReluLayer, TanhLayer)
from .rng import substream
from .tensor import Tensor, as_tensor
from .variational import (FlipoutConv, FlipoutDense, GaussianVariational,
                          PriorSpec, UNIT_GAUSSIAN_PRIOR)

CLASS_NAMES = ("original", "rescaled")
LABEL_ORIGINAL = 0
LABEL_RESCALED = 1

RHO_INIT = -5.0  # softplus(-5) ~ 0.0067: near-deterministic early training

PARAM_KINDS = ("conv", "constrained_conv", "dense")
KINDS = PARAM_KINDS + ("relu", "tanh", "maxpool", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: int = 0
    stride: int = 1
    padding: str = "valid"
    window: int = 0
    units: int = 0


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    patch_size: int = 64
    classes: int = 2


def default_spec(patch_size: int = 64) -> ModelSpec:
    """The stock architecture: constrained residual extractor, two strided
    conv/pool stages, and a small dense head."""
    return ModelSpec(layers=(
        LayerSpec("constrained_conv", filters=3, kernel=5),
        LayerSpec("conv", filters=16, kernel=3, stride=2),
        LayerSpec("relu"),
        LayerSpec("maxpool", window=2, stride=2),
        LayerSpec("conv", filters=32, kernel=3, stride=2),
        LayerSpec("relu"),
        LayerSpec("maxpool", window=2, stride=2),
        LayerSpec("flatten"),
        LayerSpec("dense", units=128),
        LayerSpec("relu"),
        LayerSpec("dense", units=2),
    ), patch_size=patch_size, classes=2)


def serialize_spec(spec: ModelSpec) -> str:
    lines = [f"input {spec.patch_size}", f"classes {spec.classes}"]
    for ls in spec.layers:
        if ls.kind in ("conv", "constrained_conv"):
            lines.append(f"layer {ls.kind} filters={ls.filters} kernel={ls.kernel} "
                         f"stride={ls.stride} padding={ls.padding}")
        elif ls.kind == "maxpool":
            lines.append(f"layer maxpool window={ls.window} stride={ls.stride}")
        elif ls.kind == "dense":
            lines.append(f"layer dense units={ls.units}")
        else:
            lines.append(f"layer {ls.kind}")
    return "\n".join(lines) + "\n"


def parse_spec(text: str) -> ModelSpec:
    patch_size = None
    classes = None
    layers: list[LayerSpec] = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if head == "input":
            patch_size = int(tokens[1])
        elif head == "classes":
            classes = int(tokens[1])
        elif head == "layer":
            kind = tokens[1]
            if kind not in KINDS:
                raise ValueError(f"line {ln}: unknown layer kind {kind!r}")
            kwargs = {}
            for tok in tokens[2:]:
                key, _, value = tok.partition("=")
                if key not in ("filters", "kernel", "stride", "padding",
                               "window", "units"):
                    raise ValueError(f"line {ln}: unknown layer field {key!r}")
                kwargs[key] = value if key == "padding" else int(value)
            layers.append(LayerSpec(kind, **kwargs))
        else:
            raise ValueError(f"line {ln}: unknown directive {head!r}")
    if patch_size is None or classes is None:
        raise ValueError("spec must declare 'input <patch>' and 'classes <n>'")
    return ModelSpec(tuple(layers), patch_size=patch_size, classes=classes)


def load_spec(path) -> ModelSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_spec(fh.read())


def spec_output_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Propagate (C,H,W)/(D,) shapes through the stack, validating geometry."""
    shapes = []
    shape: tuple[int, ...] = (1, spec.patch_size, spec.patch_size)
    for i, ls in enumerate(spec.layers):
        where = f"layer {i} ({ls.kind})"
        if ls.kind in ("conv", "constrained_conv"):
            if len(shape) != 3:
                raise ValueError(f"{where}: needs a (C,H,W) input, has {shape}")
            C, H, W = shape
            if ls.filters < 1 or ls.kernel < 1:
                raise ValueError(f"{where}: filters/kernel must be positive")
            if ls.kind == "constrained_conv":
                if ls.kernel % 2 == 0:
                    raise ValueError(f"{where}: constrained kernel must be odd")
                if C != 1:
                    raise ValueError(f"{where}: constrained conv expects 1 input "
                                     f"channel, got {C}")
            if ls.padding == "same":
                Ho = -(-H // ls.stride)
                Wo = -(-W // ls.stride)
            else:
                Ho = (H - ls.kernel) // ls.stride + 1
                Wo = (W - ls.kernel) // ls.stride + 1
            if ls.kernel > H or ls.kernel > W or Ho < 1 or Wo < 1:
                raise ValueError(f"{where}: kernel {ls.kernel} does not fit "
                                 f"{H}x{W} input")
            shape = (ls.filters, Ho, Wo)
        elif ls.kind == "maxpool":
            C, H, W = shape
            if ls.window < 1 or ls.window > min(H, W):
                raise ValueError(f"{where}: window {ls.window} does not fit {H}x{W}")
            stride = ls.stride or ls.window
            shape = (C, (H - ls.window) // stride + 1, (W - ls.window) // stride + 1)
        elif ls.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif ls.kind == "dense":
            if len(shape) != 1:
                raise ValueError(f"{where}: dense needs a flattened input, has {shape}")
            if ls.units < 1:
                raise ValueError(f"{where}: units must be positive")
            shape = (ls.units,)
        # relu/tanh leave the shape alone
        shapes.append(shape)
    return shapes


def validate_spec(spec: ModelSpec) -> None:
    if not spec.layers:
        raise ValueError("spec has no layers")
    if not any(ls.kind in ("conv", "constrained_conv") for ls in spec.layers):
        raise ValueError("spec must contain at least one convolution layer")
    if spec.layers[0].kind != "constrained_conv":
        raise ValueError("first layer must be the constrained convolution")
    shapes = spec_output_shapes(spec)
    if shapes[-1] != (spec.classes,):
        raise ValueError(f"spec output shape {shapes[-1]} does not match "
                         f"classes={spec.classes}")


class Model:
    """An instantiated layer stack, either point-estimate or variational."""

    def __init__(self, spec: ModelSpec, mode: str, layers: list):
        self.spec = spec
        self.mode = mode
        self.layers = layers

    @property
    def bayesian(self) -> bool:
        return self.mode == "bayesian"

    def forward(self, x, rng: np.random.Generator | None = None) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.spec.patch_size \
                or x.shape[3] != self.spec.patch_size:
            raise ValueError(f"expected (N,1,{self.spec.patch_size},"
                             f"{self.spec.patch_size}) input, got {x.shape}")
        if self.bayesian and rng is None:
            raise ValueError("bayesian forward needs an RNG for the flipout draws")
        for layer in self.layers:
            x = layer.forward(x, rng)
        return x

    def activations(self, x, rng: np.random.Generator | None = None) -> list[Tensor]:
        x = as_tensor(x)
        outs = []
        for layer in self.layers:
            x = layer.forward(x, rng)
            outs.append(x)
        return outs

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            kind = self.spec.layers[i].kind
            for name, t in layer.parameters():
                out.append((f"layer{i}.{kind}.{name}", t))
        return out

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def apply_constraints(self) -> None:
        for layer in self.layers:
            if getattr(layer, "constrained", False):
                layer.project()

    def constraint_projections(self):
        """(tensor, project) pairs for the optimizer's post-update hook."""
        hooks = []
        for layer in self.layers:
            if getattr(layer, "constrained", False):
                hooks.append((layer.kernel if hasattr(layer, "kernel")
                              else layer.weight.mu, layer.project))
        return hooks

    def kl(self, prior: PriorSpec = UNIT_GAUSSIAN_PRIOR) -> Tensor:
        if not self.bayesian:
            raise ValueError("kl() is only defined for bayesian models")
        total = None
        for layer in self.layers:
            if hasattr(layer, "kl"):
                term = layer.kl(prior)
                total = term if total is None else total + term
        return total


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def build(spec: ModelSpec, mode: str, seed: int) -> Model:
    """Instantiate a model; mu draws match the baseline's weight draws for
    the same seed, so the pair starts from the same mean function."""
    if mode not in ("baseline", "bayesian"):
        raise ValueError(f"mode must be 'baseline' or 'bayesian', got {mode!r}")
    validate_spec(spec)
    rng = substream(seed, 0xB)
    shape: tuple[int, ...] = (1, spec.patch_size, spec.patch_size)
    shapes = [shape] + spec_output_shapes(spec)
    layers: list = []
    for i, ls in enumerate(spec.layers):
        in_shape = shapes[i]
        if ls.kind in ("conv", "constrained_conv"):
            C = in_shape[0]
            constrained = ls.kind == "constrained_conv"
            fan_in = C * ls.kernel * ls.kernel
            bound = 1.0 / math.sqrt(fan_in)
            wdata = rng.uniform(-bound, bound, (ls.filters, C, ls.kernel, ls.kernel))
            wants_bias = not constrained
            if mode == "baseline":
                layer = ConvLayer(_param(wdata, f"layer{i}.kernel"),
                                  _param(np.zeros(ls.filters), f"layer{i}.bias")
                                  if wants_bias else None,
                                  stride=ls.stride, padding=ls.padding,
                                  constrained=constrained)
            else:
                weight = GaussianVariational(
                    _param(wdata, f"layer{i}.mu"),
                    _param(np.full(wdata.shape, RHO_INIT), f"layer{i}.rho"))
                bias = None
                if wants_bias:
                    bias = GaussianVariational(
                        _param(np.zeros(ls.filters), f"layer{i}.bias_mu"),
                        _param(np.full(ls.filters, RHO_INIT), f"layer{i}.bias_rho"))
                layer = FlipoutConv(weight, bias, stride=ls.stride,
                                    padding=ls.padding, constrained=constrained,
                                    stream_id=i)
            if constrained:
                layer.project()
            layers.append(layer)
        elif ls.kind == "dense":
            D = in_shape[0]
            bound = 1.0 / math.sqrt(D)
            wdata = rng.uniform(-bound, bound, (D, ls.units))
            if mode == "baseline":
                layers.append(DenseLayer(_param(wdata, f"layer{i}.weight"),
                                         _param(np.zeros(ls.units), f"layer{i}.bias")))
            else:
                weight = GaussianVariational(
                    _param(wdata, f"layer{i}.mu"),
                    _param(np.full(wdata.shape, RHO_INIT), f"layer{i}.rho"))
                bias = GaussianVariational(
                    _param(np.zeros(ls.units), f"layer{i}.bias_mu"),
                    _param(np.full(ls.units, RHO_INIT), f"layer{i}.bias_rho"))
                layers.append(FlipoutDense(weight, bias, stream_id=i))
        elif ls.kind == "relu":
            layers.append(ReluLayer())
        elif ls.kind == "tanh":
            layers.append(TanhLayer())
        elif ls.kind == "maxpool":
            layers.append(MaxPoolLayer(ls.window, ls.stride or ls.window))
        elif ls.kind == "flatten":
            layers.append(FlattenLayer())
        else:  # pragma: no cover - guarded by validate_spec
            raise ValueError(f"unknown layer kind {ls.kind!r}")
    return Model(spec, mode, layers)


def collapse(model: Model) -> Model:
    """Deterministic twin with weights = mu; asserts BNN(sigma->0) behavior."""
    if not model.bayesian:
        raise ValueError("collapse() expects a bayesian model")
    layers: list = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, FlipoutConv):
            bias = None
            if layer.bias is not None:
                bias = _param(layer.bias.mu.data.copy(), f"layer{i}.bias")
            layers.append(ConvLayer(_param(layer.weight.mu.data.copy(),
                                           f"layer{i}.kernel"),
                                    bias, stride=layer.stride,
                                    padding=layer.padding,
                                    constrained=layer.constrained))
        elif isinstance(layer, FlipoutDense):
            layers.append(DenseLayer(_param(layer.weight.mu.data.copy(),
                                            f"layer{i}.weight"),
                                     _param(layer.bias.mu.data.copy(),
                                            f"layer{i}.bias")))
        elif isinstance(layer, ReluLayer):
            layers.append(ReluLayer())
        elif isinstance(layer, TanhLayer):
            layers.append(TanhLayer())
        elif isinstance(layer, MaxPoolLayer):
            layers.append(MaxPoolLayer(layer.window, layer.stride))
        elif isinstance(layer, FlattenLayer):
            layers.append(FlattenLayer())
        else:  # pragma: no cover
            raise TypeError(f"cannot collapse layer {type(layer).__name__}")
    return Model(model.spec, "baseline", layers)


def forward_deterministic(model: Model, batch) -> Tensor:
    """Logits of the point-estimate model for a (N,1,P,P) batch."""
    if model.bayesian:
        raise ValueError("forward_deterministic expects a baseline model")
    return model.forward(batch)
