"""The training loop: ELBO objective, Adam, periodic validation retention.

Both model variants train here. The baseline minimizes the plain
cross-entropy; the Bayesian model minimizes nll + kl_weight * KL(q || prior)
with one stochastic flipout pass per step. ``kl_weight_mode = "per-batch"``
apportions the KL so one epoch contributes exactly KL(q || prior) in total
(weight 1/M, M = minibatches per epoch); ``"constant"`` uses ``kl_weight``
verbatim.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .config import coerce, parse_kv_file
from .models import Model
from .rng import substream
from .tensor import NonFiniteError, no_grad, softmax, softmax_cross_entropy
from .variational import UNIT_GAUSSIAN_PRIOR, PriorSpec, kl_monte_carlo


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    batch_size: int = 64
    max_iterations: int = 6000
    validation_interval: int = 1000
    kl_weight_mode: str = "per-batch"   # "per-batch" | "constant"
    kl_weight: float = 1.0              # used by the "constant" mode
    seed: int = 0
    val_mc_draws: int = 10              # reduced draw count during training
    mc_kl: bool = False                 # estimate the KL by sampling
    mc_kl_samples: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0 or self.beta1 <= 0 or self.beta2 <= 0 \
                or self.epsilon <= 0:
            raise ValueError("optimizer rates must be positive")
        if not (self.beta1 < 1 and self.beta2 < 1):
            raise ValueError("beta1/beta2 must be < 1")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_iterations < 0 or self.validation_interval < 1:
            raise ValueError("bad iteration counts")
        if self.kl_weight_mode not in ("per-batch", "constant"):
            raise ValueError(f"unknown kl_weight_mode {self.kl_weight_mode!r}")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")

    @classmethod
    def from_mapping(cls, mapping: dict, **overrides) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        types = {"learning_rate": float, "beta1": float, "beta2": float,
                 "epsilon": float, "batch_size": int, "max_iterations": int,
                 "validation_interval": int, "kl_weight_mode": str,
                 "kl_weight": float, "seed": int, "val_mc_draws": int,
                 "mc_kl": bool, "mc_kl_samples": int}
        kwargs = {}
        for key, value in mapping.items():
            if key not in known:
                raise ValueError(f"unknown training config key {key!r}")
            kwargs[key] = coerce(value, types[key])
        kwargs.update(overrides)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        return cls.from_mapping(parse_kv_file(path), **overrides)


@dataclass
class OptimizerState:
    """Per-parameter Adam moment accumulators, aligned with the param list."""
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls(m=[np.zeros_like(t.data) for _, t in params],
                   v=[np.zeros_like(t.data) for _, t in params])


def adam_step(params, grads, state: OptimizerState, config: TrainConfig,
              constraints=()) -> OptimizerState:
    """Bias-corrected Adam update in place; constrained layers re-projected.

    ``params`` is a list of (name, Tensor); ``grads`` the matching gradient
    arrays. A non-finite gradient aborts with the parameter path.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state lengths disagree")
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    for i, ((name, tensor), grad) in enumerate(zip(params, grads)):
        grad = np.asarray(grad)
        if grad.shape != tensor.data.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match "
                             f"parameter {name} {tensor.data.shape}")
        if not np.isfinite(grad).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r} "
                                 f"at step {t}")
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * grad
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * grad * grad
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        tensor.data -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    for _tensor, project in constraints:
        project()
    return state


def elbo_loss(model: Model, batch, labels, kl_weight: float,
              rng: np.random.Generator | None = None,
              prior: PriorSpec = UNIT_GAUSSIAN_PRIOR,
              mc_kl: bool = False, mc_kl_samples: int = 1,
              context: str = ""):
    """Loss tensor plus (nll, kl) floats; aborts on a non-finite loss."""
    logits = model.forward(batch, rng) if model.bayesian else model.forward(batch)
    nll = softmax_cross_entropy(logits, labels)
    if model.bayesian:
        if mc_kl:
            kl = None
            for layer in model.layers:
                if hasattr(layer, "kl"):
                    for _, gv in _layer_variationals(layer):
                        term = kl_monte_carlo(gv, prior, mc_kl_samples, rng)
                        kl = term if kl is None else kl + term
        else:
            kl = model.kl(prior)
        loss = nll + kl_weight * kl
        kl_value = float(kl.data)
    else:
        loss = nll
        kl_value = 0.0
    nll_value = float(nll.data)
    if not math.isfinite(float(loss.data)):
        raise NonFiniteError(f"non-finite loss{f' at {context}' if context else ''}: "
                             f"nll={nll_value!r} kl={kl_value!r} "
                             f"kl_weight={kl_weight!r}")
    return loss, nll_value, kl_value


def _layer_variationals(layer):
    out = [("weight", layer.weight)]
    if getattr(layer, "bias", None) is not None:
        out.append(("bias", layer.bias))
    return out


class MinibatchStream:
    """Cyclic shuffled minibatches with a fresh permutation every epoch."""

    def __init__(self, x: np.ndarray, y: np.ndarray, batch_size: int, seed: int):
        if len(x) != len(y) or len(x) == 0:
            raise ValueError("empty or mismatched dataset")
        self.x = x
        self.y = y
        self.batch_size = batch_size
        self.rng = substream(seed, 0xD)
        self._order = None
        self._pos = 0

    @property
    def batches_per_epoch(self) -> int:
        return -(-len(self.x) // self.batch_size)

    def next_batch(self):
        if self._order is None or self._pos >= len(self.x):
            self._order = self.rng.permutation(len(self.x))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.x[idx], self.y[idx]


@dataclass
class TrainLogRecord:
    iteration: int
    nll: float
    kl: float
    loss: float
    val_accuracy: float | None = None
    wall_ms: float = 0.0


TRAIN_LOG_HEADER = "iteration,nll,kl,loss,val_accuracy,wall_ms"


def write_train_log(records, path) -> None:
    lines = [TRAIN_LOG_HEADER]
    for r in records:
        val = "" if r.val_accuracy is None else repr(r.val_accuracy)
        lines.append(f"{r.iteration},{r.nll!r},{r.kl!r},{r.loss!r},{val},"
                     f"{r.wall_ms!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def evaluate_accuracy(model: Model, x: np.ndarray, y: np.ndarray,
                      n_draws: int, seed: int, batch_size: int = 128) -> float:
    """Fraction correct; Bayesian models average softmax over MC draws."""
    correct = 0
    with no_grad():
        for b0 in range(0, len(x), batch_size):
            xb = x[b0:b0 + batch_size]
            yb = y[b0:b0 + batch_size]
            if model.bayesian:
                probs = np.zeros((len(xb), model.spec.classes))
                for draw in range(n_draws):
                    rng = substream(seed, b0, draw)
                    probs += softmax(model.forward(xb, rng).data)
                probs /= n_draws
            else:
                probs = softmax(model.forward(xb).data)
            correct += int((probs.argmax(axis=1) == yb).sum())
    return correct / len(x)


@dataclass
class TrainResult:
    model: Model                 # parameters of the best checkpoint
    log: list[TrainLogRecord]
    best_iteration: int
    best_val_accuracy: float
    final_state: dict = field(repr=False, default_factory=dict)


def train(model: Model, data, config: TrainConfig,
          val_fn=None, debug: bool = False) -> TrainResult:
    """Run the optimization loop, retaining the best-validation checkpoint.

    ``data`` provides x_train/y_train/x_val/y_val arrays. ``val_fn`` replaces
    the validation evaluation (used by tests to inject synthetic curves).
    With ``debug`` the constrained-layer invariant is asserted every step.
    """
    stream = MinibatchStream(data.x_train, data.y_train,
                             config.batch_size, config.seed)
    if config.kl_weight_mode == "per-batch":
        kl_weight = 1.0 / stream.batches_per_epoch
    else:
        kl_weight = config.kl_weight

    model.apply_constraints()
    params = model.parameters()
    constraints = model.constraint_projections()
    state = OptimizerState.for_params(params)
    flip_rng = substream(config.seed, 0xF) if model.bayesian else None

    log: list[TrainLogRecord] = []
    best_iteration = 0
    best_acc = -1.0
    best_state: dict | None = None

    for it in range(1, config.max_iterations + 1):
        t0 = time.perf_counter()
        xb, yb = stream.next_batch()
        loss, nll_value, kl_value = elbo_loss(
            model, xb, yb, kl_weight, rng=flip_rng,
            mc_kl=config.mc_kl, mc_kl_samples=config.mc_kl_samples,
            context=f"iteration {it}")
        loss.backward()
        grads = [t.grad for _, t in params]
        adam_step(params, grads, state, config, constraints=constraints)
        for _, t in params:
            t.grad = None
        if debug:
            _assert_constraints(model)

        record = TrainLogRecord(iteration=it, nll=nll_value, kl=kl_value,
                                loss=float(loss.data))
        if it % config.validation_interval == 0:
            if val_fn is not None:
                acc = float(val_fn(model, it))
            else:
                acc = evaluate_accuracy(model, data.x_val, data.y_val,
                                        config.val_mc_draws,
                                        seed=config.seed + it)
            record.val_accuracy = acc
            if acc > best_acc:
                best_acc = acc
                best_iteration = it
                best_state = _snapshot(params)
        record.wall_ms = (time.perf_counter() - t0) * 1e3
        log.append(record)

    final_state = _snapshot(params)
    if best_state is not None:
        _restore(params, best_state)
    else:
        best_iteration = config.max_iterations
        best_acc = math.nan
    return TrainResult(model=model, log=log, best_iteration=best_iteration,
                       best_val_accuracy=best_acc, final_state=final_state)


def _snapshot(params) -> dict:
    return {name: t.data.copy() for name, t in params}


def _restore(params, state: dict) -> None:
    for name, t in params:
        t.data = state[name].copy()


def _assert_constraints(model: Model) -> None:
    for layer in model.layers:
        if getattr(layer, "constrained", False):
            k = layer.kernel.data if hasattr(layer, "kernel") else layer.weight.mu.data
            for f in range(k.shape[0]):
                center = k[f, 0, k.shape[2] // 2, k.shape[3] // 2]
                off = k[f, 0].sum() - center
                if center != -1.0 or abs(off - 1.0) > 1e-9:
                    raise AssertionError(
                        f"constraint violated on filter {f}: center={center!r} "
                        f"off-center sum={off!r}")


@dataclass
class TrainData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
