"""MSE loss, AdamW, cosine annealing with warm restarts, the training loop and a
finite-difference gradient check."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, InputError, ParameterError, TrainingError
from .model import ModelConfig, ModelParams, forward, init_params, predict
from .tensor import Tensor

log = logging.getLogger(__name__)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    target = T.tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    diff = T.sub(pred, target)
    return T.mean(T.mul(diff, diff))


# -- AdamW ----------------------------------------------------------------------

@dataclass(frozen=True)
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray], **hyper) -> AdamWState:
        return cls(m={k: np.zeros_like(a) for k, a in params.items()},
                   v={k: np.zeros_like(a) for k, a in params.items()}, **hyper)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float | None = None) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One decoupled-weight-decay Adam update; returns new arrays and state.

    ``lr`` overrides ``state.lr`` for this step (scheduled learning rate).
    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    lr = state.lr if lr is None else lr
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        elif g.shape != theta.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r} at step {t}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * theta
        new_params[name] = theta - lr * update
        new_m[name], new_v[name] = m, v
    return new_params, replace(state, m=new_m, v=new_v, step_count=t)


# -- schedule -------------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleConfig:
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    T0: int = 1
    T_mult: int = 1

    def __post_init__(self):
        if not (self.lr_max >= self.lr_min >= 0):
            raise ParameterError(f"need lr_max >= lr_min >= 0, got {self.lr_max}, {self.lr_min}")
        if self.T0 < 1 or self.T_mult < 1:
            raise ParameterError(f"need T0 >= 1 and T_mult >= 1, got {self.T0}, {self.T_mult}")


def cosine_warm_restart_lr(step: int, sched: ScheduleConfig) -> float:
    if step < 0:
        raise ParameterError(f"step must be >= 0, got {step}")
    if sched.T_mult == 1:
        t_cur, t_i = step % sched.T0, sched.T0
    else:
        t_cur, t_i = step, sched.T0
        while t_cur >= t_i:
            t_cur -= t_i
            t_i *= sched.T_mult
    return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + math.cos(math.pi * t_cur / t_i))


# -- training loop ----------------------------------------------------------------

@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_rmse: list[float] = field(default_factory=list)
    seconds: float = 0.0
    steps: int = 0
    checkpoint: str | None = None
    params: ModelParams | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"train_loss": self.train_loss, "val_rmse": self.val_rmse, "seconds": self.seconds,
                "steps": self.steps, "checkpoint": self.checkpoint}


def _stack(samples) -> tuple[list[np.ndarray], np.ndarray]:
    return [s.window for s in samples], np.array([s.target for s in samples], dtype=np.float64)


def batch_loss(params: ModelParams, windows: Sequence[np.ndarray], targets: np.ndarray):
    """Loss tensor and gradients (by parameter name) for one mini-batch."""
    tensors = params.leaves(requires_grad=True)
    preds = T.concat([forward(w, params, "train", tensors) for w in windows], axis=0)
    loss = mse_loss(preds, Tensor(targets))
    gmap = T.backward(loss)
    return loss, {k: gmap[t] for k, t in tensors.items() if t in gmap}


def train(train_set, val_set, config: ModelConfig, sched: ScheduleConfig | None = None,
          epochs: int = 10, batch_size: int = 16, seed: int = 0, params: ModelParams | None = None,
          weight_decay: float = 0.01, on_epoch: Callable[[int, float, float], None] | None = None
          ) -> TrainReport:
    """Mini-batch AdamW training with a per-step cosine warm-restart schedule.

    ``sched`` defaults to one restart per epoch from lr 1e-3 down to 1e-6.
    Shuffling uses ``seed``; initialization uses ``config.seed`` unless
    ``params`` is given.
    """
    train_set = list(train_set)
    if not train_set:
        raise InputError("training set is empty")
    if epochs < 1 or batch_size < 1:
        raise ParameterError(f"epochs and batch_size must be >= 1, got {epochs}, {batch_size}")
    steps_per_epoch = math.ceil(len(train_set) / batch_size)
    if sched is None:
        sched = ScheduleConfig(T0=steps_per_epoch)
    params = params if params is not None else init_params(config)
    state = AdamWState.fresh(params.arrays, lr=sched.lr_max, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    val_windows, val_targets = _stack(val_set) if val_set else ([], None)
    report = TrainReport()
    start = time.perf_counter()
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_set))
        total = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            windows, targets = _stack([train_set[i] for i in idx])
            loss, grads = batch_loss(params, windows, targets)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, step {step}")
            lr = cosine_warm_restart_lr(step, sched)
            arrays, state = adamw_step(params.arrays, grads, state, lr=lr)
            params = params.with_arrays(arrays)
            total += value * len(idx)
            step += 1
        report.train_loss.append(total / len(train_set))
        if val_windows:
            pred = predict(val_windows, params)
            report.val_rmse.append(float(np.sqrt(np.mean((pred - val_targets) ** 2))))
        else:
            report.val_rmse.append(float("nan"))
        log.info("epoch %d/%d loss %.5f val_rmse %.5f", epoch + 1, epochs,
                 report.train_loss[-1], report.val_rmse[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, report.train_loss[-1], report.val_rmse[-1])
    report.seconds = time.perf_counter() - start
    report.steps = step
    report.params = params
    return report


# -- gradient check ---------------------------------------------------------------

@dataclass
class GradCheckResult:
    errors: dict[str, float | None]  # None means the group receives no gradient (frozen)
    tolerance: float
    checked_entries: int
    skipped_entries: int = 0

    @property
    def max_error(self) -> float:
        vals = [e for e in self.errors.values() if e is not None]
        return max(vals) if vals else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(config: ModelConfig, eps: float = 1e-5, tolerance: float = 1e-4, seed: int = 0,
               entries_per_group: int = 6) -> GradCheckResult:
    """Compare backprop against central differences of ``mse_loss(forward(x), y)``.

    A random window and target are drawn from ``seed``; for every parameter
    array, up to ``entries_per_group`` random coordinates are perturbed.
    A central difference is only valid if no relu changes sign between the two
    perturbed points; such coordinates are retried with eps/10 and eps/100,
    then skipped. Frozen Gaussian projections are reported with ``None``.
    """
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    rng = np.random.default_rng(seed)
    params = init_params(config)
    window = rng.normal(size=(config.seq_len, 8))
    target = rng.uniform(0.5, 9.5, size=(1, 2))

    def loss_at(arrays) -> tuple[float, bytes]:
        p = params.with_arrays(arrays)
        with T.no_grad(), T.trace_relu() as masks:
            out = forward(window, p, "train", p.leaves(requires_grad=False))
        pattern = b"".join(np.packbits(m).tobytes() for m in masks)
        return float(np.mean((out.data - target) ** 2)), pattern

    _, grads = batch_loss(params, [window], target)
    _, base_pattern = loss_at(params.arrays)
    errors: dict[str, float | None] = {}
    checked = skipped = 0
    for name, arr in params.arrays.items():
        flat_idx = rng.choice(arr.size, size=min(entries_per_group, arr.size), replace=False)
        worst = 0.0
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            for h in (eps, eps / 10, eps / 100):
                plus, minus = arr.copy(), arr.copy()
                plus[idx] += h
                minus[idx] -= h
                f_plus, pat_plus = loss_at({**params.arrays, name: plus})
                f_minus, pat_minus = loss_at({**params.arrays, name: minus})
                if pat_plus == pat_minus == base_pattern:
                    numeric = (f_plus - f_minus) / (2 * h)
                    worst = max(worst, relative_error(float(grads[name][idx]), numeric))
                    checked += 1
                    break
            else:
                skipped += 1
                log.debug("grad_check: %s%s straddles a relu kink, skipped", name, idx)
        errors[name] = worst
    for s in sorted(params.projections):
        errors[f"scale{s}.gauss.projection"] = None
    return GradCheckResult(errors, tolerance, checked, skipped)
