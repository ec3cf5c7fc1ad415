"""Constrained training of aggregation models with projected Adagrad."""

from __future__ import annotations

import concurrent.futures
import dataclasses
import logging
import math
import os
from typing import Callable, List, Optional, Sequence

import numpy as np

from latticeagg.errors import ConfigError, DivergenceError, LabelError, ProjectionFailure
from latticeagg.lattice_core import CalibratorTrace, LatticeTrace, project_calibrator, project_lattice
from latticeagg.model import (
    AggModel,
    ExampleSet,
    TokenBatch,
    init_model_from_examples,
    phi_batch,
    rho_batch,
    segment_mean,
)

logger = logging.getLogger(__name__)

SQUARED_ERROR = "squared_error"
LOGISTIC_PM1 = "logistic_pm1"
LOSS_KINDS = (SQUARED_ERROR, LOGISTIC_PM1)

ADAGRAD_EPSILON = 1e-8


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = SQUARED_ERROR
    learning_rate: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    projection_period: int = 1
    seed: int = 0
    l2_penalty: float = 0.0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1 or self.projection_period < 1:
            raise ConfigError("batch_size and projection_period must be positive")
        if self.l2_penalty < 0:
            raise ConfigError("l2_penalty must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in fields})


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _check_labels(labels: np.ndarray, kind: str):
    if kind == LOGISTIC_PM1 and not np.all(np.isin(labels, (-1.0, 1.0))):
        raise LabelError("logistic_pm1 needs labels in {-1, +1}")
    if kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {kind!r}")


def loss_and_derivative(pred, labels, kind: str):
    """Per-example losses and their derivatives w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=float)
    labels = np.asarray(labels, dtype=float)
    _check_labels(labels, kind)
    if kind == SQUARED_ERROR:
        diff = pred - labels
        return diff * diff, 2.0 * diff
    margin = labels * pred
    losses = np.logaddexp(0.0, -margin)
    # d/dp log(1 + exp(-y p)) = -y * sigmoid(-y p)
    return losses, -labels * np.exp(-np.logaddexp(0.0, margin))


def loss(pred: float, label: float, kind: str) -> float:
    return float(loss_and_derivative(np.array([pred]), np.array([label]), kind)[0][0])


# ---------------------------------------------------------------------------
# Backpropagation
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class GradientBundle:
    """Gradient with the same flat layout as :meth:`AggModel.flatten`."""

    flat: np.ndarray
    layout: list

    def arrays(self) -> dict:
        out, pos = {}, 0
        for name, size in self.layout:
            out[name] = self.flat[pos:pos + size]
            pos += size
        return out


def _cal_grad(tr: CalibratorTrace, g: np.ndarray, size: int):
    """Gradient w.r.t. a calibrator's values (and its missing output)."""
    present = ~tr.missing
    gv = np.bincount(tr.lower[present], weights=(1.0 - tr.frac[present]) * g[present], minlength=size)
    gv += np.bincount(tr.lower[present] + 1, weights=tr.frac[present] * g[present], minlength=size)
    return gv[:size], float(np.sum(g[tr.missing]))


def _lattice_grad(tr: LatticeTrace, g: np.ndarray, size: int) -> np.ndarray:
    return np.bincount(tr.corners.ravel(), weights=(tr.weights * g[:, None]).ravel(), minlength=size)


def batch_gradient(model: AggModel, examples: Sequence[ExampleSet], kind: str, l2_penalty: float = 0.0):
    """Mean loss over ``examples`` and its exact gradient.

    Returns ``(mean_loss, per_example_losses, flat_gradient)``.
    """
    batch = TokenBatch.from_examples(examples)
    labels = np.array([ex.label for ex in examples])
    phi = phi_batch(model, batch.tokens)
    mean = segment_mean(phi.phi, batch.segment, batch.counts)
    rho = rho_batch(model, mean)
    losses, dpred = loss_and_derivative(rho.output, labels, kind)
    n = len(examples)
    g_out = dpred / n

    grads = {}
    out_cal = model.output_calibrator
    grads["out"] = _cal_grad(rho.output_cal, g_out, out_cal.values.size)
    g_z = g_out * rho.output_cal.slope
    grads["rho_lat"] = _lattice_grad(rho.lattice, g_z, model.rho_lattice.params.size)
    g_u4 = g_z[:, None] * rho.lattice.partials
    g_mean = np.empty_like(mean)
    grads["rho_cal"] = []
    for k, cal in enumerate(model.rho_calibrators):
        tr = rho.calibrated[k]
        grads["rho_cal"].append(_cal_grad(tr, g_u4[:, k], cal.values.size))
        g_mean[:, k] = g_u4[:, k] * tr.slope
    g_phi = (g_mean / batch.counts[:, None])[batch.segment]
    grads["phi_lat"], grads["phi_cal"] = [], []
    for k, lat in enumerate(model.phi_lattices):
        lt = phi.lattices[k]
        grads["phi_lat"].append(_lattice_grad(lt, g_phi[:, k], lat.params.size))
        g_u1 = g_phi[:, k:k + 1] * lt.partials
        grads["phi_cal"].append([
            _cal_grad(phi.calibrated[k][d], g_u1[:, d], cal.values.size)
            for d, cal in enumerate(model.phi_calibrators[k])
        ])

    parts = []

    def add_cal(cal, gv_gm):
        gv, gm = gv_gm
        parts.append(gv)
        if cal.missing_value_output is not None:
            parts.append([gm])

    for k, row in enumerate(model.phi_calibrators):
        for d, cal in enumerate(row):
            add_cal(cal, grads["phi_cal"][k][d])
    parts.extend(grads["phi_lat"])
    for k, cal in enumerate(model.rho_calibrators):
        add_cal(cal, grads["rho_cal"][k])
    parts.append(grads["rho_lat"])
    add_cal(out_cal, grads["out"])
    flat = np.concatenate([np.asarray(p, dtype=float) for p in parts])
    mean_loss = float(np.mean(losses))
    if l2_penalty:
        theta = model.flatten()
        mean_loss += l2_penalty * float(theta @ theta)
        flat = flat + 2.0 * l2_penalty * theta
    return mean_loss, losses, flat


def backprop(model: AggModel, example: ExampleSet, label: Optional[float] = None, kind: str = SQUARED_ERROR):
    """Loss of one example and its gradient w.r.t. every model parameter."""
    if label is not None:
        example = dataclasses.replace(example, label=label)
    value, _, flat = batch_gradient(model, [example], kind)
    return value, GradientBundle(flat=flat, layout=model.param_layout())


# ---------------------------------------------------------------------------
# Projection and training
# ---------------------------------------------------------------------------


def project_all(model: AggModel) -> AggModel:
    """Project every calibrator and lattice onto its feasible set."""
    return dataclasses.replace(
        model,
        phi_calibrators=[[project_calibrator(c) for c in row] for row in model.phi_calibrators],
        phi_lattices=[project_lattice(lat) for lat in model.phi_lattices],
        rho_calibrators=[project_calibrator(c) for c in model.rho_calibrators],
        rho_lattice=project_lattice(model.rho_lattice),
        output_calibrator=project_calibrator(model.output_calibrator),
    )


def check_feasible(model: AggModel, tol: float = 0.0) -> None:
    worst = model.violations()
    if worst > tol:
        raise ProjectionFailure(f"model violates its constraints by {worst:.3g}")


@dataclasses.dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    validation_metric: Optional[float] = None


@dataclasses.dataclass
class TrainResult:
    model: AggModel
    trace: List[EpochRecord]
    batch_orders: List[np.ndarray]

    def write_trace_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("epoch,mean_loss,validation_metric\n")
            for rec in self.trace:
                vm = "" if rec.validation_metric is None else repr(rec.validation_metric)
                f.write(f"{rec.epoch},{rec.mean_loss!r},{vm}\n")


def train(
    model: AggModel,
    examples: Sequence[ExampleSet],
    config: TrainConfig,
    validation: Optional[Sequence[ExampleSet]] = None,
    metric: Optional[str] = None,
    progress: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Mini-batch projected Adagrad.

    All components are projected every ``config.projection_period`` steps and
    once more after the last step, so the returned model is always feasible.
    """
    from latticeagg.data import evaluate_predictions

    model = project_all(model)
    theta = model.flatten()
    accum = np.zeros_like(theta)
    rng = np.random.default_rng(config.seed)
    trace, orders = [], []
    step = 0
    n = len(examples)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        orders.append(order)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = [examples[i] for i in order[start:start + config.batch_size]]
            current = model.unflatten(theta)
            with np.errstate(invalid="ignore", over="ignore"):
                _, losses, grad = batch_gradient(current, batch, config.loss_kind, config.l2_penalty)
            step += 1
            if not np.all(np.isfinite(losses)) or not np.all(np.isfinite(grad)):
                raise DivergenceError(f"non-finite loss or gradient at step {step}", step=step)
            total += float(np.sum(losses))
            accum += grad * grad
            theta = theta - config.learning_rate * grad / (np.sqrt(accum) + ADAGRAD_EPSILON)
            if not np.all(np.isfinite(theta)):
                raise DivergenceError(f"non-finite parameters at step {step}", step=step)
            if step % config.projection_period == 0:
                theta = project_all(model.unflatten(theta)).flatten()
        rec = EpochRecord(epoch=epoch, mean_loss=total / max(n, 1))
        if validation is not None and metric is not None:
            current = project_all(model.unflatten(theta))
            rec.validation_metric = evaluate_predictions(current, validation, [metric])[metric]
        trace.append(rec)
        logger.info("epoch %d mean loss %.6g", epoch, rec.mean_loss)
        if progress is not None:
            progress(rec)
    final = project_all(model.unflatten(theta))
    check_feasible(final)
    return TrainResult(model=final, trace=trace, batch_orders=orders)


# ---------------------------------------------------------------------------
# Hyperparameter search
# ---------------------------------------------------------------------------

MINIMIZED_METRICS = {"mae", "mse"}


@dataclasses.dataclass
class Candidate:
    config: TrainConfig
    arch: dict = dataclasses.field(default_factory=dict)


@dataclasses.dataclass
class TuneResult:
    best_model: AggModel
    best_index: int
    report: List[dict]


def _run_candidate(cand: Candidate, train_set, validation, metric):
    from latticeagg.data import evaluate_predictions

    row = {"config": dataclasses.asdict(cand.config), "arch": dict(cand.arch)}
    try:
        model = init_model_from_examples(train_set, **cand.arch)
        result = train(model, train_set, cand.config)
        score = evaluate_predictions(result.model, validation, [metric])[metric]
        if not math.isfinite(score):
            raise DivergenceError("non-finite validation metric")
        row.update(status="ok", metric=score, final_train_loss=result.trace[-1].mean_loss if result.trace else None)
        return row, result.model
    except DivergenceError as exc:
        row.update(status="diverged", metric=None, error=str(exc))
        return row, None


def tune(
    candidates: Sequence[Candidate],
    train_set: Sequence[ExampleSet],
    validation: Sequence[ExampleSet],
    metric: str,
    max_workers: Optional[int] = None,
) -> TuneResult:
    """Train every candidate and keep the best by validation ``metric``.

    Diverged candidates score worst. Ties go to the earliest candidate.
    """
    if not candidates:
        raise ConfigError("tuning grid is empty")
    if max_workers is None:
        max_workers = int(os.environ.get("AGG_NUM_THREADS", "1"))
    if max_workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(lambda c: _run_candidate(c, train_set, validation, metric), candidates))
    else:
        results = [_run_candidate(c, train_set, validation, metric) for c in candidates]

    sign = 1.0 if metric in MINIMIZED_METRICS else -1.0
    best, best_key = None, math.inf
    for i, (row, _) in enumerate(results):
        key = math.inf if row["metric"] is None else sign * row["metric"]
        if best is None or key < best_key:
            best, best_key = i, key
    if results[best][1] is None:
        raise DivergenceError("every tuning candidate diverged")
    return TuneResult(best_model=results[best][1], best_index=best, report=[r for r, _ in results])
