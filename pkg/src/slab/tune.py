"""Hyper-parameter grid search with early stopping and multi-run aggregation.

The default grid mirrors the classic fine-tuning recipe; the expanded grid
adds a lower learning rate, smaller batch sizes, a higher dropout rate, and
swaps fixed epoch counts for early stopping on validation loss.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

PATIENCE = 3        # evaluations without improvement before stopping
SAFETY_CAP = 20     # hard epoch limit under early stopping


@dataclass(frozen=True)
class GridSpace:
    learning_rates: tuple[float, ...]
    batch_sizes: tuple[int, ...]
    dropouts: tuple[float, ...]
    epochs: tuple[int, ...] | None    # None selects early stopping

    def __post_init__(self):
        if not (self.learning_rates and self.batch_sizes and self.dropouts):
            raise ValueError("GridSpace: every dimension must be non-empty")
        if self.epochs is not None and not self.epochs:
            raise ValueError("GridSpace: epochs must be None (early stopping) or non-empty")


DEFAULT_SPACE = GridSpace(learning_rates=(2e-5, 3e-5, 4e-5, 5e-5),
                          batch_sizes=(16, 32), dropouts=(0.1,), epochs=(3, 4))
EXPANDED_SPACE = GridSpace(learning_rates=(1e-5, 2e-5, 3e-5, 4e-5, 5e-5),
                           batch_sizes=(4, 8, 16, 32), dropouts=(0.1, 0.2), epochs=None)


@dataclass(frozen=True)
class GridPoint:
    learning_rate: float
    batch_size: int
    dropout: float
    epochs: int | None     # None = early stopping


def enumerate_grid(space: GridSpace) -> list[GridPoint]:
    """Full Cartesian product in lexicographic (lr, batch, dropout, epochs) order."""
    epochs_axis: Sequence[int | None] = sorted(space.epochs) if space.epochs else [None]
    return [GridPoint(lr, bs, do, ep)
            for lr in sorted(space.learning_rates)
            for bs in sorted(space.batch_sizes)
            for do in sorted(space.dropouts)
            for ep in epochs_axis]


@dataclass
class TrialConfig:
    point: GridPoint
    seed: int
    task_id: str = ""
    checkpoint_id: str = ""


@dataclass
class TrialResult:
    config: TrialConfig
    val_losses: list[float] = field(default_factory=list)
    val_metrics: list[float] = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0          # 1-based epoch with minimum validation loss
    best_metric: float = 0.0     # metric at the restored best epoch
    best_val_loss: float = math.inf
    wall_time: float = 0.0
    status: str = "ok"           # ok | failed
    model: object | None = None  # populated only when run with keep_model


def run_trial(task, point: GridPoint, seed: int, patience: int = PATIENCE,
              max_epochs: int = SAFETY_CAP, keep_model: bool = False) -> TrialResult:
    """Train one grid point: per-epoch validation, early stopping (or the
    point's fixed epoch count), best-epoch weight restore, final metric."""
    started = time.perf_counter()
    config = TrialConfig(point=point, seed=seed, task_id=getattr(task, "task_id", ""))
    result = TrialResult(config=config)
    model = task.build(point.learning_rate, point.batch_size, point.dropout, seed)
    if keep_model:
        result.model = model
    limit = point.epochs if point.epochs is not None else max_epochs
    early = point.epochs is None

    best_snap = None
    since_best = 0
    for epoch in range(1, limit + 1):
        train_loss = model.train_epoch()
        if not math.isfinite(train_loss):
            result.status = "failed"
            result.stop_epoch = epoch
            result.wall_time = time.perf_counter() - started
            return result
        val = model.validation_loss()
        if not math.isfinite(val):
            result.status = "failed"
            result.stop_epoch = epoch
            result.wall_time = time.perf_counter() - started
            return result
        result.val_losses.append(val)
        result.val_metrics.append(model.metric())
        result.stop_epoch = epoch
        if val < result.best_val_loss:
            result.best_val_loss = val
            result.best_epoch = epoch
            best_snap = model.snapshot()
            since_best = 0
        else:
            since_best += 1
            if early and since_best >= patience:
                break
    if best_snap is not None:
        model.restore(best_snap)
    result.best_metric = result.val_metrics[result.best_epoch - 1] if result.val_metrics else 0.0
    result.wall_time = time.perf_counter() - started
    return result


@dataclass
class SearchReport:
    trials: list[TrialResult]
    points: list[GridPoint]
    seeds: list[int]
    best_point: GridPoint | None
    best_mean_metric: float
    all_failed: bool

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["lr", "batch", "dropout", "stop_epoch", "best_dev_loss",
                         "dev_metric", "status"])
        for t in self.trials:
            p = t.config.point
            writer.writerow([repr(p.learning_rate), p.batch_size, repr(p.dropout),
                             t.stop_epoch,
                             repr(t.best_val_loss) if t.status == "ok" else "",
                             repr(t.best_metric), t.status])
        return buf.getvalue()

    def best_summary(self) -> str:
        if self.best_point is None:
            return "status=all-trials-failed\n"
        p = self.best_point
        return ("status=ok\n"
                f"learning_rate={p.learning_rate!r}\n"
                f"batch_size={p.batch_size}\n"
                f"dropout={p.dropout!r}\n"
                f"epochs={'early-stopping' if p.epochs is None else p.epochs}\n"
                f"mean_dev_metric={self.best_mean_metric!r}\n"
                f"seeds={','.join(str(s) for s in self.seeds)}\n")


def grid_search(task, space: GridSpace, seeds: Sequence[int], patience: int = PATIENCE,
                max_epochs: int = SAFETY_CAP) -> SearchReport:
    """Run every grid point for every seed; the winner maximizes the mean
    best-epoch dev metric, ties broken toward smaller batch size, then lower
    learning rate (then dropout and epochs for full determinism)."""
    if not seeds:
        raise ValueError("grid_search: need at least one seed")
    points = enumerate_grid(space)
    trials: list[TrialResult] = []
    by_point: dict[GridPoint, list[TrialResult]] = {p: [] for p in points}
    for point in points:
        for seed in seeds:
            trial = run_trial(task, point, seed, patience=patience, max_epochs=max_epochs)
            trials.append(trial)
            by_point[point].append(trial)

    best_point, best_key = None, None
    for point in points:
        runs = by_point[point]
        if all(t.status == "failed" for t in runs):
            continue
        mean_metric = sum(t.best_metric for t in runs) / len(runs)
        key = (-mean_metric, point.batch_size, point.learning_rate, point.dropout,
               point.epochs if point.epochs is not None else 0)
        if best_key is None or key < best_key:
            best_key, best_point = key, point
    all_failed = best_point is None
    best_mean = 0.0 if all_failed else -best_key[0]
    return SearchReport(trials=trials, points=points, seeds=list(seeds),
                        best_point=best_point, best_mean_metric=best_mean,
                        all_failed=all_failed)


# ---------------------------------------------------------------------------
# dev-based variant selection and multi-run aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VariantScore:
    dev_metric: float
    pretrain_steps: int


def select_variant(scores: Mapping[str, VariantScore]) -> str:
    """Argmax by dev metric; ties break toward fewest pre-training steps,
    then variant id for determinism."""
    if not scores:
        raise ValueError("select_variant: empty map")
    return min(scores, key=lambda k: (-scores[k].dev_metric, scores[k].pretrain_steps, k))


@dataclass
class RunAggregate:
    minimum: float
    maximum: float
    mean: float
    runs: int


def aggregate_runs(values: Sequence[float]) -> RunAggregate:
    if not values:
        raise ValueError("aggregate_runs: need at least one run")
    vals = list(values)
    return RunAggregate(minimum=min(vals), maximum=max(vals),
                        mean=sum(vals) / len(vals), runs=len(vals))


# ---------------------------------------------------------------------------
# the learning-rate probe task: a loss surface whose gradient-descent
# dynamics provably diverge above a curvature-determined threshold
# ---------------------------------------------------------------------------

class _QuadraticProbeModel:
    def __init__(self, curvature: float, learning_rate: float, batch_size: int,
                 n_train: int):
        self.curvature = curvature
        self.lr = learning_rate
        self.steps_per_epoch = max(1, math.ceil(n_train / batch_size))
        self.w = 1.0

    def _loss_value(self) -> float:
        val = 0.5 * self.curvature * self.w * self.w
        return val if math.isfinite(val) and abs(val) < 3e38 else math.inf

    def train_epoch(self) -> float:
        total = 0.0
        for _ in range(self.steps_per_epoch):
            total += self._loss_value()
            grad = self.curvature * self.w
            self.w -= self.lr * grad
            if not math.isfinite(self.w) or abs(self.w) > 1e18:
                return math.inf
        return total / self.steps_per_epoch

    def validation_loss(self) -> float:
        return self._loss_value()

    def metric(self) -> float:
        return max(0.0, 1.0 - min(1.0, abs(self.w)))

    def snapshot(self):
        return self.w

    def restore(self, snap):
        self.w = snap


@dataclass
class QuadraticProbeTask:
    """Scalar quadratic trained by plain gradient descent: the update factor is
    (1 - lr * curvature), so runs converge iff lr < 2/curvature. The default
    curvature 1.4e5 puts the threshold between 1e-5 and 2e-5."""

    task_id: str = "lr-probe"
    curvature: float = 1.4e5
    n_train: int = 64

    def build(self, learning_rate: float, batch_size: int, dropout: float, seed: int):
        return _QuadraticProbeModel(self.curvature, learning_rate, batch_size, self.n_train)
