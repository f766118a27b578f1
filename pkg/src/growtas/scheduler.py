"""Progressive subnet sampling, stage schedule and restricted fine-tuning."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass

from .data import Dataset
from .errors import ConfigurationError, InputError, NumericError
from .rng import SeededRng
from .space import Architecture, SearchSpace, SubspacePartition, sample_uniform
from .supernet import OptimConfig, SliceMap, SupernetWeights, slice_map, train_step

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "stage", "step", "arch_hash", "arch", "loss")


@dataclass(frozen=True)
class Schedule:
    """Transition epochs ``T_0=0 < T_1 < ... < T_K``; stage k covers ``[T_{k-1}, T_k)``."""

    transitions: tuple

    def __post_init__(self):
        t = tuple(int(x) for x in self.transitions)
        object.__setattr__(self, "transitions", t)
        if len(t) < 2 or t[0] != 0:
            raise ConfigurationError(f"schedule must start at epoch 0 and have >= 1 stage, got {t}")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ConfigurationError(f"transition epochs must be strictly increasing, got {t}")

    @classmethod
    def two_stage(cls, total_epochs: int, t1: int) -> "Schedule":
        return cls((0, t1, total_epochs))

    @classmethod
    def single(cls, total_epochs: int) -> "Schedule":
        return cls((0, total_epochs))

    @property
    def K(self) -> int:
        return len(self.transitions) - 1

    @property
    def total_epochs(self) -> int:
        return self.transitions[-1]

    def stage_at(self, t: int) -> int:
        if not 0 <= t < self.total_epochs:
            raise InputError(f"epoch {t} outside [0, {self.total_epochs})")
        for k in range(1, self.K + 1):
            if t < self.transitions[k]:
                return k
        raise AssertionError("unreachable")


def stage_at(schedule: Schedule, t: int) -> int:
    return schedule.stage_at(t)


def cosine_lr(step: int, total_steps: int, peak: float, floor: float) -> float:
    """Cosine decay from ``peak`` at step 0 to ``floor`` at the final step."""
    if total_steps <= 1:
        return peak
    frac = step / (total_steps - 1)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * frac))


@dataclass
class LogRecord:
    epoch: int
    stage: int
    step: int
    arch: Architecture
    loss: float

    def row(self) -> dict:
        return {"epoch": self.epoch, "stage": self.stage, "step": self.step,
                "arch_hash": self.arch.arch_hash(), "arch": self.arch.encode(), "loss": repr(self.loss)}


def log_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


class TrainingAborted(NumericError):
    """Numeric failure mid-training; carries the state at the start of the failing epoch."""

    def __init__(self, message, epoch, last_good: SupernetWeights, rng_state: dict):
        super().__init__(message)
        self.epoch = epoch
        self.last_good = last_good
        self.rng_state = rng_state


def _run_epochs(weights, space, dataset, opt, rng, epochs, first_epoch, total_epochs,
                draw, stage_of, lr_peak, lr_floor, frozen, records, on_epoch_end, track_epoch=True):
    steps_per_epoch = math.ceil(len(dataset) / opt.batch_size)
    total_steps = steps_per_epoch * total_epochs
    for t in range(first_epoch, epochs):
        snapshot, rng_state = weights.copy(), rng.get_state()
        k = stage_of(t)
        order = rng.permutation(len(dataset))
        try:
            for j, (xb, yb) in enumerate(dataset.batches(opt.batch_size, order)):
                arch = draw(k)
                lr = cosine_lr(t * steps_per_epoch + j, total_steps, lr_peak, lr_floor)
                loss = train_step(weights, arch, xb, yb, opt, lr=lr, frozen=frozen)
                records.append(LogRecord(t, k, t * steps_per_epoch + j, arch, loss))
        except NumericError as exc:
            raise TrainingAborted(f"epoch {t}: {exc}", t, snapshot, rng_state) from exc
        if track_epoch:
            weights.epoch = t + 1
        if on_epoch_end is not None:
            on_epoch_end(t, weights, rng)
    return records


def train_grow_tas(weights: SupernetWeights, space: SearchSpace, partition: SubspacePartition,
                   schedule: Schedule, dataset: Dataset, opt: OptimConfig, rng: SeededRng,
                   start_epoch: int = 0, stop_epoch: int | None = None, on_epoch_end=None) -> list:
    """Supernet training with ``P(t) = U(A_k)`` for ``T_{k-1} <= t < T_k``.

    Each epoch draws a fresh shuffle, then one architecture per mini-batch
    from the current stage. The learning rate follows a single cosine decay
    from ``opt.lr`` to ``opt.min_lr`` over all ``T_K`` epochs. Training resumes
    at ``start_epoch`` (the RNG must already hold the matching state) and
    stops before ``stop_epoch``. Returns the per-step log records.
    """
    if schedule.K != partition.K:
        raise ConfigurationError(f"schedule has {schedule.K} stages but the partition has {partition.K}")
    partition.check(space)
    stop = schedule.total_epochs if stop_epoch is None else stop_epoch
    records = []
    return _run_epochs(weights, space, dataset, opt, rng, stop, start_epoch, schedule.total_epochs,
                       lambda k: sample_uniform(space, partition, k, rng), schedule.stage_at,
                       opt.lr, opt.min_lr, None, records, on_epoch_end)


def train_uniform(weights, space, epochs, dataset, opt, rng, start_epoch=0, on_epoch_end=None) -> list:
    """Baseline supernet training: every step samples ``U(A)``."""
    records = []
    return _run_epochs(weights, space, dataset, opt, rng, epochs, start_epoch, epochs,
                       lambda k: sample_uniform(space, None, None, rng), lambda t: 1,
                       opt.lr, opt.min_lr, None, records, on_epoch_end)


def train_standalone(weights, arch, epochs, dataset, opt, rng) -> list:
    """Train a single fixed architecture (used for the grow/crop references)."""
    records = []
    return _run_epochs(weights, None, dataset, opt, rng, epochs, 0, epochs,
                       lambda k: arch, lambda t: 1, opt.lr, opt.min_lr, None, records, None, False)


# ----------------------------------------------------------------- fine-tuning
def build_freeze_mask(space: SearchSpace, partition: SubspacePartition) -> SliceMap:
    """Region of the attribute-wise largest member of ``A_1`` (all of it is frozen)."""
    if partition.K < 2:
        raise ConfigurationError("restricted fine-tuning needs at least two stages")
    top = partition.stage_max_arch(space, 1)
    return slice_map(top, space.head_dim, space.input_dim, space.num_classes)


def sample_complement(space, partition, rng, max_tries: int = 1000) -> Architecture:
    """Uniform draw from ``A_K \\ A_1`` by rejection from ``U(A_K)``."""
    for _ in range(max_tries):
        arch = sample_uniform(space, partition, partition.K, rng)
        if not partition.member(arch, 1):
            return arch
    raise ConfigurationError(f"no architecture outside A_1 after {max_tries} draws; is A_1 the whole space?")


@dataclass
class FinetuneConfig:
    epochs: int = 2
    lr: float | None = None  # default: opt.lr / 20
    min_lr: float | None = None  # default: lr / 5


def finetune_plus(weights: SupernetWeights, space: SearchSpace, partition: SubspacePartition,
                  mask: SliceMap, dataset: Dataset, ft: FinetuneConfig, opt: OptimConfig,
                  rng: SeededRng) -> list:
    """Fine-tune on ``U(A_K \\ A_1)`` with the ``A_1`` region frozen, in place.

    Frozen parameters, moments and step counts are never written, so every
    ``A_1`` subnet computes exactly the same function afterwards.
    """
    expected = build_freeze_mask(space, partition)
    if expected.regions.keys() != mask.regions.keys() or any(
            expected.extents(n) != mask.extents(n) for n in mask.regions):
        raise ConfigurationError("freeze mask was not built from this partition")
    if ft.epochs == 0:
        return []
    if partition.stage_max_arch(space, 1) == space.max_arch:
        log.warning("A_1 covers the whole space; restricted fine-tuning has nothing to train")
        return []
    lr = opt.lr / 20.0 if ft.lr is None else ft.lr
    floor = lr / 5.0 if ft.min_lr is None else ft.min_lr
    records = []
    return _run_epochs(weights, space, dataset, opt, rng, ft.epochs, 0, ft.epochs,
                       lambda k: sample_complement(space, partition, rng), lambda t: partition.K,
                       lr, floor, mask, records, None, False)
