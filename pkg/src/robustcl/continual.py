"""Task streams, replay buffers, and the per-task training loop.

A task stream is an ordered list of class-disjoint datasets with
cumulative class boundaries. Replay comes in two flavours: a
herding-ordered exemplar store rebuilt at each task end, and an
online reservoir that can also pin the model's logits at insertion
time. `run_task` drives one task of adversarial training for any
registered method.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import methods
from .attacks import AttackConfig, pgd, with_seed
from .data import AugmentPolicy, Dataset, augment
from .errors import (ArgumentError, ConfigurationError, ContractError,
                     NumericError)
from .losses import LogitSlice, slice_bounds
from .methods import MethodConfig, RegState
from .network import Network, ParamNodes, sgd_step, snapshot
from .seeding import derive_rng, derive_seed

Array = np.ndarray


# ---------------------------------------------------------------------------
# task streams


@dataclass
class TaskStream:
    tasks: list[Dataset]
    class_order: list[int]            # original class id at each new position
    boundaries: list[int]             # cumulative class counts per task

    def __post_init__(self):
        if any(b2 <= b1 for b1, b2 in zip(self.boundaries, self.boundaries[1:])):
            raise ArgumentError("boundaries must be strictly increasing")
        seen: set[int] = set()
        for task in self.tasks:
            classes = set(int(c) for c in np.unique(task.labels))
            if classes & seen:
                raise ArgumentError("task class sets must be pairwise disjoint")
            seen |= classes

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)


def split_dataset(dataset: Dataset, n_tasks: int, classes_per_task: int,
                  class_order: Sequence[int] | None = None,
                  seed: int = 0) -> TaskStream:
    """Partition a dataset into class-disjoint tasks.

    `class_order` permutes the original class ids; labels are remapped to
    their position in that order so heads grow contiguously. The class
    count must split exactly into n_tasks * classes_per_task.
    """
    if n_tasks < 1 or classes_per_task < 1:
        raise ArgumentError("n_tasks and classes_per_task must be positive")
    n_classes = dataset.n_classes
    if n_tasks * classes_per_task != n_classes:
        raise ArgumentError(
            f"{n_classes} classes do not divide into {n_tasks} tasks "
            f"of {classes_per_task}")
    order = list(range(n_classes)) if class_order is None else [int(c) for c in class_order]
    if sorted(order) != list(range(n_classes)):
        raise ArgumentError("class_order must be a permutation of all classes")
    position = {orig: pos for pos, orig in enumerate(order)}
    new_labels = np.asarray([position[int(c)] for c in dataset.labels], dtype=np.int64)
    tasks = []
    for t in range(n_tasks):
        lo, hi = t * classes_per_task, (t + 1) * classes_per_task
        idx = np.nonzero((new_labels >= lo) & (new_labels < hi))[0]
        rng = derive_rng(seed, task=t, purpose="shuffle")
        idx = idx[rng.permutation(idx.size)]
        tasks.append(Dataset(dataset.inputs[idx], new_labels[idx], n_classes,
                             value_range=dataset.value_range,
                             image_shape=dataset.image_shape))
    boundaries = [(t + 1) * classes_per_task for t in range(n_tasks)]
    return TaskStream(tasks, order, boundaries)


def slice_logits(logits, boundaries: Sequence[int], i: int, j: int) -> LogitSlice:
    """Columns covering tasks i+1..j, with the global offset recorded."""
    start, end = slice_bounds(boundaries, i, j)
    arr = logits.value if hasattr(logits, "value") else np.asarray(logits)
    return LogitSlice(arr[:, start:end], start)


# ---------------------------------------------------------------------------
# herding exemplar selection


def herding_select(features: Array, m: int) -> list[int]:
    """Greedy herding order: each pick keeps the running mean closest
    (L2) to the class mean; ties go to the lowest index."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ArgumentError("herding needs a nonempty (n, d) feature matrix")
    n = features.shape[0]
    if not 0 < m <= n:
        raise ArgumentError(f"cannot select {m} of {n} examples")
    target = features.mean(axis=0)
    selected: list[int] = []
    running = np.zeros(features.shape[1])
    available = np.ones(n, dtype=bool)
    for k in range(1, m + 1):
        cand_means = (running + features) / k
        dists = np.linalg.norm(target - cand_means, axis=1)
        dists[~available] = np.inf
        pick = int(np.argmin(dists))
        selected.append(pick)
        running += features[pick]
        available[pick] = False
    return selected


class HerdingBuffer:
    """Fixed-capacity exemplar store, herding-ordered per class.

    Capacity is constant across tasks; per-class quotas are
    floor(capacity / classes seen) with the remainder going to the
    lowest class ids. Shrinking a quota truncates from the tail, so the
    stored set is always a prefix of each class's herding order.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ArgumentError("capacity must be positive")
        self.capacity = int(capacity)
        self._store: dict[int, tuple[Array, Array]] = {}   # class -> (xs, ys)

    def __len__(self) -> int:
        return sum(xs.shape[0] for xs, _ in self._store.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self._store)

    def quotas(self, class_ids: Sequence[int]) -> dict[int, int]:
        ids = sorted(class_ids)
        base, rem = divmod(self.capacity, len(ids))
        return {c: base + (1 if rank < rem else 0) for rank, c in enumerate(ids)}

    def as_arrays(self) -> tuple[Array, Array]:
        if not self._store:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        xs = np.concatenate([self._store[c][0] for c in self.classes])
        ys = np.concatenate([self._store[c][1] for c in self.classes])
        return xs, ys


def buffer_update_herding(buffer: HerdingBuffer, model: Network,
                          task_dataset: Dataset,
                          boundaries: Sequence[int] | None = None) -> HerdingBuffer:
    """Admit a finished task's classes and rebalance all quotas."""
    new_classes = sorted(int(c) for c in np.unique(task_dataset.labels))
    all_classes = sorted(set(buffer.classes) | set(new_classes))
    quota = buffer.quotas(all_classes)
    for c in buffer.classes:
        xs, ys = buffer._store[c]
        keep = min(quota[c], xs.shape[0])
        buffer._store[c] = (xs[:keep], ys[:keep])
    for c in new_classes:
        idx = task_dataset.class_indices(c)
        feats = model.features(task_dataset.inputs[idx])
        m = min(quota[c], idx.size)
        order = herding_select(feats, m) if m > 0 else []
        chosen = idx[np.asarray(order, dtype=np.intp)] if order else idx[:0]
        buffer._store[c] = (task_dataset.inputs[chosen].copy(),
                            task_dataset.labels[chosen].copy())
    if len(buffer) > buffer.capacity:
        raise ContractError("herding buffer exceeded its capacity")
    return buffer


# ---------------------------------------------------------------------------
# reservoir buffer


class ReservoirBuffer:
    """Classic reservoir sampler over a stream, optionally pinning logits."""

    def __init__(self, capacity: int, with_logits: bool = False, seed: int = 0):
        if capacity < 1:
            raise ArgumentError("capacity must be positive")
        self.capacity = int(capacity)
        self.with_logits = with_logits
        self.seen_count = 0
        self._xs: list[Array] = []
        self._ys: list[int] = []
        self._zs: list[Array | None] = []
        self._rng = derive_rng(seed, purpose="reservoir")

    def __len__(self) -> int:
        return len(self._xs)

    def sample_batch(self, n: int, rng: np.random.Generator
                     ) -> tuple[Array, Array, list[Array | None]]:
        k = min(n, len(self._xs))
        idx = rng.choice(len(self._xs), size=k, replace=False)
        xs = np.stack([self._xs[i] for i in idx]) if k else np.zeros((0, 0))
        ys = np.asarray([self._ys[i] for i in idx], dtype=np.int64)
        zs = [self._zs[i] for i in idx]
        return xs, ys, zs


def reservoir_update(buffer: ReservoirBuffer, sample: tuple[Array, int],
                     logits: Array | None = None) -> ReservoirBuffer:
    """Offer one stream element; retention follows capacity/seen_count."""
    x, y = sample
    x = np.asarray(x, dtype=np.float64).copy()
    z = None if logits is None else np.asarray(logits, dtype=np.float64).copy()
    if buffer.with_logits and z is None:
        raise ConfigurationError("this reservoir stores logits; none were given")
    buffer.seen_count += 1
    if len(buffer) < buffer.capacity:
        buffer._xs.append(x)
        buffer._ys.append(int(y))
        buffer._zs.append(z)
        return buffer
    j = int(buffer._rng.integers(0, buffer.seen_count))
    if j < buffer.capacity:
        buffer._xs[j] = x
        buffer._ys[j] = int(y)
        buffer._zs[j] = z
    return buffer


# ---------------------------------------------------------------------------
# schedules and the task loop


@dataclass(frozen=True)
class Schedule:
    epochs: int
    lr: float
    batch_size: int
    weight_decay: float = 1e-5
    milestones: tuple[int, ...] | None = None
    lr_decay: float = 0.1

    # reference milestones (24, 31, 40) assume a 50-epoch task; scale them
    def resolved_milestones(self) -> tuple[int, ...]:
        if self.milestones is not None:
            return tuple(self.milestones)
        return tuple(int(round(self.epochs * m / 50)) for m in (24, 31, 40))

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.resolved_milestones() if epoch >= m)
        return self.lr * (self.lr_decay ** drops)


def _params_digest(net: Network) -> str:
    h = hashlib.sha256()
    for layer in net.layers:
        h.update(np.ascontiguousarray(layer.weight).tobytes())
        h.update(np.ascontiguousarray(layer.bias).tobytes())
    return h.hexdigest()


def _merged_pool(task_data: Dataset, buffer, cfg: MethodConfig
                 ) -> tuple[Array, Array]:
    xs, ys = task_data.inputs, task_data.labels
    if (cfg.info.composition == "merged" and isinstance(buffer, HerdingBuffer)
            and len(buffer) > 0):
        bx, by = buffer.as_arrays()
        xs = np.concatenate([xs, bx])
        ys = np.concatenate([ys, by])
    return xs, ys


def run_task(student: Network, teacher: Network | None, task_data: Dataset,
             buffer, method_cfg: MethodConfig, schedule: Schedule, *,
             reg: RegState | None = None, root_seed: int = 0,
             task_index: int = 1, log_subsample: int = 64) -> tuple[Network, list[dict]]:
    """Train the (already head-expanded) student on one task.

    Per batch: optional augmentation, PGD with the method's attack
    config, the method loss, one SGD step. Returns the trained network
    and per-epoch rows (task, epoch, train_loss, clean_acc, robust_acc).
    The teacher is never touched; this is checked by hashing.
    """
    if student.frozen:
        raise ContractError("cannot train a frozen network")
    if teacher is not None and not teacher.frozen:
        raise ContractError("the teacher must be a frozen snapshot")
    teacher_digest = _params_digest(teacher) if teacher is not None else None

    info = method_cfg.info
    pool_x, pool_y = _merged_pool(task_data, buffer, method_cfg)
    n_pool = pool_x.shape[0]
    clamp = task_data.value_range
    attack_base = method_cfg.attack
    if attack_base.clamp_range is None and clamp is not None:
        attack_base = replace(attack_base, clamp_range=clamp)

    policy = None
    if method_cfg.augment:
        policy = AugmentPolicy(seed=derive_seed(root_seed, task_index, 0, "augment"))

    log: list[dict] = []
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        order = derive_rng(root_seed, task_index, epoch, "shuffle").permutation(n_pool)
        buffer_rng = derive_rng(root_seed, task_index, epoch, "buffer-draw")
        epoch_losses: list[float] = []
        for b, start in enumerate(range(0, n_pool, schedule.batch_size)):
            idx = order[start:start + schedule.batch_size]
            x, y = pool_x[idx], pool_y[idx]
            try:
                if policy is not None:
                    x = augment(x, policy, value_range=clamp,
                                image_shape=task_data.image_shape,
                                rng=derive_rng(root_seed, task_index, epoch,
                                               "augment", extra=b))
                frozen = snapshot(student)
                atk = with_seed(attack_base,
                                derive_seed(root_seed, task_index, epoch,
                                            "attack", b))
                x_adv = pgd(frozen, x, y, atk)

                buffer_batch = None
                x_adv_buffer = None
                if (info.composition == "separate"
                        and isinstance(buffer, ReservoirBuffer)
                        and len(buffer) > 0):
                    buffer_batch = buffer.sample_batch(schedule.batch_size,
                                                       buffer_rng)
                    atk_b = with_seed(attack_base,
                                      derive_seed(root_seed, task_index, epoch,
                                                  "attack-buffer", b))
                    x_adv_buffer = pgd(frozen, buffer_batch[0], buffer_batch[1],
                                       atk_b)

                params = ParamNodes(student)
                loss, terms = methods.build_training_loss(
                    method_cfg, student, teacher, (x, y), buffer_batch,
                    x_adv, x_adv_buffer, reg, params)
                if not np.isfinite(float(loss.value)):
                    raise NumericError(f"non-finite loss; terms {terms}")
            except NumericError as exc:
                raise NumericError(f"task {task_index} epoch {epoch} "
                                   f"batch {b}: {exc}") from exc
            ad.backward(loss)
            grads = params.grads()
            before = student.flatten()
            after = sgd_step(before, grads, lr, schedule.weight_decay)
            student.load_params(after)
            if info.reg == "si" and reg is not None:
                methods.update_reg_state("si", reg,
                                         step=(grads.vector,
                                               after.vector - before.vector))
            if (epoch == 0 and isinstance(buffer, ReservoirBuffer)):
                z_batch = student.forward(x) if buffer.with_logits else None
                for i in range(x.shape[0]):
                    reservoir_update(buffer, (x[i], int(y[i])),
                                     None if z_batch is None else z_batch[i])
            epoch_losses.append(float(loss.value))

        row = {"task": task_index, "epoch": epoch,
               "train_loss": float(np.mean(epoch_losses)) if epoch_losses else 0.0}
        row.update(_epoch_eval(student, task_data, attack_base, root_seed,
                               task_index, epoch, log_subsample))
        log.append(row)

    if info.reg == "ewc" and reg is not None and schedule.epochs > 0:
        _refresh_fisher(student, task_data, attack_base, method_cfg, reg,
                        root_seed, task_index, schedule.batch_size)
    if info.reg == "si" and reg is not None and schedule.epochs > 0:
        methods.update_reg_state("si", reg, student, consolidate=True,
                                 xi=method_cfg.si_xi)

    if teacher is not None and _params_digest(teacher) != teacher_digest:
        raise ContractError("teacher parameters changed during training")
    return student, log


def _epoch_eval(student: Network, task_data: Dataset, attack: AttackConfig,
                root_seed: int, task_index: int, epoch: int, k: int) -> dict:
    n = len(task_data)
    if n == 0:
        return {"clean_acc": 0.0, "robust_acc": 0.0}
    rng = derive_rng(root_seed, task_index, epoch, "log-subsample")
    idx = rng.choice(n, size=min(k, n), replace=False)
    x, y = task_data.inputs[idx], task_data.labels[idx]
    frozen = snapshot(student)
    clean = float(np.mean(np.argmax(frozen.forward(x), axis=1) == y) * 100.0)
    atk = with_seed(attack, derive_seed(root_seed, task_index, epoch, "eval-attack"))
    x_adv = pgd(frozen, x, y, atk)
    robust = float(np.mean(np.argmax(frozen.forward(x_adv), axis=1) == y) * 100.0)
    return {"clean_acc": clean, "robust_acc": robust}


def _refresh_fisher(student: Network, task_data: Dataset, attack: AttackConfig,
                    cfg: MethodConfig, reg: RegState, root_seed: int,
                    task_index: int, batch_size: int, max_examples: int = 256) -> None:
    rng = derive_rng(root_seed, task_index, 0, "fisher-attack")
    n = len(task_data)
    idx = rng.choice(n, size=min(max_examples, n), replace=False)
    frozen = snapshot(student)
    batches = []
    for start in range(0, idx.size, batch_size):
        part = idx[start:start + batch_size]
        x, y = task_data.inputs[part], task_data.labels[part]
        atk = with_seed(attack, derive_seed(root_seed, task_index, 0,
                                            "fisher-attack", extra=start + 1))
        batches.append((pgd(frozen, x, y, atk), y))
    methods.update_reg_state("ewc-on", reg, student, adv_batches=batches,
                             gamma=cfg.ewc_gamma)
