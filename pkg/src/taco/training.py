"""The learners: fully supervised cloning, the two-stage classifier
baselines, and the joint alignment-and-cloning objective.

All four share the same plumbing: an adaptive gradient optimizer, seeded
shuffling and dropout streams, per-timestep loss normalization (so the
learning rate does not depend on trajectory length or sketch length), and a
skip-with-warning policy for trajectories whose lattice underflows.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .alignment import (
    STOP_TARGET_EPS,
    AlignmentLattice,
    Sketch,
    SoftAlignment,
    Trajectory,
    ctc_forward,
    ctc_stop_targets,
    decode_argmax,
    soft_alignment,
    taco_forward,
)
from .autodiff import Tensor
from .errors import DegenerateLatticeError, StructuralError
from .policy import (
    PolicyLibrary,
    SubtaskClassifier,
    action_log_prob,
    init_classifier,
    init_library,
    sample_dropout_mask,
    stop_prob,
)
from .seeding import derive_seed, substream

ALGORITHMS = ("gt-bc", "ctc-bc-argmax", "ctc-bc-prob", "taco")


@dataclass
class DemoItem:
    trajectory: Trajectory
    sketch: Sketch
    alignment: np.ndarray | None = None  # length-T sub-task ids
    latents: dict | None = None  # optional simulator debug payload

    def __post_init__(self):
        if self.alignment is not None:
            self.alignment = np.asarray(self.alignment, dtype=int)
            if self.alignment.shape != (self.trajectory.T,):
                raise StructuralError("alignment length must equal trajectory length")
            collapsed = [int(self.alignment[0])]
            for k in self.alignment[1:]:
                if int(k) != collapsed[-1]:
                    collapsed.append(int(k))
            if tuple(collapsed) != self.sketch.subtasks:
                raise StructuralError("alignment does not collapse to the sketch")


@dataclass
class Dataset:
    items: list[DemoItem]
    d_s: int
    d_a: int
    K: int

    def __post_init__(self):
        for item in self.items:
            if any(b >= self.K for b in item.sketch):
                raise StructuralError("sketch id out of range for this dataset")

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class TrainConfig:
    algorithm: str = "taco"
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    dropout_initial: float = 0.5
    dropout_decay: float = 0.99
    rng_seed: int = 0
    hidden_sizes: tuple[int, ...] = (100,)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise StructuralError(
                f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}"
            )
        if not (0.0 <= self.dropout_initial < 1.0):
            raise StructuralError("dropout_initial must lie in [0, 1)")
        if not (0.0 < self.dropout_decay <= 1.0):
            raise StructuralError("dropout_decay must lie in (0, 1]")
        if self.learning_rate <= 0:
            raise StructuralError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise StructuralError("epochs and batch_size must be >= 1")

    def dropout_rate(self, epoch: int) -> float:
        return self.dropout_initial * self.dropout_decay**epoch


@dataclass
class TrainReport:
    algorithm: str
    history: list[dict]  # one row per epoch: epoch, loss, dropout_rate, wall_clock_s
    library: PolicyLibrary
    classifier: SubtaskClassifier | None
    wall_clock_s: float
    skipped: int  # trajectories dropped due to degenerate lattices

    @property
    def losses(self) -> list[float]:
        return [row["loss"] for row in self.history]


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    skipped_steps: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adaptive_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Sequence[np.ndarray]:
    """Bias-corrected first/second-moment update, applied in place.

    A non-finite gradient anywhere skips the whole step and bumps the
    counter instead of corrupting the parameters.
    """
    if any(not np.isfinite(g).all() for g in grads):
        state.skipped_steps += 1
        return params
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


class Optimizer:
    """Adam bound to a list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], learning_rate: float):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.state = AdamState.for_params([p.data for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params
        ]
        adaptive_step([p.data for p in self.params], grads, self.state, self.learning_rate)


# -- losses -------------------------------------------------------------------


def stop_targets_from_alignment(alignment: np.ndarray) -> np.ndarray:
    """1 at the last step of every segment and at the final step, else 0."""
    T = alignment.shape[0]
    y = np.zeros(T)
    y[-1] = 1.0
    y[:-1][alignment[1:] != alignment[:-1]] = 1.0
    return y


def gt_bc_loss(lib: PolicyLibrary, rho: Trajectory, alignment: np.ndarray | None) -> Tensor:
    """Negative log-likelihood of actions plus stop events under a known
    per-timestep segmentation."""
    if alignment is None:
        raise StructuralError("ground-truth alignment is required for this loss")
    alignment = np.asarray(alignment, dtype=int)
    y = stop_targets_from_alignment(alignment)
    total = None
    for k in np.unique(alignment):
        idx = np.flatnonzero(alignment == k)
        policy = lib[int(k)]
        act = action_log_prob(policy, rho.states[idx], rho.actions[idx]).sum()
        sp = stop_prob(policy, rho.states[idx])
        yk = y[idx]
        stop_ll = (Tensor(yk) * sp.log() + Tensor(1.0 - yk) * (1.0 - sp).log()).sum()
        term = act + stop_ll
        total = term if total is None else total + term
    return -total


def taco_loss(
    lib: PolicyLibrary,
    batch: Iterable[DemoItem],
    dropout_masks: Sequence[dict[int, np.ndarray] | None] | None = None,
) -> tuple[Tensor | None, int, int]:
    """Summed negative joint log-likelihood over a batch.

    Returns (loss node or None if every item degenerated, total timesteps,
    skipped count). Divide by the timestep total for the normalized loss.
    """
    items = list(batch)
    if dropout_masks is None:
        dropout_masks = [None] * len(items)
    total = None
    n_steps = 0
    skipped = 0
    for item, masks in zip(items, dropout_masks):
        try:
            lattice = taco_forward(lib, item.trajectory, item.sketch, masks)
        except DegenerateLatticeError:
            skipped += 1
            continue
        term = -lattice.log_likelihood
        total = term if total is None else total + term
        n_steps += item.trajectory.T
    return total, n_steps, skipped


def ctc_loss(
    clf: SubtaskClassifier, batch: Iterable[DemoItem]
) -> tuple[Tensor | None, int, int]:
    """Summed negative sketch log-likelihood of the classifier over a batch."""
    total = None
    n_steps = 0
    skipped = 0
    for item in batch:
        try:
            lattice = ctc_forward(clf, item.trajectory, item.sketch)
        except DegenerateLatticeError:
            skipped += 1
            continue
        term = -lattice.log_likelihood
        total = term if total is None else total + term
        n_steps += item.trajectory.T
    return total, n_steps, skipped


@dataclass
class WeightedItem:
    """A demonstration with frozen soft-alignment weights and stop targets."""

    item: DemoItem
    p: np.ndarray  # (T, L) soft alignment
    targets: np.ndarray  # (T, L) raw non-stop targets
    defined: np.ndarray  # (T, L) cells with a usable target


def weighted_bc_loss(lib: PolicyLibrary, witem: WeightedItem) -> Tensor:
    """Soft-alignment-weighted cloning loss for one demonstration.

    Action log-densities are weighted by the per-cell alignment mass; stop
    heads get a soft Bernoulli cross-entropy against the derived non-stop
    targets (clamped to valid parameters), weighted by the mass that was in
    the cell at the previous step. Undefined cells are excluded.
    """
    rho, tau = witem.item.trajectory, witem.item.sketch
    p, targets, defined = witem.p, witem.targets, witem.defined
    L = len(tau)
    act_ll: dict[int, Tensor] = {}
    for k in dict.fromkeys(tau):
        act_ll[k] = action_log_prob(lib[k], rho.states, rho.actions)
    total = None
    for l, k in enumerate(tau.subtasks):
        term = (Tensor(p[:, l]) * act_ll[k]).sum()
        rows = np.flatnonzero(defined[:, l])
        if rows.size:
            g = np.clip(targets[rows, l], STOP_TARGET_EPS, 1.0 - STOP_TARGET_EPS)
            w = p[rows - 1, l]
            sp = stop_prob(lib[k], rho.states[rows])
            xent = Tensor(w * g) * (1.0 - sp).log() + Tensor(w * (1.0 - g)) * sp.log()
            term = term + xent.sum()
        total = term if total is None else total + term
    return -total


# -- training loops -----------------------------------------------------------


def _batches(n: int, batch_size: int, order: np.ndarray) -> Iterable[np.ndarray]:
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _run_epochs(
    items: list[DemoItem],
    optimizer: Optimizer,
    build_batch_loss,
    config: TrainConfig,
    shuffle_rng: np.random.Generator,
    epochs: int,
    history: list[dict],
    t0: float,
    dropout_of_epoch=None,
) -> int:
    """Generic epoch/batch loop; returns the number of skipped trajectories."""
    skipped_total = 0
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(items))
        rate = 0.0 if dropout_of_epoch is None else dropout_of_epoch(epoch)
        epoch_negll = 0.0
        epoch_steps = 0
        for batch_idx in _batches(len(items), config.batch_size, order):
            batch = [items[i] for i in batch_idx]
            loss, n_steps, skipped = build_batch_loss(batch, rate)
            skipped_total += skipped
            if loss is None or n_steps == 0:
                continue
            normalized = loss / float(n_steps)
            optimizer.zero_grad()
            normalized.backward()
            optimizer.step()
            epoch_negll += float(loss.data)
            epoch_steps += n_steps
        history.append(
            {
                "epoch": len(history),
                "loss": epoch_negll / max(1, epoch_steps),
                "dropout_rate": rate,
                "wall_clock_s": time.perf_counter() - t0,
            }
        )
    return skipped_total


def train(config: TrainConfig, data: Dataset) -> TrainReport:
    """Dispatch over the four algorithms; reproducible from config.rng_seed."""
    if not data.items:
        raise StructuralError("training data is empty")
    t0 = time.perf_counter()
    seed = config.rng_seed
    library = init_library(
        data.K, data.d_s, data.d_a, config.hidden_sizes, derive_seed(seed, "init")
    )
    shuffle_rng = substream(seed, "shuffle")
    dropout_rng = substream(seed, "dropout")
    history: list[dict] = []
    classifier = None
    skipped = 0

    if config.algorithm == "gt-bc":
        for item in data.items:
            if item.alignment is None:
                raise StructuralError(
                    "gt-bc requires ground-truth alignments on every demonstration"
                )
        optimizer = Optimizer(library.parameters(), config.learning_rate)

        def gt_batch(batch, rate):
            total = None
            n_steps = 0
            for item in batch:
                term = gt_bc_loss(library, item.trajectory, item.alignment)
                total = term if total is None else total + term
                n_steps += item.trajectory.T
            return total, n_steps, 0

        skipped += _run_epochs(
            data.items, optimizer, gt_batch, config, shuffle_rng,
            config.epochs, history, t0,
        )

    elif config.algorithm == "taco":
        optimizer = Optimizer(library.parameters(), config.learning_rate)
        n_hidden = sum(config.hidden_sizes)

        def taco_batch(batch, rate):
            masks = []
            for item in batch:
                masks.append(
                    {
                        k: sample_dropout_mask(dropout_rng, n_hidden, rate)
                        for k in dict.fromkeys(item.sketch)
                    }
                )
            return taco_loss(library, batch, masks)

        skipped += _run_epochs(
            data.items, optimizer, taco_batch, config, shuffle_rng,
            config.epochs, history, t0, dropout_of_epoch=config.dropout_rate,
        )

    elif config.algorithm in ("ctc-bc-argmax", "ctc-bc-prob"):
        classifier = init_classifier(
            data.K, data.d_s, data.d_a, config.hidden_sizes, derive_seed(seed, "clf")
        )
        clf_opt = Optimizer(classifier.parameters(), config.learning_rate)

        def clf_batch(batch, rate):
            return ctc_loss(classifier, batch)

        skipped += _run_epochs(
            data.items, clf_opt, clf_batch, config, shuffle_rng,
            config.epochs, history, t0,
        )

        # Stage 2: freeze the classifier, align every demonstration once,
        # then clone the sub-policies against that alignment.
        pol_opt = Optimizer(library.parameters(), config.learning_rate)
        if config.algorithm == "ctc-bc-argmax":
            # Decoded alignments need not be monotone paths, so they are kept
            # as raw id arrays rather than validated DemoItems.
            aligned: list[tuple[Trajectory, np.ndarray]] = []
            for item in data.items:
                try:
                    lattice = ctc_forward(classifier, item.trajectory, item.sketch)
                except DegenerateLatticeError:
                    skipped += 1
                    continue
                aligned.append((item.trajectory, decode_argmax(lattice)))
            if not aligned:
                raise DegenerateLatticeError("every trajectory degenerated in stage 1")

            def argmax_batch(batch, rate):
                total = None
                n_steps = 0
                for rho, ids in batch:
                    term = gt_bc_loss(library, rho, ids)
                    total = term if total is None else total + term
                    n_steps += rho.T
                return total, n_steps, 0

            skipped += _run_epochs(
                aligned, pol_opt, argmax_batch, config, shuffle_rng,
                config.epochs, history, t0,
            )
        else:
            weighted: list[WeightedItem] = []
            for item in data.items:
                try:
                    lattice = ctc_forward(classifier, item.trajectory, item.sketch)
                except DegenerateLatticeError:
                    skipped += 1
                    continue
                soft = soft_alignment(lattice)
                targets, defined = ctc_stop_targets(soft)
                weighted.append(WeightedItem(item, soft.p, targets, defined))
            if not weighted:
                raise DegenerateLatticeError("every trajectory degenerated in stage 1")

            def prob_batch(batch, rate):
                total = None
                n_steps = 0
                for witem in batch:
                    term = weighted_bc_loss(library, witem)
                    total = term if total is None else total + term
                    n_steps += witem.item.trajectory.T
                return total, n_steps, 0

            skipped += _run_epochs(
                weighted, pol_opt, prob_batch, config, shuffle_rng,
                config.epochs, history, t0,
            )

    return TrainReport(
        algorithm=config.algorithm,
        history=history,
        library=library,
        classifier=classifier,
        wall_clock_s=time.perf_counter() - t0,
        skipped=skipped,
    )


def write_history_csv(report: TrainReport, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "dropout_rate", "wall_clock_s"])
        for row in report.history:
            writer.writerow(
                [
                    row["epoch"],
                    repr(row["loss"]),
                    repr(row["dropout_rate"]),
                    f"{row['wall_clock_s']:.3f}",
                ]
            )
