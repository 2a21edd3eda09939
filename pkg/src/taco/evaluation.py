"""Test-time composition of sub-policies and the three accuracy metrics.

A rollout executes the sketch left to right: the active sub-policy steps the
world (mean actions by default) and hands over to the next sketch entry the
first time its own stop probability crosses the threshold. Every sub-task
takes at least one step before it may stop, mirroring how the alignment
recursion only allows a switch from the second state of a segment onward. A
per-sub-task step cap guarantees termination.

Alignment accuracy decodes held-out demonstrations through the appropriate
forward lattice (policy lattice for libraries, classifier lattice for
classifiers) and scores per-timestep agreement with the ground truth.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alignment import ctc_forward, decode_argmax, taco_forward
from .errors import DegenerateLatticeError, StructuralError
from .navworld import WorldConfig, World, observe, sample_sketch, sample_world, step
from .policy import PolicyLibrary, SubtaskClassifier
from .seeding import substream
from .training import Dataset


@dataclass(frozen=True)
class EvalConfig:
    n_tasks: int = 100
    l_test: int = 4
    stop_threshold: float = 0.5
    per_subtask_step_cap: int = 300
    deterministic_actions: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.stop_threshold <= 1.0:
            raise StructuralError("stop_threshold must lie in (0, 1]")
        if self.per_subtask_step_cap < 1 or self.n_tasks < 1 or self.l_test < 1:
            raise StructuralError("caps and counts must be positive")


@dataclass
class RolloutResult:
    successes: list[bool]  # one flag per sketch entry
    steps: list[int]
    terminated_by: list[str]  # "stop-threshold" or "step-cap"

    @property
    def task_success(self) -> bool:
        return all(self.successes)


def rollout(
    policies,
    world: World,
    sketch,
    cfg: EvalConfig,
    world_cfg: WorldConfig,
    rng: np.random.Generator | None = None,
) -> RolloutResult:
    """Execute the sketch; ``policies`` maps id -> object with
    ``mean_action(s)`` and ``stop_probability(s)`` (and ``d_a`` if actions
    are sampled)."""
    pos = np.array(world.agent_start, dtype=np.float64)
    successes, steps_used, terminated = [], [], []
    for k in sketch:
        policy = policies[k]
        n = 0
        while True:
            s = observe(world, pos)
            if n > 0 and float(policy.stop_probability(s)) > cfg.stop_threshold:
                terminated.append("stop-threshold")
                break
            if n >= cfg.per_subtask_step_cap:
                terminated.append("step-cap")
                break
            a = policy.mean_action(s)
            if not cfg.deterministic_actions:
                a = a + rng.standard_normal(a.shape[-1])
            pos = step(pos, a, world_cfg.dt)
            n += 1
        steps_used.append(n)
        successes.append(
            float(np.linalg.norm(world.destinations[k] - pos)) <= world_cfg.reach_radius
        )
    return RolloutResult(successes=successes, steps=steps_used, terminated_by=terminated)


def evaluate_policies(
    policies, cfg: EvalConfig, world_cfg: WorldConfig
) -> dict:
    """Task and sub-task accuracy over freshly sampled worlds and sketches."""
    n_tasks_ok = 0
    n_subtasks_ok = 0
    n_subtasks = 0
    for i in range(cfg.n_tasks):
        rng = substream(cfg.rng_seed, "eval", "task", i)
        world = sample_world(world_cfg, rng)
        sketch = sample_sketch(rng, cfg.l_test)
        result = rollout(policies, world, sketch, cfg, world_cfg, rng=rng)
        n_tasks_ok += result.task_success
        n_subtasks_ok += sum(result.successes)
        n_subtasks += len(result.successes)
    return {
        "task_accuracy": n_tasks_ok / cfg.n_tasks,
        "subtask_accuracy": n_subtasks_ok / n_subtasks,
    }


def task_accuracy(policies, cfg: EvalConfig, world_cfg: WorldConfig) -> float:
    return evaluate_policies(policies, cfg, world_cfg)["task_accuracy"]


def subtask_accuracy(policies, cfg: EvalConfig, world_cfg: WorldConfig) -> float:
    return evaluate_policies(policies, cfg, world_cfg)["subtask_accuracy"]


def alignment_accuracy(model, heldout: Dataset) -> tuple[float, int]:
    """Mean per-timestep agreement (in percent) between decoded and
    ground-truth alignments; returns (percentage, excluded count)."""
    if isinstance(model, PolicyLibrary):
        run = lambda item: taco_forward(model, item.trajectory, item.sketch)
    elif isinstance(model, SubtaskClassifier):
        run = lambda item: ctc_forward(model, item.trajectory, item.sketch)
    else:
        raise StructuralError(
            "alignment accuracy needs a PolicyLibrary or a SubtaskClassifier"
        )
    scores = []
    excluded = 0
    for item in heldout.items:
        if item.alignment is None:
            raise StructuralError("held-out items must carry ground-truth alignments")
        try:
            lattice = run(item)
        except DegenerateLatticeError:
            excluded += 1
            continue
        decoded = decode_argmax(lattice)
        scores.append(float(np.mean(decoded == item.alignment)))
    if not scores:
        raise DegenerateLatticeError("every held-out trajectory degenerated")
    return 100.0 * float(np.mean(scores)), excluded


class OraclePolicy:
    """Scripted reference policy: expert controller plus a radius stop rule."""

    def __init__(self, target_id: int, world_cfg: WorldConfig):
        self.target_id = target_id
        self.cfg = world_cfg
        self.d_a = 2

    def _offset(self, s: np.ndarray) -> np.ndarray:
        return s[2 * self.target_id : 2 * self.target_id + 2]

    def mean_action(self, s: np.ndarray) -> np.ndarray:
        v = self._offset(s) / self.cfg.dt
        speed = float(np.linalg.norm(v))
        if speed > self.cfg.v_max:
            v = v * (self.cfg.v_max / speed)
        return v

    def stop_probability(self, s: np.ndarray) -> float:
        return 1.0 if np.linalg.norm(self._offset(s)) <= self.cfg.reach_radius else 0.0


def oracle_policies(world_cfg: WorldConfig) -> dict[int, OraclePolicy]:
    return {k: OraclePolicy(k, world_cfg) for k in range(4)}


# -- report files --------------------------------------------------------------


def write_metrics(
    path_json,
    path_csv,
    *,
    algorithm: str,
    n_demos: int | None,
    l_train: int | None,
    l_test: int,
    task_acc: float,
    subtask_acc: float,
    alignment_pct: float | None,
    n_excluded: int,
    seed: int,
) -> dict:
    report = {
        "algorithm": algorithm,
        "n_demos": n_demos,
        "L_train": l_train,
        "L_test": l_test,
        "task_accuracy": task_acc,
        "subtask_accuracy": subtask_acc,
        "alignment_accuracy_pct": alignment_pct,
        "n_excluded": n_excluded,
        "seed": seed,
    }
    Path(path_json).write_text(json.dumps(report) + "\n", encoding="utf-8")
    with Path(path_csv).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["algorithm", "n_demos", "L_test", "seed", "metric", "value"])
        for metric, value in (
            ("task_accuracy", task_acc),
            ("subtask_accuracy", subtask_acc),
            ("alignment_accuracy_pct", alignment_pct),
        ):
            writer.writerow(
                [algorithm, n_demos, l_test, seed, metric, "" if value is None else repr(value)]
            )
    return report
