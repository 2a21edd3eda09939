"""A 2-D navigation benchmark with four destinations and a scripted expert.

The agent observes the (x, y) offset to each destination (8 state dims) and
acts with a velocity (2 action dims). Episodes sample every landmark around
fixed centers, a proportional controller visits the sketched destinations in
order, and demonstrations are collected DART-style: noisy actions are
executed while the clean expert actions are recorded as labels.

Datasets persist as JSON lines (one demonstration per line) next to a JSON
header that records every numeric constant of the generating configuration,
so files are self-describing.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .alignment import Sketch, Trajectory
from .errors import DataError, GenerationError, StructuralError
from .seeding import substream
from .training import Dataset, DemoItem

DATASET_VERSION = 1
DESTINATION_NAMES = ("green", "red", "yellow", "black")
K_SUBTASKS = 4
STATE_DIM = 8
ACTION_DIM = 2
SUBTASK_STEP_CAP = 200


@dataclass(frozen=True)
class WorldConfig:
    """Fixed centers (four destinations then the start) and motion constants."""

    centers: tuple = ((-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0), (0.0, 0.0))
    position_std: float = 0.15
    reach_radius: float = 0.15
    dt: float = 0.1
    v_max: float = 1.0

    def __post_init__(self):
        if len(self.centers) != 5:
            raise StructuralError("need four destination centers plus a start center")
        pts = np.asarray(self.centers, dtype=np.float64)
        dists = [
            float(np.linalg.norm(pts[i] - pts[j]))
            for i in range(5)
            for j in range(i + 1, 5)
        ]
        if self.reach_radius >= min(dists) / 2.0:
            raise StructuralError("reach_radius must be below half the center spacing")
        if self.position_std < 0 or self.dt <= 0 or self.v_max <= 0:
            raise StructuralError("position_std >= 0 and dt, v_max > 0 required")


@dataclass
class World:
    """One episode's sampled landmark positions."""

    destinations: np.ndarray  # (4, 2)
    agent_start: np.ndarray  # (2,)


@dataclass(frozen=True)
class DartNoise:
    """Exploration noise injected into executed (not recorded) actions."""

    action_noise_std: float = 0.1
    std_schedule: tuple = (0.05, 0.1, 0.2)

    def __post_init__(self):
        if self.action_noise_std < 0 or any(s < 0 for s in self.std_schedule):
            raise StructuralError("noise stds must be non-negative")

    def sigma_for(self, demo_index: int) -> float:
        if not self.std_schedule:
            return self.action_noise_std
        return self.std_schedule[demo_index % len(self.std_schedule)]


def sample_world(config: WorldConfig, rng: np.random.Generator) -> World:
    pts = np.asarray(config.centers, dtype=np.float64)
    pts = pts + rng.normal(0.0, config.position_std, pts.shape)
    return World(destinations=pts[:4], agent_start=pts[4])


def observe(world: World, agent_pos: np.ndarray) -> np.ndarray:
    """Offsets to all four destinations, concatenated in id order."""
    return (world.destinations - agent_pos).reshape(-1)


def expert_action(
    world: World, agent_pos: np.ndarray, target_id: int, config: WorldConfig
) -> np.ndarray:
    """Proportional controller: head straight at the target, speed-capped."""
    if not 0 <= target_id < K_SUBTASKS:
        raise StructuralError(f"target id {target_id} out of range")
    v = (world.destinations[target_id] - agent_pos) / config.dt
    speed = float(np.linalg.norm(v))
    if speed > config.v_max:
        v = v * (config.v_max / speed)
    return v


def step(agent_pos: np.ndarray, action: np.ndarray, dt: float) -> np.ndarray:
    return agent_pos + dt * np.asarray(action, dtype=np.float64)


def sample_sketch(rng: np.random.Generator, length: int, K: int = K_SUBTASKS) -> Sketch:
    """Uniform over id sequences without adjacent duplicates."""
    ids = [int(rng.integers(K))]
    while len(ids) < length:
        others = [k for k in range(K) if k != ids[-1]]
        ids.append(others[int(rng.integers(K - 1))])
    return Sketch(tuple(ids))


def generate_demo(
    config: WorldConfig,
    noise: DartNoise,
    sketch: Sketch,
    rng: np.random.Generator,
    demo_index: int = 0,
) -> DemoItem:
    """One demonstration: noisy execution, clean labels, exact alignment.

    The returned item's trajectory records the observation before each step
    and the noise-free expert action; the executed action adds Gaussian
    noise with the schedule's std for this demonstration index. Latent agent
    and landmark positions ride along for debugging.
    """
    world = sample_world(config, rng)
    sigma = noise.sigma_for(demo_index)
    pos = world.agent_start.copy()
    states, actions, alignment, agent_path = [], [], [], []
    for k in sketch:
        dest = world.destinations[k]
        for n_steps in range(SUBTASK_STEP_CAP + 1):
            if n_steps == SUBTASK_STEP_CAP:
                raise GenerationError(
                    f"expert failed to reach destination {k} within "
                    f"{SUBTASK_STEP_CAP} steps; check the world configuration"
                )
            agent_path.append(pos.copy())
            states.append(observe(world, pos))
            label = expert_action(world, pos, k, config)
            actions.append(label)
            alignment.append(k)
            executed = label + sigma * rng.standard_normal(ACTION_DIM)
            pos = step(pos, executed, config.dt)
            if np.linalg.norm(dest - pos) < config.reach_radius:
                break
    return DemoItem(
        trajectory=Trajectory(np.array(states), np.array(actions)),
        sketch=sketch,
        alignment=np.array(alignment),
        latents={
            "agent": np.array(agent_path),
            "destinations": world.destinations.copy(),
            "start": world.agent_start.copy(),
            "sigma_demo": sigma,
        },
    )


def generate_dataset(
    config: WorldConfig,
    noise: DartNoise,
    n_demos: int,
    length: int,
    seed: int,
) -> Dataset:
    """n demonstrations with uniformly sampled sketches, one RNG stream each."""
    if n_demos < 1:
        raise StructuralError("need at least one demonstration")
    if not 1 <= length <= K_SUBTASKS:
        raise StructuralError(f"sketch length must lie in [1, {K_SUBTASKS}]")
    items = []
    for i in range(n_demos):
        rng = substream(seed, "gen", "demo", i)
        sketch = sample_sketch(rng, length)
        items.append(generate_demo(config, noise, sketch, rng, demo_index=i))
    return Dataset(items=items, d_s=STATE_DIM, d_a=ACTION_DIM, K=K_SUBTASKS)


# -- persistence ---------------------------------------------------------------


def _header_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".header.json")


def save_dataset(
    dataset: Dataset,
    path,
    config: WorldConfig,
    noise: DartNoise,
    length: int,
    seed: int,
) -> None:
    """Write JSON-lines demos plus the sidecar header."""
    lines = []
    for item in dataset.items:
        latents = item.latents
        record = {
            "sketch": list(item.sketch.subtasks),
            "states": item.trajectory.states.tolist(),
            "actions": item.trajectory.actions.tolist(),
            "alignment": item.alignment.tolist() if item.alignment is not None else None,
            "latent_positions": None
            if latents is None
            else {
                "agent": latents["agent"].tolist(),
                "destinations": latents["destinations"].tolist(),
                "start": latents["start"].tolist(),
            },
            "sigma_demo": None if latents is None else latents["sigma_demo"],
        }
        lines.append(json.dumps(record))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    header = {
        "version": DATASET_VERSION,
        "d_s": dataset.d_s,
        "d_a": dataset.d_a,
        "K": dataset.K,
        "config": asdict(config),
        "noise": asdict(noise),
        "n": len(dataset.items),
        "L": length,
        "seed": seed,
    }
    _header_path(path).write_text(json.dumps(header) + "\n", encoding="utf-8")


def load_dataset(path) -> tuple[Dataset, dict]:
    try:
        header = json.loads(_header_path(path).read_text(encoding="utf-8"))
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if header.get("version") != DATASET_VERSION:
        raise DataError(
            f"dataset version {header.get('version')} != supported {DATASET_VERSION}"
        )
    items = []
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        item = DemoItem(
            trajectory=Trajectory(np.array(rec["states"]), np.array(rec["actions"])),
            sketch=Sketch(tuple(rec["sketch"])),
            alignment=None if rec["alignment"] is None else np.array(rec["alignment"]),
        )
        if rec.get("latent_positions") is not None:
            lp = rec["latent_positions"]
            item.latents = {
                "agent": np.array(lp["agent"]),
                "destinations": np.array(lp["destinations"]),
                "start": np.array(lp["start"]),
                "sigma_demo": rec["sigma_demo"],
            }
        items.append(item)

    dataset = Dataset(
        items=items, d_s=header["d_s"], d_a=header["d_a"], K=header["K"]
    )
    return dataset, header


def strip_alignments(dataset: Dataset) -> Dataset:
    """Copy of the dataset with ground-truth alignments removed."""
    items = [DemoItem(i.trajectory, i.sketch, None) for i in dataset.items]
    return Dataset(items=items, d_s=dataset.d_s, d_a=dataset.d_a, K=dataset.K)
