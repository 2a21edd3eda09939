"""Forward-lattice alignment of demonstrations with task sketches.

Two dynamic programs share one banded, rescaled forward recursion:

* the classifier lattice, where a cell (t, l) is weighted by the classifier
  probability of sketch entry l given (s_t, a_t);
* the joint policy lattice, where cells are weighted by action densities and
  the edges between consecutive timesteps by stop / non-stop probabilities
  of the involved sub-policies.

Cells outside the feasibility band (too early to have reached l, or too late
to still finish the sketch) are exactly zero. Each row is rescaled to sum to
one over the band; the product of the per-row normalizers reassembles the
unscaled terminal forward variable, whose log is the likelihood. The whole
computation is built from autodiff tensors, so the likelihood is
differentiable with respect to every parameter that feeds it.

Brute-force path enumeration lives here too, as the independent oracle
against which the recursions are tested.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path as FsPath
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor, stack
from .errors import DegenerateLatticeError, StructuralError
from .policy import (
    PolicyLibrary,
    SubtaskClassifier,
    action_log_prob,
    classifier_log_probs,
    stop_prob,
)

# Divisors below this are treated as zero mass when deriving stop targets.
MIN_TARGET_DIVISOR = 1e-12
# The recursion is linear in the row, so the graph only needs a normalizing
# division every few steps to stay clear of underflow; the stored per-step
# alpha rows and scale factors are reconstructed exactly from raw row sums.
RESCALE_EVERY = 8
FORCED_RESCALE_BELOW = 1e-100
# Derived stop targets are clamped into [eps, 1-eps] before being used as
# Bernoulli parameters in a loss.
STOP_TARGET_EPS = 1e-6
# Refuse to enumerate more paths than this.
MAX_ENUMERATED_PATHS = 10**6

GAUSS_LOG_NORM = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Sketch:
    """Ordered sub-task ids without adjacent duplicates."""

    subtasks: tuple[int, ...]

    def __post_init__(self):
        if len(self.subtasks) < 1:
            raise StructuralError("sketch must contain at least one sub-task")
        if any(int(b) != b or b < 0 for b in self.subtasks):
            raise StructuralError("sketch entries must be non-negative integers")
        for a, b in zip(self.subtasks, self.subtasks[1:]):
            if a == b:
                raise StructuralError("sketch must not contain adjacent duplicates")

    def __len__(self) -> int:
        return len(self.subtasks)

    def __iter__(self):
        return iter(self.subtasks)


@dataclass
class Trajectory:
    """T states and the T actions taken in them."""

    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise StructuralError("states and actions must be 2-D arrays")
        if self.states.shape[0] != self.actions.shape[0]:
            raise StructuralError("states and actions must share the time axis")
        if self.states.shape[0] < 1:
            raise StructuralError("trajectory must have at least one step")
        if not (np.isfinite(self.states).all() and np.isfinite(self.actions).all()):
            raise StructuralError("trajectory contains non-finite values")

    @property
    def T(self) -> int:
        return self.states.shape[0]


@dataclass
class AlignmentLattice:
    """Rescaled forward variables plus the reassembled log-likelihood node."""

    alpha: np.ndarray  # (T, L) rescaled rows, zero outside the band
    scale: np.ndarray  # (T,) per-row normalizers
    log_likelihood: Tensor  # differentiable scalar
    sketch: Sketch

    @property
    def T(self) -> int:
        return self.alpha.shape[0]

    @property
    def L(self) -> int:
        return self.alpha.shape[1]


@dataclass
class SoftAlignment:
    """Row-normalized forward variables: p[t, l] sums to one over l."""

    p: np.ndarray


def feasible_band(t: int, T: int, L: int) -> tuple[int, int]:
    """Inclusive (lo, hi) of sketch positions reachable at 0-based step t."""
    return max(0, L - T + t), min(t, L - 1)


def _check_lengths(T: int, L: int) -> None:
    if L > T:
        raise StructuralError(f"sketch length {L} exceeds trajectory length {T}")


def _shiftr(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    out[0] = 0.0
    out[1:] = v[:-1]
    return out


def _shiftl(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    out[-1] = 0.0
    out[:-1] = v[1:]
    return out


def _lattice_step(prev: Tensor, e_row: Tensor, s_row: Tensor | None) -> Tensor:
    """One recursion step as a fused primitive (the loop's hot path).

    Without stop factors: u[l] = e[l] * (prev[l-1] + prev[l]).
    With them:           u[l] = e[l] * (prev[l-1]*s[l-1] + prev[l]*(1-s[l])).
    The hand-written adjoints are pinned by the finite-difference tests.
    """
    p, e = prev.data, e_row.data
    if s_row is None:
        out = Tensor(e * (_shiftr(p) + p), (prev, e_row))

        def back(g):
            ge = g * e
            _accum_into(prev, ge + _shiftl(ge))
            _accum_into(e_row, g * (_shiftr(p) + p))

    else:
        s = s_row.data
        bracket = _shiftr(p) * _shiftr(s) + p * (1.0 - s)
        out = Tensor(e * bracket, (prev, e_row, s_row))

        def back(g):
            ge = g * e
            shifted = _shiftl(ge)
            _accum_into(prev, ge * (1.0 - s) + shifted * s)
            _accum_into(e_row, g * bracket)
            _accum_into(s_row, p * (shifted - ge))

    out._backward = back
    return out


def _accum_into(t: Tensor, g: np.ndarray) -> None:
    t.grad = g if t.grad is None else t.grad + g


def _run_forward(
    emit_cols: list[Tensor],
    stop_cols: list[Tensor] | None,
    sketch: Sketch,
    T: int,
) -> AlignmentLattice:
    """Shared banded recursion; ``stop_cols`` is None for the classifier lattice."""
    L = len(sketch)
    emit = stack(emit_cols, axis=1)  # (T, L)
    stops = stack(stop_cols, axis=1) if stop_cols is not None else None

    start = np.zeros(L)
    start[0] = 1.0
    row = emit[0] * Tensor(start)

    alpha = np.empty((T, L))
    scale = np.empty(T)
    norm_terms: list[Tensor] = []
    prev_sum = 1.0  # raw graph row sum at the previous step (1 after a rescale)
    for t in range(T):
        if t > 0:
            row = _lattice_step(row, emit[t], None if stops is None else stops[t])
            lo, _hi = feasible_band(t, T, L)
            if lo > 0:
                mask = np.zeros(L)
                mask[lo:] = 1.0
                row = row * Tensor(mask)
        raw_sum = float(row.data.sum())
        if raw_sum == 0.0:
            raise DegenerateLatticeError(
                f"all feasible forward variables underflowed at step {t}"
            )
        alpha[t] = row.data / raw_sum
        scale[t] = raw_sum / prev_sum
        if t % RESCALE_EVERY == RESCALE_EVERY - 1 or raw_sum < FORCED_RESCALE_BELOW:
            c = row.sum()
            row = row / c
            norm_terms.append(c)
            prev_sum = 1.0
        else:
            prev_sum = raw_sum
    log_lik = stack(norm_terms).log().sum() + row[L - 1].log() if norm_terms else row[L - 1].log()
    return AlignmentLattice(alpha=alpha, scale=scale, log_likelihood=log_lik, sketch=sketch)


def ctc_forward(clf: SubtaskClassifier, rho: Trajectory, tau: Sketch) -> AlignmentLattice:
    """Classifier lattice: log_likelihood is log p(tau | rho)."""
    _check_lengths(rho.T, len(tau))
    probs = classifier_log_probs(clf, rho.states, rho.actions).exp()  # (T, K)
    emit_cols = [probs[:, b] for b in tau]
    return _run_forward(emit_cols, None, tau, rho.T)


def taco_forward(
    lib: PolicyLibrary,
    rho: Trajectory,
    tau: Sketch,
    dropout_masks: Mapping[int, np.ndarray] | None = None,
) -> AlignmentLattice:
    """Joint lattice: log_likelihood is log p(tau, actions | states).

    ``dropout_masks`` maps sub-task id to a pre-scaled mask over the stop
    network's hidden units; omitted ids (or None) run without dropout.
    """
    _check_lengths(rho.T, len(tau))
    act_prob: dict[int, Tensor] = {}
    stop_p: dict[int, Tensor] = {}
    for k in dict.fromkeys(tau):  # distinct ids, sketch order
        policy = lib[k]
        mask = None if dropout_masks is None else dropout_masks.get(k)
        act_prob[k] = action_log_prob(policy, rho.states, rho.actions).exp()
        stop_p[k] = stop_prob(policy, rho.states, mask)
    emit_cols = [act_prob[b] for b in tau]
    stop_cols = [stop_p[b] for b in tau]
    return _run_forward(emit_cols, stop_cols, tau, rho.T)


def decode_argmax(lattice: AlignmentLattice) -> np.ndarray:
    """Per-timestep argmax of the rescaled rows, mapped to sub-task ids.

    Ties break toward the smaller sketch position. The result need not be a
    monotone path.
    """
    positions = lattice.alpha.argmax(axis=1)
    ids = np.asarray(lattice.sketch.subtasks)
    return ids[positions]


def soft_alignment(lattice: AlignmentLattice) -> SoftAlignment:
    rows = lattice.alpha
    return SoftAlignment(rows / rows.sum(axis=1, keepdims=True))


def ctc_stop_targets(p: SoftAlignment) -> tuple[np.ndarray, np.ndarray]:
    """Derive per-cell non-stop probability targets from a soft alignment.

    ``targets[t, l]`` is the implied probability that sub-policy at sketch
    position l does *not* stop at state s_t, chosen so that applying the
    alignment-mass recursion to row t-1 with these targets reproduces row t.
    Row 0 has no targets. Cells whose derivation would divide by a mass
    below ``MIN_TARGET_DIVISOR`` are left undefined.

    Returns (targets, defined): targets are raw (may fall outside [0, 1]
    under numerical noise); clamp to [STOP_TARGET_EPS, 1 - STOP_TARGET_EPS]
    before using them as Bernoulli parameters.
    """
    rows = np.asarray(p.p, dtype=np.float64)
    T, L = rows.shape
    targets = np.zeros((T, L))
    defined = np.zeros((T, L), dtype=bool)
    for t in range(T - 1):
        prev, nxt = rows[t], rows[t + 1]
        for l in range(L):
            if prev[l] < MIN_TARGET_DIVISOR:
                continue
            if l == 0:
                g = nxt[0] / prev[0]
            else:
                if prev[l - 1] < MIN_TARGET_DIVISOR:
                    inflow = 0.0  # negligible mass upstream
                elif defined[t + 1, l - 1]:
                    inflow = prev[l - 1] * (1.0 - targets[t + 1, l - 1])
                else:
                    continue
                g = (nxt[l] - inflow) / prev[l]
            targets[t + 1, l] = g
            defined[t + 1, l] = True
    return targets, defined


def reconstruct_next_row(
    prev_row: np.ndarray, targets_row: np.ndarray, defined_row: np.ndarray
) -> np.ndarray:
    """Apply the alignment-mass recursion to one row given non-stop targets.

    Undefined cells contribute no outflow and keep zero self-mass; this is
    the oracle used to verify that derived targets invert the recursion.
    """
    L = prev_row.shape[0]
    g = np.where(defined_row, targets_row, 0.0)
    out = np.empty(L)
    out[0] = prev_row[0] * g[0]
    for l in range(1, L):
        out[l] = prev_row[l] * g[l] + prev_row[l - 1] * (1.0 - g[l - 1])
    return out


# -- brute-force oracles ------------------------------------------------------


def enumerate_paths(T: int, L: int) -> list[tuple[int, ...]]:
    """All monotone surjective assignments of T steps onto L sketch positions.

    Paths are tuples of 0-based sketch positions; there are C(T-1, L-1).
    """
    _check_lengths(T, L)
    if L < 1:
        raise StructuralError("need at least one sketch position")
    n_paths = math.comb(T - 1, L - 1)
    if n_paths > MAX_ENUMERATED_PATHS:
        raise StructuralError(
            f"refusing to enumerate {n_paths} paths (> {MAX_ENUMERATED_PATHS})"
        )
    paths = []
    for switches in combinations(range(1, T), L - 1):
        path = np.zeros(T, dtype=int)
        for s in switches:
            path[s:] += 1
        paths.append(tuple(path))
    return paths


def _policy_tables(lib: PolicyLibrary, rho: Trajectory, tau: Sketch):
    """Per-step action densities and stop probabilities, computed in numpy."""
    dens: dict[int, np.ndarray] = {}
    stops: dict[int, np.ndarray] = {}
    for k in dict.fromkeys(tau):
        policy = lib[k]
        mu = policy.action_net.forward_np(rho.states)
        sq = ((rho.actions - mu) ** 2).sum(axis=1)
        dens[k] = np.exp(-0.5 * sq - rho.actions.shape[1] * GAUSS_LOG_NORM)
        stops[k] = np.atleast_1d(policy.stop_probability(rho.states))
    return dens, stops


def path_probability(
    path: Sequence[int],
    tau: Sketch,
    dens: Mapping[int, np.ndarray],
    stops: Mapping[int, np.ndarray],
) -> float:
    """Probability of one path: action terms everywhere, edge terms from step 2."""
    ids = tau.subtasks
    p = dens[ids[path[0]]][0]
    for t in range(1, len(path)):
        p *= dens[ids[path[t]]][t]
        if path[t] == path[t - 1]:
            p *= 1.0 - stops[ids[path[t]]][t]
        else:
            p *= stops[ids[path[t - 1]]][t]
    return float(p)


def brute_force_joint(lib: PolicyLibrary, rho: Trajectory, tau: Sketch) -> float:
    """Exact joint probability by explicit path enumeration (test oracle)."""
    dens, stops = _policy_tables(lib, rho, tau)
    return sum(
        path_probability(path, tau, dens, stops)
        for path in enumerate_paths(rho.T, len(tau))
    )


def brute_force_sketch_prob(clf: SubtaskClassifier, rho: Trajectory, tau: Sketch) -> float:
    """Exact classifier sketch probability by path enumeration (test oracle)."""
    probs = np.exp(clf.log_probs_np(rho.states, rho.actions))  # (T, K)
    ids = tau.subtasks
    total = 0.0
    for path in enumerate_paths(rho.T, len(tau)):
        p = 1.0
        for t, pos in enumerate(path):
            p *= probs[t, ids[pos]]
        total += p
    return total


def write_lattice_csv(lattice: AlignmentLattice, path) -> None:
    """Dump feasible cells as rows of t,l,alpha,scale (1-based t and l)."""
    with FsPath(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "l", "alpha", "scale"])
        T, L = lattice.alpha.shape
        for t in range(T):
            lo, hi = feasible_band(t, T, L)
            for l in range(lo, hi + 1):
                writer.writerow(
                    [t + 1, l + 1, repr(lattice.alpha[t, l]), repr(lattice.scale[t])]
                )
