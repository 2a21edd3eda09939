"""Sub-policy networks and the sub-task classifier.

Every sub-policy owns two fully separate MLPs: an action head that outputs
the mean of a unit-variance Gaussian over domain actions, and a stop head
whose single sigmoid logit is the probability of the never-observed
termination action. The classifier maps a (state, action) pair to logits
over the sub-task dictionary and is used only by the two-stage baselines.

Each network exists in two forms: a graph-building form (autodiff
:class:`~taco.autodiff.Tensor` ops, used by the losses) and a plain-numpy
form (used by rollouts and test oracles). Both read the same parameter
arrays, so they cannot drift apart.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor, gaussian_log_density, log_softmax
from .errors import DataError, StructuralError
from .seeding import derive_seed, substream

CHECKPOINT_VERSION = 1
DEFAULT_HIDDEN_SIZES = (100,)


@dataclass
class Mlp:
    """Tanh MLP with a linear output layer; parameters are graph leaves."""

    weights: list[Tensor]
    biases: list[Tensor]

    @property
    def hidden_unit_count(self) -> int:
        return sum(b.data.size for b in self.biases[:-1])

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases]

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Build the forward graph; ``mask`` multiplies hidden activations."""
        splits = None
        if mask is not None:
            if mask.shape != (self.hidden_unit_count,):
                raise StructuralError(
                    f"dropout mask has length {mask.shape}, stop network has "
                    f"{self.hidden_unit_count} hidden units"
                )
            splits = np.split(
                mask, np.cumsum([b.data.size for b in self.biases[:-1]])[:-1]
            )
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = h.tanh()
                if splits is not None:
                    h = h * Tensor(splits[i])
        return h

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Inference twin of :meth:`forward` (no graph, no dropout)."""
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < last:
                h = np.tanh(h)
        return h


def init_mlp(d_in: int, d_out: int, hidden_sizes, rng: np.random.Generator) -> Mlp:
    """Zero-mean fan-in-scaled weights, zero biases."""
    sizes = [d_in, *hidden_sizes, d_out]
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(Tensor(rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out))))
        biases.append(Tensor(np.zeros(n_out)))
    return Mlp(weights, biases)


@dataclass
class SubPolicy:
    """One sub-task's action head and stop head (no shared parameters)."""

    d_s: int
    d_a: int
    hidden_sizes: tuple[int, ...]
    action_net: Mlp
    stop_net: Mlp

    def parameters(self) -> list[Tensor]:
        return self.action_net.parameters() + self.stop_net.parameters()

    # numpy fast paths for rollouts and oracles
    def mean_action(self, s: np.ndarray) -> np.ndarray:
        return self.action_net.forward_np(s)

    def stop_probability(self, s: np.ndarray):
        logit = self.stop_net.forward_np(s)[..., 0]
        x = np.clip(logit, -36.0, 36.0)
        return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def init_policy(d_s: int, d_a: int, hidden_sizes, rng_seed: int) -> SubPolicy:
    """Reproducible policy init; action and stop nets get separate draws."""
    if d_s < 1 or d_a < 1:
        raise StructuralError("state and action dimensions must be >= 1")
    hidden = tuple(int(h) for h in hidden_sizes)
    if not hidden:
        raise StructuralError("hidden_sizes must not be empty")
    return SubPolicy(
        d_s=d_s,
        d_a=d_a,
        hidden_sizes=hidden,
        action_net=init_mlp(d_s, d_a, hidden, substream(rng_seed, "action")),
        stop_net=init_mlp(d_s, 1, hidden, substream(rng_seed, "stop")),
    )


def action_log_prob(policy: SubPolicy, s: np.ndarray, a: np.ndarray) -> Tensor:
    """log N(a; mu(s), I) — scalar for one pair, vector for stacked rows."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if s.shape[-1] != policy.d_s or a.shape[-1] != policy.d_a:
        raise StructuralError(
            f"expected state dim {policy.d_s} and action dim {policy.d_a}, "
            f"got {s.shape} and {a.shape}"
        )
    mu = policy.action_net.forward(Tensor(s))
    return gaussian_log_density(mu, a)


def stop_prob(policy: SubPolicy, s: np.ndarray, dropout_mask: np.ndarray | None = None) -> Tensor:
    """Stop-action probability in (0,1); mask entries are pre-scaled 0 or 1/keep."""
    s = np.asarray(s, dtype=np.float64)
    logits = policy.stop_net.forward(Tensor(s), mask=dropout_mask)
    return logits.sum(axis=-1).sigmoid()


def sample_action(policy: SubPolicy, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return policy.mean_action(s) + rng.standard_normal(policy.d_a)


def sample_dropout_mask(rng: np.random.Generator, n_units: int, rate: float) -> np.ndarray:
    """Inverted-dropout mask: entries are 0 or 1/keep so E[mask] = 1."""
    if rate <= 0.0:
        return np.ones(n_units)
    keep = 1.0 - rate
    return (rng.random(n_units) < keep) / keep


@dataclass
class PolicyLibrary:
    """The dictionary of K sub-task policies."""

    policies: dict[int, SubPolicy]

    @property
    def K(self) -> int:
        return len(self.policies)

    def __getitem__(self, k: int) -> SubPolicy:
        try:
            return self.policies[k]
        except KeyError:
            raise StructuralError(f"sub-task id {k} is not in the library") from None

    def parameters(self) -> list[Tensor]:
        return [p for k in sorted(self.policies) for p in self.policies[k].parameters()]


def init_library(K: int, d_s: int, d_a: int, hidden_sizes, seed: int) -> PolicyLibrary:
    return PolicyLibrary(
        {
            k: init_policy(d_s, d_a, hidden_sizes, derive_seed(seed, "policy", k))
            for k in range(K)
        }
    )


@dataclass
class SubtaskClassifier:
    """Maps concatenated (state, action) to logits over the K sub-tasks."""

    d_s: int
    d_a: int
    K: int
    net: Mlp

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def log_probs_np(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        z = self.net.forward_np(np.concatenate([s, a], axis=-1))
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def init_classifier(K: int, d_s: int, d_a: int, hidden_sizes, seed: int) -> SubtaskClassifier:
    rng = substream(seed, "classifier")
    return SubtaskClassifier(d_s, d_a, K, init_mlp(d_s + d_a, K, hidden_sizes, rng))


def classifier_log_probs(clf: SubtaskClassifier, s: np.ndarray, a: np.ndarray) -> Tensor:
    """Log-softmax over sub-task ids for one pair or stacked rows."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if s.shape[-1] != clf.d_s or a.shape[-1] != clf.d_a:
        raise StructuralError(
            f"expected state dim {clf.d_s} and action dim {clf.d_a}, "
            f"got {s.shape} and {a.shape}"
        )
    x = np.concatenate([s, a], axis=-1)
    return log_softmax(clf.net.forward(Tensor(x)))


# -- checkpoint serialization ------------------------------------------------


def _mlp_to_json(mlp: Mlp) -> dict:
    return {
        "weights": [w.data.tolist() for w in mlp.weights],
        "biases": [b.data.tolist() for b in mlp.biases],
    }


def _mlp_from_json(obj: dict) -> Mlp:
    return Mlp(
        [Tensor(np.array(w, dtype=np.float64)) for w in obj["weights"]],
        [Tensor(np.array(b, dtype=np.float64)) for b in obj["biases"]],
    )


def save_checkpoint(
    path,
    library: PolicyLibrary,
    classifier: SubtaskClassifier | None = None,
    meta: Mapping | None = None,
) -> None:
    """Write the library (and optional classifier) as a single JSON document.

    Floats are serialized with shortest round-trip repr, so save -> load
    reproduces every parameter bit-exactly.
    """
    any_policy = next(iter(library.policies.values()))
    doc = {
        "version": CHECKPOINT_VERSION,
        "d_s": any_policy.d_s,
        "d_a": any_policy.d_a,
        "K": library.K,
        "hidden_sizes": list(any_policy.hidden_sizes),
        "policies": [
            {
                "theta_action": _mlp_to_json(library.policies[k].action_net),
                "theta_stop": _mlp_to_json(library.policies[k].stop_net),
            }
            for k in sorted(library.policies)
        ],
        "classifier": None if classifier is None else _mlp_to_json(classifier.net),
    }
    doc.update(dict(meta or {}))
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[PolicyLibrary, SubtaskClassifier | None, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(
            f"checkpoint version {doc.get('version')} != supported {CHECKPOINT_VERSION}"
        )
    d_s, d_a = doc["d_s"], doc["d_a"]
    hidden = tuple(doc["hidden_sizes"])
    policies = {}
    for k, entry in enumerate(doc["policies"]):
        policies[k] = SubPolicy(
            d_s=d_s,
            d_a=d_a,
            hidden_sizes=hidden,
            action_net=_mlp_from_json(entry["theta_action"]),
            stop_net=_mlp_from_json(entry["theta_stop"]),
        )
    library = PolicyLibrary(policies)
    classifier = None
    if doc.get("classifier") is not None:
        classifier = SubtaskClassifier(d_s, d_a, doc["K"], _mlp_from_json(doc["classifier"]))
    meta = {
        k: v
        for k, v in doc.items()
        if k not in ("policies", "classifier", "version", "hidden_sizes")
    }
    meta["hidden_sizes"] = hidden
    return library, classifier, meta
