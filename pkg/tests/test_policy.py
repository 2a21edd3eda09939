import json
import math

import numpy as np
import pytest

from taco.autodiff import finite_difference_check
from taco.errors import StructuralError
from taco.policy import (
    PolicyLibrary,
    action_log_prob,
    classifier_log_probs,
    init_classifier,
    init_library,
    init_policy,
    load_checkpoint,
    sample_action,
    sample_dropout_mask,
    save_checkpoint,
    stop_prob,
)
from taco.seeding import substream


def params_of(policy):
    return [p.data for p in policy.parameters()]


def test_init_is_deterministic_and_seed_sensitive():
    a = init_policy(8, 2, [100], rng_seed=0)
    b = init_policy(8, 2, [100], rng_seed=0)
    c = init_policy(8, 2, [100], rng_seed=1)
    for pa, pb in zip(params_of(a), params_of(b)):
        assert np.array_equal(pa, pb)
    assert any(
        not np.array_equal(pa, pc) for pa, pc in zip(params_of(a), params_of(c))
    )


def test_init_shapes_match_configuration():
    p = init_policy(8, 2, [100], rng_seed=0)
    assert [w.data.shape for w in p.action_net.weights] == [(8, 100), (100, 2)]
    assert [w.data.shape for w in p.stop_net.weights] == [(8, 100), (100, 1)]


def test_init_rejects_empty_hidden():
    with pytest.raises(StructuralError):
        init_policy(8, 2, [], rng_seed=0)


def test_action_log_prob_perfect_fit():
    # Zero weights make mu(s) = 0; the density at a = 0 is the normalizer.
    p = init_policy(3, 2, [4], rng_seed=0)
    for w in p.action_net.parameters():
        w.data[...] = 0.0
    s = np.ones(3)
    ll = action_log_prob(p, s, np.zeros(2))
    assert ll.item() == pytest.approx(-math.log(2 * math.pi), abs=1e-12)
    ll_shift = action_log_prob(p, s, np.array([1.0, 0.0]))
    assert ll_shift.item() == pytest.approx(-0.5 - math.log(2 * math.pi), abs=1e-12)


def test_action_log_prob_matches_density_formula():
    rng = substream(0, "policy-dens")
    p = init_policy(4, 3, [5], rng_seed=7)
    s, a = rng.normal(size=4), rng.normal(size=3)
    mu = p.action_net.forward_np(s)
    expected = -0.5 * np.sum((a - mu) ** 2) - 1.5 * math.log(2 * math.pi)
    assert action_log_prob(p, s, a).item() == pytest.approx(expected, abs=1e-12)


def test_stop_prob_zero_net_is_half_and_strictly_inside():
    p = init_policy(3, 2, [4], rng_seed=0)
    for w in p.stop_net.parameters():
        w.data[...] = 0.0
    assert stop_prob(p, np.ones(3)).item() == 0.5
    q = init_policy(3, 2, [4], rng_seed=5)
    for scale in (1.0, 1e3, 1e9):
        v = stop_prob(q, scale * np.ones(3)).item()
        assert 0.0 < v < 1.0


def test_stop_prob_mask_length_checked():
    p = init_policy(3, 2, [4], rng_seed=0)
    with pytest.raises(StructuralError):
        stop_prob(p, np.ones(3), dropout_mask=np.ones(3))


def test_dropout_monte_carlo_consistency():
    p = init_policy(3, 2, [6], rng_seed=3)
    s = np.array([0.4, -0.2, 0.9])
    base = stop_prob(p, s).item()
    rng = substream(0, "policy-dropout")
    vals = [
        stop_prob(p, s, sample_dropout_mask(rng, 6, 0.5)).item() for _ in range(10_000)
    ]
    assert abs(np.mean(vals) - base) < 0.05
    ones = np.ones(6)
    assert stop_prob(p, s, ones).item() == stop_prob(p, s, ones).item() == base


def test_classifier_uniform_at_zero_weights_and_normalized():
    clf = init_classifier(4, 3, 2, [5], seed=0)
    for w in clf.parameters():
        w.data[...] = 0.0
    lp = classifier_log_probs(clf, np.ones(3), np.ones(2))
    assert np.allclose(lp.data, math.log(0.25), atol=1e-12)
    clf2 = init_classifier(4, 3, 2, [5], seed=1)
    lp2 = classifier_log_probs(clf2, np.ones(3), np.ones(2))
    assert np.exp(lp2.data).sum() == pytest.approx(1.0, abs=1e-12)


def test_classifier_gradient_matches_finite_differences():
    rng = substream(1, "policy-clf-fd")
    clf = init_classifier(3, 3, 2, [4], seed=2)
    s, a = rng.normal(size=3), rng.normal(size=2)
    y = rng.normal(size=3)

    def build():
        return (classifier_log_probs(clf, s, a) * y).sum()

    for leaf in clf.parameters():
        assert finite_difference_check(build, leaf, 1e-5) <= 1e-4


def test_sample_action_statistics():
    p = init_policy(3, 2, [4], rng_seed=11)
    s = np.array([0.3, -0.7, 0.1])
    mu = p.mean_action(s)
    rng = substream(2, "policy-sample")
    draws = np.array([sample_action(p, s, rng) for _ in range(100_000)])
    assert np.all(np.abs(draws.mean(axis=0) - mu) < 0.02)
    assert np.all(np.abs(draws.var(axis=0) - 1.0) < 0.05)


def test_action_log_prob_peaks_at_mean():
    p = init_policy(3, 2, [4], rng_seed=4)
    s = np.array([0.5, 0.5, -0.5])
    mu = p.mean_action(s)
    best = action_log_prob(p, s, mu).item()
    for delta in np.linspace(-1.0, 1.0, 9):
        if delta == 0.0:
            continue
        probe = mu + np.array([delta, 0.0])
        assert action_log_prob(p, s, probe).item() < best


def test_library_policies_share_no_storage():
    lib = init_library(3, 4, 2, [5], seed=0)
    s = np.ones(4)
    before = [lib[k].mean_action(s).copy() for k in range(3)]
    lib[0].action_net.weights[0].data += 10.0
    after = [lib[k].mean_action(s) for k in range(3)]
    assert not np.array_equal(before[0], after[0])
    assert np.array_equal(before[1], after[1])
    assert np.array_equal(before[2], after[2])
    with pytest.raises(StructuralError):
        lib[7]


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    lib = init_library(4, 8, 2, [10], seed=9)
    clf = init_classifier(4, 8, 2, [10], seed=10)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, lib, clf, meta={"algorithm": "taco", "n_demos": 5})
    lib2, clf2, meta = load_checkpoint(path)
    s = substream(3, "policy-ckpt").normal(size=8)
    for k in range(4):
        assert np.array_equal(lib[k].mean_action(s), lib2[k].mean_action(s))
        assert lib[k].stop_probability(s) == lib2[k].stop_probability(s)
    assert np.array_equal(
        clf.log_probs_np(s, np.ones(2)), clf2.log_probs_np(s, np.ones(2))
    )
    assert meta["algorithm"] == "taco"
    for k in range(4):
        for p, q in zip(lib[k].parameters(), lib2[k].parameters()):
            assert np.array_equal(p.data, q.data)
    doc = json.loads(path.read_text())
    assert doc["d_s"] == 8 and doc["K"] == 4
