import math

import numpy as np
import pytest
import torch

from ditto.datastore import ProvenanceError
from ditto.rewards import (
    Discriminator, RewardSpec, adversarial_reward, adversarial_reward_from_prob, aligned_reward,
    bce_from_probs, discriminator_loss, distance, ditto_reward, min_dataset_reward, pair_key, sparse_reward,
)
from ditto.tabular import rprime_check, sparse_reward_table


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_worked_case():
    assert ditto_reward(t([2.0, 0.0]), t([1.0, 0.0])).item() == 0.5


def test_identity_and_orthogonal():
    v = t([0.3, -1.2, 4.0])
    assert ditto_reward(v, v).item() == 1.0
    assert ditto_reward(t([1.0, 0.0]), t([0.0, 3.0])).item() == 0.0


def test_bounds_and_symmetry_random(rng):
    e = torch.as_tensor(rng.standard_normal((100_000, 6)) * rng.uniform(0.01, 10, (100_000, 1)))
    p = torch.as_tensor(rng.standard_normal((100_000, 6)) * rng.uniform(0.01, 10, (100_000, 1)))
    r = ditto_reward(e, p)
    assert torch.isfinite(r).all()
    assert r.min() >= -1 and r.max() <= 1
    assert r.max() < 1  # distinct random vectors never score 1
    torch.testing.assert_close(r, ditto_reward(p, e), rtol=0, atol=0)


def test_one_iff_equal(rng):
    v = torch.as_tensor(rng.standard_normal((1000, 5)))
    assert (ditto_reward(v, v) == 1).all()
    assert (ditto_reward(v, v * 1.001) < 1).all()


@pytest.mark.parametrize("c", [0.1, 10.0])
def test_scale_invariance(rng, c):
    e = torch.as_tensor(rng.standard_normal((1000, 4)))
    p = torch.as_tensor(rng.standard_normal((1000, 4)) * 3)
    torch.testing.assert_close(ditto_reward(c * e, c * p), ditto_reward(e, p), rtol=1e-12, atol=1e-12)


def test_norm_guard():
    zero = t([0.0, 0.0])
    tiny = t([1e-10, 0.0])
    assert ditto_reward(zero, tiny).item() == 1.0
    assert ditto_reward(zero, t([1.0, 0.0])).item() == 0.0
    assert ditto_reward(t([1.0, 0.0]), tiny).item() == 0.0


def test_provenance_mismatch():
    with pytest.raises(ProvenanceError):
        ditto_reward(t([1.0]), t([1.0]), expert_provenance="a", learner_provenance="b")
    assert ditto_reward(t([1.0]), t([1.0]), expert_provenance="a", learner_provenance="a").item() == 1.0


def test_flat_state_has_positive_norm():
    # with one-hot z the flat state norm is at least sqrt(G), so the guard stays dormant
    G, K = 8, 8
    z = torch.zeros(G, K)
    z[:, 0] = 1
    flat = torch.cat([torch.zeros(16), z.flatten()])
    assert flat.norm() >= math.sqrt(G) - 1e-12


# -- distances and min over a dataset -------------------------------------------


def test_distance_ranges(rng):
    a = torch.as_tensor(rng.standard_normal((500, 4)))
    b = torch.as_tensor(rng.standard_normal((500, 4)))
    assert ((distance(a, b, "dot") >= 0) & (distance(a, b, "dot") <= 2)).all()
    assert ((distance(a, b, "l2") >= 0) & (distance(a, b, "l2") <= 1 + 1e-12)).all()
    assert ((distance(a, b, "cosine") >= 0) & (distance(a, b, "cosine") <= 2 + 1e-12)).all()
    for kind in ("dot", "l2", "cosine"):
        assert distance(a, a, kind).abs().max() < 1e-12
    with pytest.raises(ValueError):
        distance(a, b, "manhattan")


@pytest.mark.parametrize("kind", ["dot", "l2", "cosine"])
def test_min_dataset_brute_force(rng, kind):
    learner = torch.as_tensor(rng.standard_normal((7, 3)))
    expert = torch.as_tensor(rng.standard_normal((5, 3)))
    got = min_dataset_reward(learner, expert, kind)
    want = torch.stack([1 - min(distance(l, e, kind) for e in expert) for l in learner])
    torch.testing.assert_close(got, want)


def test_min_dataset_examples(rng):
    expert = torch.as_tensor(rng.standard_normal((5, 3)))
    assert min_dataset_reward(expert[2], expert).item() == 1.0
    learner = torch.as_tensor(rng.standard_normal(3))
    assert min_dataset_reward(learner, expert[:1]).item() == pytest.approx(ditto_reward(expert[0], learner).item())
    with pytest.raises(ValueError):
        min_dataset_reward(learner, expert[:0])


def test_min_dataset_dominates_aligned(rng):
    expert = torch.as_tensor(rng.standard_normal((20, 4)))
    learner = torch.as_tensor(rng.standard_normal((20, 4)))
    aligned = ditto_reward(expert, learner)
    assert (min_dataset_reward(learner, expert) >= aligned - 1e-12).all()


def test_min_dataset_chunking(rng):
    learner = torch.as_tensor(rng.standard_normal((2, 9, 3)))
    expert = torch.as_tensor(rng.standard_normal((11, 3)))
    torch.testing.assert_close(min_dataset_reward(learner, expert, chunk=4), min_dataset_reward(learner, expert))


def test_aligned_kinds():
    e, p = t([[1.0, 0.0]]), t([[1.0, 0.0005]])
    assert aligned_reward("ditto_dot")(e, p).item() < 1
    assert aligned_reward("sparse", eps=1e-3)(e, p).item() == 1.0
    assert aligned_reward("sparse", eps=1e-4)(e, p).item() == 0.0
    assert aligned_reward("l2")(e, e).item() == 1.0
    with pytest.raises(ValueError):
        aligned_reward("adversarial")


def test_sparse_reward_membership():
    pairs = {pair_key(0, 1), pair_key(2, 0)}
    assert sparse_reward(0, 1, pairs) == 1.0
    assert sparse_reward(1, 1, pairs) == 0.0
    assert rprime_check(sparse_reward_table((3, 2), {(0, 1), (2, 0)}), {(0, 1), (2, 0)}, 1.0)[0]


def test_sparse_reward_latent_pairs():
    state = np.array([0.5, 1.0, 0.0], np.float32)
    pairs = {pair_key(state, 3)}
    assert sparse_reward(state.copy(), 3, pairs) == 1.0
    assert sparse_reward(state, 2, pairs) == 0.0


def test_reward_spec_from_config():
    from ditto.config import TrainConfig

    spec = RewardSpec.from_config(TrainConfig().reward)
    assert spec.kind == "ditto_dot" and spec.tau0 == 1e-8 and spec.adv_clip == 10.0


# -- discriminator ---------------------------------------------------------------


def test_bce_at_half():
    half = torch.full((10,), 0.5)
    assert bce_from_probs(half, half).item() == pytest.approx(2 * math.log(2), abs=1e-6)


def test_bce_perfect_limit():
    assert bce_from_probs(torch.full((4,), 1 - 1e-9), torch.full((4,), 1e-9)).item() < 1e-8


def test_discriminator_loss_constant_half():
    D = Discriminator(3, 2, hidden=8, layers=1)
    for p in D.parameters():
        torch.nn.init.zeros_(p)
    s, a = torch.randn(5, 3), torch.randint(2, (5,))
    s2, a2 = torch.randn(6, 3), torch.randint(2, (6,))
    assert discriminator_loss(D, s, a, s2, a2).item() == pytest.approx(2 * math.log(2), abs=1e-6)
    assert discriminator_loss(D, s2, a2, s, a).item() == pytest.approx(discriminator_loss(D, s, a, s2, a2).item())
    with pytest.raises(ValueError):
        discriminator_loss(D, s[:0], a[:0], s2, a2)


def test_discriminator_output_open_interval():
    D = Discriminator(2, 2, hidden=4, layers=1)
    with torch.no_grad():
        D.net[-1].bias.fill_(1e4)
    out = D(torch.zeros(3, 2), torch.zeros(3, dtype=torch.long))
    assert (out < 1).all() and (out > 0).all()


def test_adversarial_reward_values():
    assert adversarial_reward_from_prob(torch.tensor(0.5)).item() == pytest.approx(math.log(2), abs=1e-6)
    assert adversarial_reward_from_prob(torch.tensor(1e-9)).item() < 1e-8
    grid = torch.linspace(0.01, 0.99, 50, dtype=torch.float64)
    assert (torch.diff(adversarial_reward_from_prob(grid)) > 0).all()
    assert adversarial_reward_from_prob(torch.tensor(1 - 1e-12, dtype=torch.float64)).item() == 10.0


def test_adversarial_reward_shapes():
    D = Discriminator(4, 3, hidden=8, layers=2)
    r = adversarial_reward(torch.randn(2, 5, 4), torch.randint(3, (2, 5)), D)
    assert r.shape == (2, 5) and (r >= 0).all() and (r <= 10).all()
