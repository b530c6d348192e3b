import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from promptgad import oracles
from promptgad.losses import (
    GroupMatching,
    LossConfig,
    assignment_cost,
    hungarian,
    l_con,
    l_group,
    l_ind,
    l_mem,
    match_groups,
    total_loss,
)
from promptgad.tensor_core import DTYPE, NumericError

# -- hungarian ---------------------------------------------------------------


def test_hungarian_diagonal():
    pairs = hungarian([[1, 2], [2, 1]])
    assert pairs == [(0, 0), (1, 1)]
    assert assignment_cost([[1, 2], [2, 1]], pairs) == 2


def test_hungarian_anti_diagonal():
    pairs = hungarian([[4, 1], [2, 3]])
    assert pairs == [(0, 1), (1, 0)]
    assert assignment_cost([[4, 1], [2, 3]], pairs) == 3


def test_hungarian_random_6x6_matches_exhaustive():
    for seed in range(200):
        cost = np.random.default_rng(seed).random((6, 6))
        best, _ = oracles.brute_force_assignment(cost)
        assert assignment_cost(cost, hungarian(cost)) == best


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000), st.booleans())
def test_hungarian_rectangular_and_tied(n, m, seed, integer):
    rng = np.random.default_rng(seed)
    cost = rng.integers(0, 3, (n, m)).astype(float) if integer else rng.random((n, m))
    pairs = hungarian(cost)
    best, want = oracles.brute_force_assignment(cost)
    assert len(pairs) == min(n, m)
    assert len({i for i, _ in pairs}) == len(pairs) == len({j for _, j in pairs})
    assert assignment_cost(cost, pairs) == pytest.approx(best, abs=1e-12)
    assert pairs == want  # same lexicographic tie rule as the oracle


@pytest.mark.parametrize("n", range(1, 8))
def test_hungarian_all_equal_is_identity(n):
    assert hungarian(np.ones((n, n))) == [(i, i) for i in range(n)]


def test_hungarian_errors():
    with pytest.raises(ValueError):
        hungarian(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        hungarian([[1.0, float("nan")]])


# -- matching ------------------------------------------------------------------


def test_match_single_group_cost():
    probs = np.zeros((3, 4))
    probs[1, 2] = 1.0
    probs[0, 3] = probs[2, 3] = 1.0
    sigma = np.zeros((3, 4))
    sigma[:, 1] = 1.0
    m = match_groups(probs, sigma, [[0, 1, 2]], [2])
    assert m.gt_to_token == [1]
    assert m.cost[0, 1] == -2.0


def test_match_ties_pick_lexicographically_smallest():
    m = match_groups(np.full((5, 4), 0.25), np.full((6, 6), 1 / 6), [[0, 1], [2], [3, 4, 5]], [0, 1, 2])
    assert m.gt_to_token == [0, 1, 2]


def test_match_random_against_exhaustive():
    rng = np.random.default_rng(5)
    for _ in range(20):
        probs = rng.dirichlet(np.ones(7), size=7)
        sigma = rng.dirichlet(np.ones(8), size=9)
        groups, acts = [[0, 1, 2], [3, 4], [5, 6, 7]], list(rng.integers(0, 6, 3))
        m = match_groups(probs, sigma, groups, acts)
        best = None
        for perm in itertools.permutations(range(7), 3):
            c = sum(-probs[perm[g], acts[g]] - sigma[groups[g], perm[g]].mean() for g in range(3))
            if best is None or c < best - 1e-15:
                best, arg = c, list(perm)
        assert m.gt_to_token == arg


def test_match_too_many_groups():
    with pytest.raises(ValueError):
        match_groups(np.ones((2, 3)), np.ones((3, 3)), [[0], [1], [2]], [0, 0, 0])


# -- loss terms ----------------------------------------------------------------


def _matching(gt_to_token, k):
    return GroupMatching(gt_to_token, k)


def test_l_group_perfect():
    logits = torch.full((3, 7), -60.0, dtype=DTYPE)
    logits[0, 2] = logits[1, 6] = logits[2, 6] = 60.0
    assert float(l_group(logits, _matching([0], 3), [2])) < 1e-20


def test_l_group_uniform():
    assert float(l_group(torch.zeros(7, 7, dtype=DTYPE), _matching([3], 7), [1])) == pytest.approx(math.log(7), abs=1e-15)


def test_l_group_oracle():
    torch.manual_seed(0)
    logits = torch.randn(4, 5, dtype=DTYPE)
    got = float(l_group(logits, _matching([2, 0], 4), [1, 3]))
    targets = [3, 4, 1, 4]
    lg = logits.numpy()
    want = np.mean([-(lg[k, targets[k]] - math.log(sum(math.exp(v) for v in lg[k]))) for k in range(4)])
    assert abs(got - want) <= 1e-12


def test_l_ind_oracle():
    logits = torch.tensor([[0.5, -1.0, 2.0], [0.0, 0.0, 0.0]], dtype=DTYPE)
    want = np.mean([-(2.0 - math.log(math.exp(0.5) + math.exp(-1) + math.exp(2))), math.log(3)])
    assert abs(float(l_ind(logits, [2, 1])) - want) <= 1e-12


def test_l_mem_one_hot():
    aff = torch.full((4, 4), -60.0, dtype=DTYPE)
    aff[0, 1] = aff[1, 1] = aff[2, 0] = aff[3, 3] = 60.0
    m = _matching([1, 0], 3)
    assert float(l_mem(aff, m, [[0, 1], [2]], [3])) < 1e-20


def test_l_mem_uniform():
    m = _matching([4, 0], 7)
    assert float(l_mem(torch.zeros(5, 8, dtype=DTYPE), m, [[0, 1], [2, 3]], [4])) == pytest.approx(math.log(8), abs=1e-15)


def test_l_mem_oracle():
    torch.manual_seed(1)
    aff = torch.randn(5, 4, dtype=DTYPE)
    got = float(l_mem(aff, _matching([2, 0], 3), [[0, 3], [1]], [2, 4]))
    target = [2, 0, 3, 2, 3]
    a = aff.numpy()
    want = np.mean([-(a[i, target[i]] - math.log(sum(math.exp(v) for v in a[i]))) for i in range(5)])
    assert abs(got - want) <= 1e-12


def test_l_mem_unlabelled_actor():
    with pytest.raises(ValueError):
        l_mem(torch.zeros(3, 3, dtype=DTYPE), _matching([0], 2), [[0, 1]], [])


def test_l_con_uniform_similarity():
    emb = torch.ones(3, 4, dtype=DTYPE)
    assert float(l_con(emb, [0, 0, 0], 0.2)) == pytest.approx(math.log(2), abs=1e-14)


def test_l_con_saturated():
    emb = torch.tensor([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]], dtype=DTYPE)
    assert float(l_con(emb, [0, 0, -1], 0.01)) < 1e-40


def _l_con_oracle(emb, labels, tau):
    e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    m = len(labels)
    terms = []
    for i in range(m):
        if labels[i] < 0:
            continue
        pos = [p for p in range(m) if p != i and labels[p] == labels[i]]
        if not pos:
            continue
        denom = sum(math.exp(e[i] @ e[a] / tau) for a in range(m) if a != i)
        terms.append(-sum(math.log(math.exp(e[i] @ e[p] / tau) / denom) for p in pos) / len(pos))
    return float(np.mean(terms))


def test_l_con_oracle():
    rng = np.random.default_rng(2)
    emb = rng.standard_normal((5, 6))
    labels = [0, 1, 0, 1, -1]
    got = float(l_con(torch.from_numpy(emb), labels, 0.2))
    assert abs(got - _l_con_oracle(emb, labels, 0.2)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50.0))
def test_l_con_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    emb = torch.from_numpy(rng.standard_normal((6, 4)))
    labels = [0, 0, 1, 1, 1, -1]
    assert float(l_con(emb * c, labels, 0.2)) == pytest.approx(float(l_con(emb, labels, 0.2)), abs=1e-12)


def test_l_con_errors():
    with pytest.raises(ValueError):
        l_con(torch.ones(1, 3, dtype=DTYPE), [0], 0.2)
    with pytest.raises(ValueError):
        l_con(torch.ones(2, 3, dtype=DTYPE), [0, 0], 0.0)


# -- total ---------------------------------------------------------------------


def _parts(ind=1.0, group=(1.0, 1.0), mem=(1.0, 1.0), con=1.0):
    f = lambda v: torch.tensor(v, dtype=DTYPE)  # noqa: E731
    return {"ind": f(ind), "group": [f(g) for g in group], "mem": [f(m) for m in mem], "con": f(con)}


def test_total_no_weights_single_layer():
    cfg = LossConfig(lambda_m=0.0, lambda_c=0.0, aux_layers=False)
    assert float(total_loss(_parts(0.7, (9.0, 0.4), (3.0, 2.0), 5.0), cfg)) == pytest.approx(1.1, abs=1e-15)


def test_total_defaults_arithmetic():
    assert float(total_loss(_parts(), LossConfig())) == 15.0


def test_total_matches_sum_of_parts():
    rng = np.random.default_rng(3)
    vals = rng.random(6)
    parts = _parts(vals[0], vals[1:3], vals[3:5], vals[5])
    want = vals[0] + vals[1] + vals[2] + 5.0 * (vals[3] + vals[4]) + 2.0 * vals[5]
    assert abs(float(total_loss(parts, LossConfig())) - want) <= 1e-12


def test_total_monotone_in_weights():
    parts = _parts(0.3, (0.2, 0.1), (0.5, 0.6), 0.9)
    values = [float(total_loss(parts, LossConfig(lambda_m=lm, lambda_c=lc))) for lm, lc in [(0, 0), (1, 0), (1, 1), (5, 2)]]
    assert values == sorted(values)


def test_total_names_non_finite_term():
    with pytest.raises(NumericError, match="mem"):
        total_loss(_parts(mem=(1.0, float("nan"))), LossConfig())
    with pytest.raises(NumericError, match="con"):
        total_loss(_parts(con=float("inf")), LossConfig())


def test_loss_config_defaults_and_validation():
    cfg = LossConfig()
    assert (cfg.lambda_m, cfg.lambda_c, cfg.tau, cfg.aux_layers) == (5.0, 2.0, 0.2, True)
    with pytest.raises(ValueError):
        LossConfig(tau=0.0)
