import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vitprune.errors import BudgetError, ConfigError, DimensionError
from vitprune.ranking import HeadMask
from vitprune.sparsity import (
    BlockBudget,
    SparsityBudget,
    attention_stack,
    attention_unstack,
    er_allocate,
    er_densities,
    full_budget,
    group_l0_columns,
    group_l0_heads,
    mlp_stack,
    mlp_unstack,
    project_column_sparse,
    project_masked_attention,
    project_masked_columns,
    realized_sparsity,
)
from vitprune.vit import DESK_CONFIG, VitConfig, count_params


def enumeration_distance(W, kappa):
    """min ||W - X||_F over all X with at most kappa nonzero columns."""
    n = W.shape[1]
    best = np.inf
    for support in itertools.combinations(range(n), kappa):
        X = np.zeros_like(W)
        X[:, support] = W[:, support]
        best = min(best, np.linalg.norm(W - X))
    return best


def test_group_l0_columns_examples():
    assert group_l0_columns(np.zeros((3, 4))) == 0
    assert group_l0_columns(np.eye(3)) == 3
    W = np.ones((4, 4))
    W[:, [0, 2]] = 0
    assert group_l0_columns(W) == 2


def test_group_l0_heads_examples(rng):
    d, H = 8, 4
    qkv, proj = rng.standard_normal((d, 3 * d)), rng.standard_normal((d, d))
    assert group_l0_heads(np.zeros_like(qkv), np.zeros_like(proj), H) == 0
    assert group_l0_heads(qkv, proj, H) == 4
    dh = d // H
    q2, p2 = qkv.copy(), proj.copy()
    q2[:, 3 * dh:6 * dh] = 0
    assert group_l0_heads(q2, p2, H) == 4  # proj slice still nonzero
    p2[dh:2 * dh] = 0
    assert group_l0_heads(q2, p2, H) == 3


@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 5), st.integers(0, 2**31))
def test_attention_stack_round_trip(H, dh, n_cols, seed):
    r = np.random.default_rng(seed)
    qkv = r.standard_normal((n_cols, 3 * H * dh))
    proj = r.standard_normal((H * dh, n_cols))
    S = attention_stack(qkv, proj, H)
    assert S.shape == (H * 4 * dh, n_cols)
    # head h's rows hold exactly its qkv columns and proj rows
    h = H - 1
    block = S[h * 4 * dh:(h + 1) * 4 * dh]
    assert np.array_equal(block[:3 * dh], qkv[:, 3 * h * dh:3 * (h + 1) * dh].T)
    assert np.array_equal(block[3 * dh:], proj[h * dh:(h + 1) * dh])
    q2, p2 = attention_unstack(S, H)
    assert np.array_equal(q2, qkv) and np.array_equal(p2, proj)


def test_mlp_stack_round_trip(rng):
    fc1, fc2 = rng.standard_normal((4, 6)), rng.standard_normal((6, 4))
    S = mlp_stack(fc1, fc2)
    assert np.array_equal(S[:, 2], np.concatenate([fc1[:, 2], fc2[2]]))
    a, b = mlp_unstack(S, 4)
    assert np.array_equal(a, fc1) and np.array_equal(b, fc2)
    with pytest.raises(DimensionError):
        mlp_stack(fc1, fc2.T)


small = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
               elements=st.floats(-10, 10, allow_nan=False, width=32))


@given(small, st.data())
def test_projection_matches_enumeration(W, data):
    kappa = data.draw(st.integers(0, W.shape[1]))
    P = project_column_sparse(W, kappa)
    assert group_l0_columns(P) <= kappa
    assert np.linalg.norm(W - P) == enumeration_distance(W, kappa)


@given(small, st.data())
def test_projection_idempotent_and_keeps_columns_exactly(W, data):
    kappa = data.draw(st.integers(0, W.shape[1]))
    P = project_column_sparse(W, kappa)
    assert np.array_equal(project_column_sparse(P, kappa), P)
    kept = np.any(P != 0, axis=0)
    assert np.array_equal(P[:, kept], W[:, kept])


def test_projection_edge_cases(rng):
    W = rng.standard_normal((4, 4))
    assert np.array_equal(project_column_sparse(W, 4), W)
    assert not project_column_sparse(W, 0).any()
    ties = np.ones((2, 4))
    assert np.array_equal(np.flatnonzero(project_column_sparse(ties, 2).any(axis=0)), [0, 1])
    with pytest.raises(BudgetError):
        project_column_sparse(W, 5)
    with pytest.raises(BudgetError):
        project_column_sparse(W, -1)


def test_masked_projection_leaves_unmasked_rows(rng):
    W = rng.standard_normal((5, 4))
    rows = np.array([True, False, True, True, False])
    P = project_masked_columns(W, rows, 2)
    assert np.array_equal(P[~rows], W[~rows])
    sub = W[rows]
    assert np.linalg.norm(sub - P[rows]) == enumeration_distance(sub, 2)
    with pytest.raises(BudgetError):
        project_masked_columns(W, rows, 5)


def test_masked_attention_all_kept_is_plain_projection(rng):
    H, dh, d = 2, 2, 4
    qkv, proj = rng.standard_normal((d, 3 * H * dh)), rng.standard_normal((H * dh, d))
    mask = HeadMask(0, H, dh, d, [0, 1])
    q2, p2 = project_masked_attention(qkv, proj, mask, 2)
    ref = project_column_sparse(attention_stack(qkv, proj, H), 2)
    assert np.array_equal(attention_stack(q2, p2, H), ref)
    q3, p3 = project_masked_attention(qkv, proj, mask, d)
    assert np.array_equal(q3, qkv) and np.array_equal(p3, proj)


def test_masked_attention_two_head_toy(rng):
    H, dh, d = 2, 1, 2
    qkv, proj = rng.standard_normal((d, 3 * H * dh)), rng.standard_normal((H * dh, d))
    mask = HeadMask(0, H, dh, d, [1])
    q2, p2 = project_masked_attention(qkv, proj, mask, 1)
    # removed head 0 untouched
    assert np.array_equal(q2[:, :3], qkv[:, :3]) and np.array_equal(p2[0], proj[0])
    kept = attention_stack(qkv, proj, H)[4:]
    got = attention_stack(q2, p2, H)[4:]
    assert np.linalg.norm(kept - got) == enumeration_distance(kept, 1)
    assert group_l0_columns(got) == 1
    with pytest.raises(DimensionError):
        project_masked_attention(qkv[:1], proj[:, :1], mask, 1)


# --- allocation --------------------------------------------------------------

def test_er_densities_follow_erdos_renyi_ratio():
    cfg = DESK_CONFIG
    d, m = cfg.embed_dim, cfg.mlp_hidden
    target = 0.5 * (4 * d * d + 2 * d * m)
    dens = er_densities(cfg, target)
    shapes = [(d, 3 * d), (d, d), (d, m), (m, d)]
    er = np.array([(a + b) / (a * b) for a, b in shapes])
    unclamped = dens < 1
    ratio = dens[unclamped] / er[unclamped]
    assert np.allclose(ratio, ratio[0], rtol=1e-9)
    kept = sum(dn * a * b for dn, (a, b) in zip(dens, shapes))
    assert abs(kept - target) < 1e-6


@pytest.mark.parametrize("ratio", [0.3, 0.4, 0.5, 0.8])
def test_desk_realized_sparsity_within_two_points(ratio):
    b = er_allocate(DESK_CONFIG, ratio).validate(DESK_CONFIG)
    assert abs(realized_sparsity(DESK_CONFIG, b) - ratio) <= 0.02


@pytest.mark.parametrize("ratio", [0.1, 0.3, 0.4, 0.6, 0.8])
def test_budget_respects_survivor_bound(ratio):
    cfg = DESK_CONFIG
    d, dh = cfg.embed_dim, cfg.head_dim
    b = er_allocate(cfg, ratio)
    blk = b.blocks[0]
    # one column of slack per matrix: qkv, proj, fc1, fc2
    slack = cfg.num_blocks * (blk.heads * 3 * dh + blk.heads * dh + 1 + 2 * d + 1)
    assert count_params(cfg, b) <= (1 - ratio) * count_params(cfg) + slack


def test_allocation_limits_and_symmetry():
    tiny = er_allocate(DESK_CONFIG, 1e-6)
    assert tiny.blocks == full_budget(DESK_CONFIG).blocks
    b = er_allocate(DESK_CONFIG, 0.6)
    assert len(set(b.blocks)) == 1
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            er_allocate(DESK_CONFIG, bad)


def test_budget_validation():
    cfg = VitConfig()
    with pytest.raises(BudgetError):
        SparsityBudget(0.5, [BlockBudget(0, 10, 10)] * cfg.num_blocks).validate(cfg)
    with pytest.raises(BudgetError):
        SparsityBudget(0.5, [BlockBudget(1, 10, 10)]).validate(cfg)
    rows = er_allocate(cfg, 0.4).to_rows()
    assert set(rows[0]) == {"block", "kappa_attn_h", "kappa_attn_c", "kappa_mlp_c"}


@given(st.floats(0.01, 0.8))
def test_budgets_are_monotone_in_ratio(r):
    a = er_allocate(DESK_CONFIG, r)
    b = er_allocate(DESK_CONFIG, r + 0.05)
    assert count_params(DESK_CONFIG, b) <= count_params(DESK_CONFIG, a)
