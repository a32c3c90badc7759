"""Group-L0 measurements, column-sparse projections and budget allocation.

Attention and MLP weights are both handled through *stacked* views whose
columns are the prunable groups:

* attention: rows are grouped by head (head ``h`` contributes the transpose
  of its ``qkv_w`` slice followed by its ``proj_w`` rows) and columns are the
  residual-stream features the block reads and writes.  Shape
  ``(n_heads * 4 * dh, n_cols)``.
* MLP: ``fc1_w`` stacked on top of ``fc2_w.T``; column ``j`` is hidden unit
  ``j`` together with its paired ``fc2`` row.  Shape ``(2 * d, n_hidden)``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import bisect

from .errors import BudgetError, ConfigError, DimensionError
from .vit import count_params


# --- stacked views -------------------------------------------------------------

def attention_stack(qkv_w, proj_w, n_heads):
    """Stack one block's attention weights into the head-grouped column view."""
    n_cols = qkv_w.shape[0]
    if proj_w.shape[1] != n_cols:
        raise DimensionError("qkv_w rows and proj_w columns disagree")
    if n_heads == 0:
        return np.zeros((0, n_cols), dtype=qkv_w.dtype)
    dh = proj_w.shape[0] // n_heads
    if qkv_w.shape[1] != 3 * dh * n_heads or proj_w.shape[0] != dh * n_heads:
        raise DimensionError("attention weights inconsistent with head count")
    q = qkv_w.T.reshape(n_heads, 3 * dh, n_cols)
    p = proj_w.reshape(n_heads, dh, n_cols)
    return np.concatenate([q, p], axis=1).reshape(n_heads * 4 * dh, n_cols)


def attention_unstack(stacked, n_heads):
    """Inverse of :func:`attention_stack`; returns ``(qkv_w, proj_w)``."""
    n_cols = stacked.shape[1]
    dh = stacked.shape[0] // (4 * n_heads)
    s = stacked.reshape(n_heads, 4 * dh, n_cols)
    qkv_w = np.ascontiguousarray(s[:, :3 * dh].reshape(n_heads * 3 * dh, n_cols).T)
    proj_w = np.ascontiguousarray(s[:, 3 * dh:].reshape(n_heads * dh, n_cols))
    return qkv_w, proj_w


def attention_head_rows(n_heads, head_dim, heads):
    """Boolean row mask of the stacked attention view selecting ``heads``."""
    rows = np.zeros((n_heads, 4 * head_dim), dtype=bool)
    rows[np.asarray(list(heads), dtype=np.intp)] = True
    return rows.reshape(-1)


def mlp_stack(fc1_w, fc2_w):
    if fc1_w.shape[1] != fc2_w.shape[0]:
        raise DimensionError("fc1 columns and fc2 rows disagree")
    return np.concatenate([fc1_w, fc2_w.T], axis=0)


def mlp_unstack(stacked, embed_dim):
    return (np.ascontiguousarray(stacked[:embed_dim]),
            np.ascontiguousarray(stacked[embed_dim:].T))


# --- group L0 norms ------------------------------------------------------------

def group_l0_columns(W):
    """Number of columns of ``W`` with at least one nonzero entry."""
    W = np.asarray(W)
    if W.size == 0:
        return 0
    return int(np.count_nonzero(np.any(W != 0, axis=0)))


def group_l0_heads(qkv_w, proj_w, n_heads):
    """Number of heads whose ``qkv_w`` or ``proj_w`` slice is not all zero."""
    if n_heads == 0:
        return 0
    stacked = attention_stack(qkv_w, proj_w, n_heads)
    per_head = stacked.reshape(n_heads, -1)
    return int(np.count_nonzero(np.any(per_head != 0, axis=1)))


# --- projections ---------------------------------------------------------------

def top_columns(norms, k):
    """Indices of the ``k`` largest ``norms``; ties go to the lower index."""
    order = np.argsort(-np.asarray(norms), kind="stable")
    return np.sort(order[:k])


def column_norms(W, rows=None):
    W = np.asarray(W)
    if rows is not None:
        W = W[rows]
    return np.sqrt((W * W).sum(axis=0))


def project_column_sparse(W, kappa):
    """Frobenius-nearest matrix with at most ``kappa`` nonzero columns.

    Keeps the ``kappa`` columns of largest Euclidean norm (ties broken toward
    the lower column index) and zeroes the others.
    """
    W = np.asarray(W)
    n = W.shape[1]
    if not 0 <= kappa <= n:
        raise BudgetError(f"kappa={kappa} outside [0, {n}]")
    out = np.zeros_like(W)
    keep = top_columns(column_norms(W), kappa)
    out[:, keep] = W[:, keep]
    return out


def project_masked_columns(W, row_mask, kappa):
    """Column-sparse projection restricted to the rows selected by ``row_mask``.

    Column norms are taken over the selected rows only; within those rows the
    columns outside the top ``kappa`` are zeroed.  Unselected rows pass
    through unchanged.
    """
    W = np.asarray(W)
    row_mask = np.asarray(row_mask, dtype=bool)
    if row_mask.shape != (W.shape[0],):
        raise DimensionError("row mask does not match matrix rows")
    n = W.shape[1]
    if not 0 <= kappa <= n:
        raise BudgetError(f"kappa={kappa} exceeds the {n} maskable columns")
    out = W.copy()
    keep = top_columns(column_norms(W, row_mask), kappa)
    drop = np.setdiff1d(np.arange(n), keep)
    out[np.ix_(row_mask, drop)] = 0
    return out


def project_masked_attention(qkv_w, proj_w, mask, kappa_c):
    """Project one block's attention weights onto ``g``'s feasible set.

    Within the kept-head region of ``mask`` (a :class:`~vitprune.ranking.HeadMask`
    for this block) at most ``kappa_c`` residual-feature columns stay
    nonzero; entries of removed heads are returned unchanged.

    Returns
    -------
    qkv_w, proj_w : ndarray
    """
    n_heads = mask.num_heads
    if mask.m_qkv.shape != qkv_w.shape or mask.m_proj.shape != proj_w.shape:
        raise DimensionError("mask dimensions do not match attention weights")
    stacked = attention_stack(qkv_w, proj_w, n_heads)
    rows = attention_head_rows(n_heads, proj_w.shape[0] // n_heads, mask.keep)
    return attention_unstack(project_masked_columns(stacked, rows, kappa_c), n_heads)


# --- budgets -------------------------------------------------------------------

@dataclass(frozen=True)
class BlockBudget:
    heads: int
    attn_cols: int
    mlp_cols: int


@dataclass
class SparsityBudget:
    """Per-block structural budgets derived from one overall sparsity ratio.

    ``ratio`` is the target fraction of *all* model parameters removed;
    only attention and MLP weights (with the biases they own) are pruned.
    """
    ratio: float
    blocks: list = field(default_factory=list)

    def to_rows(self):
        return [{"block": l, "kappa_attn_h": b.heads, "kappa_attn_c": b.attn_cols,
                 "kappa_mlp_c": b.mlp_cols} for l, b in enumerate(self.blocks)]

    def validate(self, config):
        if len(self.blocks) != config.num_blocks:
            raise BudgetError("budget has the wrong number of blocks")
        for l, b in enumerate(self.blocks):
            if not (1 <= b.heads <= config.num_heads
                    and 1 <= b.attn_cols <= config.embed_dim
                    and 1 <= b.mlp_cols <= config.mlp_hidden):
                raise BudgetError(f"block {l} budget {b} out of range")
        return self


def full_budget(config, ratio=0.0):
    return SparsityBudget(ratio, [BlockBudget(config.num_heads, config.embed_dim,
                                              config.mlp_hidden)] * config.num_blocks)


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def er_densities(config, target_weights):
    """Erdős–Rényi densities for ``(qkv, proj, fc1, fc2)`` of one block.

    Finds by bisection the single scale ``eps`` such that
    ``sum_i min(1, eps * (n_in + n_out) / (n_in * n_out)) * n_in * n_out``
    over the four matrices equals ``target_weights``.
    """
    d, m = config.embed_dim, config.mlp_hidden
    shapes = [(d, 3 * d), (d, d), (d, m), (m, d)]
    sizes = np.array([a * b for a, b in shapes], dtype=float)
    er = np.array([(a + b) / (a * b) for a, b in shapes])
    total = sizes.sum()
    if target_weights >= total:
        return np.ones(4)

    def surplus(eps):
        return float((np.minimum(1.0, eps * er) * sizes).sum() - target_weights)

    hi = 1.0 / er.min()
    eps = bisect(surplus, 0.0, hi, xtol=1e-12, rtol=1e-15, maxiter=500)
    return np.minimum(1.0, eps * er)


def er_allocate(config, overall_sparsity):
    """Per-block head / column budgets for an overall sparsity ratio.

    ``overall_sparsity`` is the fraction of the model's total parameter count
    to remove.  The removal is taken from attention and MLP weights only:
    the per-block surviving-weight target is split across ``W_qkv``,
    ``W_proj``, ``W_fc1`` and ``W_fc2`` by Erdős–Rényi densities.  The
    attention density (parameter-weighted over ``W_qkv`` and ``W_proj``)
    gives the head budget ``round(H * density)``, raised while the kept heads
    could not carry that density with all ``d`` columns; the attention
    column budget fills the remaining density within the kept heads; the MLP
    hidden-unit budget then absorbs the attention rounding so the block hits
    its weight target to within one column.
    """
    if not 0.0 < overall_sparsity < 1.0:
        raise ConfigError(f"overall sparsity {overall_sparsity} must lie in (0, 1)")
    d, m, H = config.embed_dim, config.mlp_hidden, config.num_heads
    per_block = 4 * d * d + 2 * d * m
    removed = overall_sparsity * count_params(config) / config.num_blocks
    target = per_block - removed
    if target < 0:
        raise ConfigError(
            f"sparsity {overall_sparsity} exceeds what attention/MLP pruning can remove")
    dens = er_densities(config, target)
    attn_size = 4 * d * d
    attn_density = (dens[0] * 3 * d * d + dens[1] * d * d) / attn_size
    heads = min(H, max(1, _round_half_up(H * attn_density)))
    # a head count rounded down would need more than d columns to reach the
    # attention density; add heads until the columns can carry it
    while heads < H and attn_density * H / heads > 1.0:
        heads += 1
    cols = min(d, max(1, _round_half_up(d * attn_density * H / heads)))
    attn_kept = attn_size * heads * cols / (H * d)
    mlp_cols = min(m, max(1, _round_half_up((target - attn_kept) / (2 * d))))
    block = BlockBudget(heads, cols, mlp_cols)
    return SparsityBudget(float(overall_sparsity), [block] * config.num_blocks)


def realized_sparsity(config, budget):
    """Fraction of the dense parameter count removed under ``budget``."""
    return 1.0 - count_params(config, budget) / count_params(config)

