"""Graph-based attention-head ranking.

Per block, heads are nodes of a graph whose edge weights are absolute cosine
similarities between batch-summed head outputs.  Normalizing each column
gives a Markov transition matrix; its stationary distribution, found by power
iteration from the uniform distribution, scores head importance.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import kendalltau

from .errors import (
    BudgetError,
    ConfigError,
    ContractError,
    ConvergenceError,
    DegenerateHeadError,
    DimensionError,
)
from .vit import forward


@dataclass(frozen=True)
class RankingConfig:
    """Batch size, convergence tolerance and iteration cap for ranking."""
    batch_size: int = 64
    tol: float = 1e-10
    max_iter: int = 10_000

    def __post_init__(self):
        if int(self.batch_size) < 1:
            raise ConfigError("ranking batch_size must be >= 1")
        if not self.tol > 0:
            raise ConfigError("ranking tol must be positive")
        if int(self.max_iter) < 1:
            raise ConfigError("ranking max_iter must be >= 1")


@dataclass
class TransitionMatrix:
    """Column-stochastic head-similarity matrix of one block.

    ``P[i, j]`` is the probability of moving from head ``j`` to head ``i``.
    ``dead`` flags heads whose batch-summed output had zero norm.
    """
    block: int
    P: np.ndarray
    dead: np.ndarray = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise DimensionError(f"transition matrix must be square, got {P.shape}")
        if np.any(P < 0):
            raise ContractError("transition matrix has negative entries")
        if not np.allclose(P.sum(axis=0), 1.0, rtol=0, atol=1e-10):
            raise ContractError("transition matrix columns must sum to 1")
        self.P = P
        if self.dead is None:
            self.dead = np.zeros(P.shape[0], dtype=bool)

    @property
    def num_heads(self):
        return self.P.shape[0]


@dataclass
class ImportanceScores:
    """Stationary distribution of one block's head graph."""
    block: int
    scores: np.ndarray
    n_iter: int = 0
    delta: float = 0.0
    deltas: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1:
            raise DimensionError("scores must be a vector")
        if np.any(s < 0) or abs(s.sum() - 1.0) > 1e-8:
            raise ContractError("scores must be nonnegative and sum to 1")
        self.scores = s

    @property
    def num_heads(self):
        return self.scores.shape[0]

    def order(self):
        """Head indices from most to least important (ties: lower index first)."""
        return np.argsort(-self.scores, kind="stable")


@dataclass
class HeadMask:
    """Kept heads of one block, expanded to entry masks over the dense
    ``qkv_w`` and ``proj_w`` shapes (``True`` = kept)."""
    block: int
    num_heads: int
    head_dim: int
    n_cols: int
    keep: np.ndarray

    def __post_init__(self):
        keep = np.unique(np.asarray(self.keep, dtype=np.intp))
        if keep.size and (keep[0] < 0 or keep[-1] >= self.num_heads):
            raise BudgetError(f"keep-set {keep} outside [0, {self.num_heads})")
        self.keep = keep
        heads = np.zeros(self.num_heads, dtype=bool)
        heads[keep] = True
        self.head_flags = heads
        dh = self.head_dim
        self.m_qkv = np.broadcast_to(np.repeat(heads, 3 * dh), (self.n_cols, 3 * dh * self.num_heads)).copy()
        self.m_proj = np.broadcast_to(np.repeat(heads, dh)[:, None], (dh * self.num_heads, self.n_cols)).copy()

    @property
    def removed(self):
        return np.flatnonzero(~self.head_flags)

    @classmethod
    def full(cls, config, block=0):
        return cls(block, config.num_heads, config.head_dim, config.embed_dim,
                   np.arange(config.num_heads))


def _abs_cosine(A):
    norms = np.sqrt(np.einsum("ij,ij->i", A, A))
    G = np.abs(A @ A.T)
    live = norms > 0
    out = np.zeros_like(G)
    nz = np.outer(norms, norms)
    np.divide(G, nz, out=out, where=np.outer(live, live))
    np.fill_diagonal(out, np.where(live, 1.0, 0.0))
    return np.clip(out, 0.0, 1.0), ~live


def build_transition_matrix(capture, block, on_degenerate="rank_last"):
    """Transition matrix of ``block`` from captured per-head outputs.

    Each head's output is summed over the batch elementwise, flattened, and
    compared with every other head by absolute cosine similarity; columns are
    then normalized to sum to one.

    A head whose summed output is exactly zero is *dead*.  Its row is zero
    (no live head moves to it) and its column spreads uniformly over the
    live heads, so it receives zero stationary mass and ranks last.

    Parameters
    ----------
    capture : HeadCapture or ndarray
        A capture holding ``block``, or the raw ``(B, H, T, dh)`` array.
    on_degenerate : {"rank_last", "raise"}
        ``"raise"`` turns any dead head into :class:`DegenerateHeadError`.
        If every head is dead the error is raised regardless.
    """
    out = capture if isinstance(capture, np.ndarray) else capture.outputs[block]
    out = np.asarray(out, dtype=np.float64)
    if out.ndim != 4:
        raise DimensionError(f"head outputs must be (B, H, T, dh), got {out.shape}")
    H = out.shape[1]
    A = out.sum(axis=0).reshape(H, -1)
    S, dead = _abs_cosine(A)
    if dead.all():
        raise DegenerateHeadError(f"block {block}: every head output is zero")
    if dead.any() and on_degenerate == "raise":
        raise DegenerateHeadError(
            f"block {block}: zero-norm heads {np.flatnonzero(dead).tolist()}")
    S[np.ix_(~dead, dead)] = 1.0
    P = S / S.sum(axis=0, keepdims=True)
    return TransitionMatrix(block, P, dead)


def power_iteration(P, config=None):
    """Stationary distribution of a column-stochastic matrix.

    Starts from the uniform distribution and repeats ``s' = P s`` until
    ``||s' - s||_2 <= tol``.  The returned vector is the last iterate ``s``
    for which that residual was measured, so ``||P s - s|| <= tol`` holds
    exactly for the result.  No damping is applied.

    Raises
    ------
    ConvergenceError
        If ``max_iter`` steps pass without meeting the tolerance.
    """
    config = config or RankingConfig()
    tm = P if isinstance(P, TransitionMatrix) else TransitionMatrix(-1, P)
    M = tm.P
    H = M.shape[0]
    s = np.full(H, 1.0 / H)
    deltas = []
    for it in range(1, config.max_iter + 1):
        nxt = M @ s
        nxt /= nxt.sum()
        delta = float(np.linalg.norm(nxt - s))
        deltas.append(delta)
        if delta <= config.tol:
            return ImportanceScores(tm.block, s, it, delta, deltas)
        s = nxt
    raise ConvergenceError(
        f"power iteration did not reach tol={config.tol} in {config.max_iter} "
        f"steps (final delta {deltas[-1]:.3e})", delta=deltas[-1], n_iter=config.max_iter)


def build_head_mask(scores, kappa_h, head_dim, n_cols=None):
    """Keep the ``kappa_h`` highest-scoring heads (ties: lower index kept).

    Parameters
    ----------
    scores : ImportanceScores or array-like
    head_dim : int
    n_cols : int, optional
        Rows of the dense ``qkv_w``; defaults to ``H * head_dim``.
    """
    sc = scores if isinstance(scores, ImportanceScores) else ImportanceScores(
        -1, np.asarray(scores, dtype=np.float64) / np.sum(scores))
    H = sc.num_heads
    if not 1 <= kappa_h <= H:
        raise BudgetError(f"kappa_h={kappa_h} outside [1, {H}]")
    keep = np.sort(sc.order()[:kappa_h])
    return HeadMask(sc.block, H, head_dim, H * head_dim if n_cols is None else n_cols, keep)


def rank_stability(scores_a, scores_b):
    """Kendall rank correlation (tau-b) between two score vectors."""
    a = np.asarray(getattr(scores_a, "scores", scores_a), dtype=np.float64)
    b = np.asarray(getattr(scores_b, "scores", scores_b), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError("score vectors differ in length")
    if np.array_equal(a, b):
        return 1.0
    return float(kendalltau(a, b).statistic)


@dataclass
class BlockRanking:
    transition: TransitionMatrix
    scores: ImportanceScores
    mask: HeadMask


def rank_heads(model, images, budget=None, config=None, on_degenerate="rank_last"):
    """Rank every block's heads on one batch and build the head masks.

    ``images`` should already be the ``B``-sample ranking batch.  Without a
    ``budget`` every head is kept (scores are still computed).
    """
    config = config or RankingConfig()
    if not model.is_dense():
        raise ContractError("head ranking needs the dense model")
    _, cap = forward(model, images, capture=True)
    cfg = model.config
    out = []
    for l in range(cfg.num_blocks):
        tm = build_transition_matrix(cap, l, on_degenerate)
        sc = power_iteration(tm, config)
        sc.block = l
        kappa = cfg.num_heads if budget is None else budget.blocks[l].heads
        mask = build_head_mask(sc, kappa, cfg.head_dim, cfg.embed_dim)
        mask.block = l
        out.append(BlockRanking(tm, sc, mask))
    return out


def rankings_to_records(rankings):
    return [{"block": r.scores.block,
             "scores": [float(x) for x in r.scores.scores],
             "keep": [int(h) for h in r.mask.keep],
             "n_iter": r.scores.n_iter}
            for r in rankings]


def export_rankings(rankings, path):
    """Write one JSON record per line: block, per-head scores, keep-set.

    Floats are written with ``repr`` precision and round-trip exactly.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for rec in rankings_to_records(rankings):
            fh.write(json.dumps(rec) + "\n")


def load_rankings(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
