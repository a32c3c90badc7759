"""Soft pruning by augmented-Lagrangian splitting, hard pruning, and SGD.

Soft pruning keeps an auxiliary copy ``Z`` of the attention and MLP weight
matrices that always satisfies the structural budget, plus scaled
multipliers ``U``.  Every minibatch takes a gradient step on::

    loss(W) + lam/2 ||(1-M) * W_attn||^2 + rho/2 ||W - Z + U||^2

and once per epoch ``Z`` is re-projected from ``W + U`` and ``U`` accumulates
the residual ``W - Z``.
"""

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BudgetError, ContractError, DivergenceError, NonFiniteError
from .ranking import HeadMask
from .sparsity import (
    attention_head_rows,
    attention_stack,
    column_norms,
    mlp_stack,
    mlp_unstack,
    project_column_sparse,
    project_masked_attention,
    top_columns,
)
from .vit import BlockWeights, accuracy, loss_and_grads

PLACEMENTS = ("full", "printed")


def attn_names(config):
    return [f"blocks.{l}.attn.{k}.weight" for l in range(config.num_blocks)
            for k in ("qkv", "proj")]


def mlp_names(config):
    return [f"blocks.{l}.mlp.{k}.weight" for l in range(config.num_blocks)
            for k in ("fc1", "fc2")]


@dataclass
class AdmmState:
    """Auxiliary variables, scaled multipliers and step parameters.

    ``Z`` and ``U`` map weight names (see :func:`attn_names`,
    :func:`mlp_names`) to arrays shaped like the model's.
    """
    Z: dict
    U: dict
    rho: float
    lam: float
    eta: float
    epochs: int
    epoch: int = 0
    placement: str = "full"

    def attn(self, which):
        d = getattr(self, which)
        return {k: v for k, v in d.items() if ".attn." in k}

    def mlp(self, which):
        d = getattr(self, which)
        return {k: v for k, v in d.items() if ".mlp." in k}


def admm_init(model, rho, lam, eta, epochs, placement="full"):
    """``Z := W`` (copies) and ``U := 0`` for every attention / MLP matrix."""
    if not rho >= 0 or not lam >= 0 or not eta > 0 or int(epochs) < 0:
        raise ContractError("need rho >= 0, lam >= 0, eta > 0, epochs >= 0")
    if placement not in PLACEMENTS:
        raise ContractError(f"placement must be one of {PLACEMENTS}")
    names = attn_names(model.config) + mlp_names(model.config)
    Z = {n: model.get_array(n).copy() for n in names}
    U = {n: np.zeros_like(Z[n]) for n in names}
    return AdmmState(Z, U, float(rho), float(lam), float(eta), int(epochs),
                     placement=placement)


def admm_weight_step(W, grad, Z, U, eta, rho, lam=0.0, keep=None, placement="full"):
    """One gradient step on the augmented Lagrangian for a single array.

    ``placement="full"`` scales the whole gradient by ``eta``::

        W - eta * (grad + lam*(1-M)*W + rho*(W - Z + U))

    ``placement="printed"`` scales only the loss gradient::

        W - eta*grad - lam*(1-M)*W - rho*(W - Z + U)

    ``keep`` is the entry mask ``M`` (``True`` = kept); ``None`` means all
    kept, i.e. no ``lam`` term.
    """
    W = np.asarray(W)
    # python floats keep float32 arrays in float32
    eta, rho, lam = float(eta), float(rho), float(lam)
    penalty = rho * (W - Z + U)
    if keep is not None and lam:
        penalty = penalty + lam * np.where(keep, 0, W)
    if placement == "full":
        return W - eta * (grad + penalty)
    return W - eta * grad - penalty


def _check_grads(grads, epoch, step):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(
                f"non-finite gradient for {name} at epoch {epoch}, step {step}",
                epoch=epoch, step=step)


def _entry_masks(masks):
    out = {}
    for m in masks:
        out[f"blocks.{m.block}.attn.qkv.weight"] = m.m_qkv
        out[f"blocks.{m.block}.attn.proj.weight"] = m.m_proj
    return out


def update_weights_attn(W_attn, grads, masks, state, epoch=0, step=0):
    """Apply the attention-weight step to every array in ``W_attn``.

    Parameters
    ----------
    W_attn, grads : dict
        Arrays keyed by attention weight name.
    masks : list of HeadMask
        One per block.
    """
    _check_grads({k: grads[k] for k in W_attn}, epoch, step)
    keep = _entry_masks(masks)
    return {k: admm_weight_step(W, grads[k], state.Z[k], state.U[k], state.eta,
                                state.rho, state.lam, keep[k], state.placement)
            for k, W in W_attn.items()}


def update_weights_mlp(W_mlp, grads, state, epoch=0, step=0):
    _check_grads({k: grads[k] for k in W_mlp}, epoch, step)
    return {k: admm_weight_step(W, grads[k], state.Z[k], state.U[k], state.eta,
                                state.rho, 0.0, None, state.placement)
            for k, W in W_mlp.items()}


def update_z(state, W_attn, W_mlp, masks, budget):
    """Project ``W + U`` onto the budgeted sets (attention and MLP, per block)."""
    n_blocks = len(budget.blocks)
    for l in range(n_blocks):
        b = budget.blocks[l]
        q, p = f"blocks.{l}.attn.qkv.weight", f"blocks.{l}.attn.proj.weight"
        state.Z[q], state.Z[p] = project_masked_attention(
            W_attn[q] + state.U[q], W_attn[p] + state.U[p], masks[l], b.attn_cols)
        f1, f2 = f"blocks.{l}.mlp.fc1.weight", f"blocks.{l}.mlp.fc2.weight"
        d = W_mlp[f1].shape[0]
        stacked = mlp_stack(W_mlp[f1] + state.U[f1], W_mlp[f2] + state.U[f2])
        state.Z[f1], state.Z[f2] = mlp_unstack(project_column_sparse(stacked, b.mlp_cols), d)
    return state


def update_u(state, W):
    """``U += W - Z`` for every array in ``W`` (attention and MLP alike)."""
    for k, w in W.items():
        state.U[k] = state.U[k] + (w - state.Z[k])
    return state


# --- training loops ------------------------------------------------------------

@dataclass
class Dataset:
    """Images ``(N, C, S, S)`` and integer labels, split into train and val."""
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray = None
    y_test: np.ndarray = None

    def astype(self, dtype):
        kw = {}
        for k, v in asdict(self).items():
            kw[k] = v.astype(dtype, copy=False) if (v is not None and k.startswith("X")) else v
        return Dataset(**kw)


@dataclass(frozen=True)
class Schedule:
    """Minibatch size and shuffling seed.  Epoch ``e`` uses the permutation
    drawn from ``default_rng([seed, e])``, so runs sharing a seed see the same
    minibatches regardless of what happened earlier."""
    batch_size: int = 128
    seed: int = 0

    def batches(self, n, epoch):
        perm = np.random.default_rng([self.seed, epoch]).permutation(n)
        for start in range(0, n, self.batch_size):
            yield perm[start:start + self.batch_size]


def _sgd_rest(model, grads, eta, skip):
    eta = float(eta)
    for name, arr in model.named_arrays():
        if name not in skip:
            model.set_array(name, arr - eta * grads[name])


def masked_norm(model, masks):
    """Frobenius norm of the attention weights belonging to removed heads."""
    total = 0.0
    for m in masks:
        blk = model.blocks[m.block]
        total += float(np.sum(np.where(m.m_qkv, 0, blk.qkv_w) ** 2))
        total += float(np.sum(np.where(m.m_proj, 0, blk.proj_w) ** 2))
    return float(np.sqrt(total))


def _residual(W, state, names):
    return float(np.sqrt(sum(float(np.sum((W[k] - state.Z[k]) ** 2)) for k in names)))


@dataclass
class TraceRecord:
    epoch: int
    loss: float
    masked_norm: float
    primal_residual_attn: float
    primal_residual_mlp: float
    val_acc: float


@dataclass
class PruneTrace:
    """Per-epoch soft-pruning diagnostics."""
    records: list = field(default_factory=list)
    initial_masked_norm: float = float("nan")

    FIELDS = ("epoch", "loss", "masked_norm", "primal_residual_attn",
              "primal_residual_mlp", "val_acc")

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def to_rows(self):
        return [asdict(r) for r in self.records]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=self.FIELDS)
            w.writeheader()
            for row in self.to_rows():
                w.writerow({k: repr(v) if isinstance(v, float) else v
                            for k, v in row.items()})


def run_soft_pruning(model, masks, budget, state, data, schedule=None, evaluate=True):
    """Run ``state.epochs`` epochs of soft pruning on a copy of ``model``.

    Per minibatch the attention and MLP matrices take the augmented
    Lagrangian step (both from the same gradient evaluation); every other
    array takes a plain SGD step.  At the end of each epoch ``Z`` is
    projected and ``U`` updated, in that order.

    Returns
    -------
    model : ModelWeights
    trace : PruneTrace

    Raises
    ------
    DivergenceError
        On a non-finite loss or gradient.
    """
    schedule = schedule or Schedule()
    model = model.copy()
    cfg = model.config
    a_names, m_names = attn_names(cfg), mlp_names(cfg)
    skip = set(a_names) | set(m_names)
    trace = PruneTrace(initial_masked_norm=masked_norm(model, masks))
    n = len(data.y_train)
    for epoch in range(state.epoch + 1, state.epochs + 1):
        losses = []
        for step, idx in enumerate(schedule.batches(n, epoch)):
            try:
                loss, grads, _ = loss_and_grads(model, data.X_train[idx], data.y_train[idx])
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite values at epoch {epoch}, step {step}: {exc}",
                                      epoch=epoch, step=step) from exc
            if not np.isfinite(loss):
                raise DivergenceError(f"loss is {loss} at epoch {epoch}, step {step}",
                                      epoch=epoch, step=step)
            W_attn = {k: model.get_array(k) for k in a_names}
            W_mlp = {k: model.get_array(k) for k in m_names}
            new = update_weights_attn(W_attn, grads, masks, state, epoch, step)
            new.update(update_weights_mlp(W_mlp, grads, state, epoch, step))
            _check_grads(grads, epoch, step)
            _sgd_rest(model, grads, state.eta, skip)
            for k, v in new.items():
                model.set_array(k, v)
            losses.append(loss)
        W_attn = {k: model.get_array(k) for k in a_names}
        W_mlp = {k: model.get_array(k) for k in m_names}
        update_z(state, W_attn, W_mlp, masks, budget)
        update_u(state, {**W_attn, **W_mlp})
        state.epoch = epoch
        val = accuracy(model, data.X_val, data.y_val) if evaluate else float("nan")
        trace.records.append(TraceRecord(
            epoch, float(np.mean(losses)) if losses else float("nan"),
            masked_norm(model, masks), _residual(W_attn, state, a_names),
            _residual(W_mlp, state, m_names), val))
    return model, trace


def train_sgd(model, data, epochs, eta, schedule=None, keep_best=False, epoch_offset=0):
    """Plain minibatch SGD on every array of ``model`` (a copy is trained).

    With ``keep_best`` the returned model is the one with the highest
    validation accuracy seen, including the starting point; ties keep the
    earlier model.

    Returns
    -------
    model : ModelWeights
    history : list of dict
        Per epoch: ``epoch``, ``loss``, ``val_acc``.
    """
    schedule = schedule or Schedule()
    model = model.copy()
    best = model.copy() if keep_best else None
    best_acc = accuracy(model, data.X_val, data.y_val) if keep_best else -1.0
    history = []
    n = len(data.y_train)
    for e in range(1, int(epochs) + 1):
        epoch = epoch_offset + e
        losses = []
        for step, idx in enumerate(schedule.batches(n, epoch)):
            try:
                loss, grads, _ = loss_and_grads(model, data.X_train[idx], data.y_train[idx])
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite values at epoch {epoch}, step {step}: {exc}",
                                      epoch=epoch, step=step) from exc
            if not np.isfinite(loss):
                raise DivergenceError(f"loss is {loss} at epoch {epoch}, step {step}",
                                      epoch=epoch, step=step)
            _check_grads(grads, epoch, step)
            _sgd_rest(model, grads, eta, ())
            losses.append(loss)
        acc = accuracy(model, data.X_val, data.y_val)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_acc": acc})
        if keep_best and acc > best_acc:
            best, best_acc = model.copy(), acc
    return (best if keep_best else model), history


def finetune(model, data, epochs, eta, schedule=None, epoch_offset=0):
    """SGD on the (compacted) architecture, returning the best-validation
    model.  Dimensions never change."""
    return train_sgd(model, data, epochs, eta, schedule, keep_best=True,
                     epoch_offset=epoch_offset)


# --- hard pruning ----------------------------------------------------------------

@dataclass
class BlockStructure:
    """What one block keeps: counts plus the original indices."""
    heads: int
    attn_cols: int
    mlp_cols: int
    head_ids: list
    col_ids: list
    unit_ids: list


@dataclass
class PruneStructure:
    blocks: list = field(default_factory=list)

    def to_rows(self):
        return [{"block": l, "heads": b.heads, "attn_cols": b.attn_cols,
                 "mlp_cols": b.mlp_cols, "head_ids": list(b.head_ids)}
                for l, b in enumerate(self.blocks)]

    def matches(self, budget):
        return all((s.heads, s.attn_cols, s.mlp_cols) == (b.heads, b.attn_cols, b.mlp_cols)
                   for s, b in zip(self.blocks, budget.blocks, strict=True))


def structure_of(model):
    """Read the kept structure back from a (possibly compacted) model."""
    return PruneStructure([BlockStructure(
        b.n_heads, b.n_cols, b.n_hidden, [int(i) for i in b.head_ids],
        [int(i) for i in b.attn_cols], [int(i) for i in b.mlp_units])
        for b in model.blocks])


def _group_norms(W, rows, norm):
    W = W if rows is None else W[rows]
    if norm == "l1":
        return np.abs(W).sum(axis=0)
    return column_norms(W)


def select_structure(model, masks, budget, norm="l2"):
    """Choose kept heads (from ``masks``), attention columns and MLP units.

    Columns are ranked by their norm within the kept heads' rows of the
    current weights; MLP units by the norm of the joint fc1 column / fc2 row.
    ``norm`` is ``"l2"`` or ``"l1"``.
    """
    cfg = model.config
    if not model.is_dense():
        raise ContractError("structure selection needs the dense model")
    if len(masks) != cfg.num_blocks or len(budget.blocks) != cfg.num_blocks:
        raise ContractError("masks and budget must cover every block")
    out = []
    for l, (blk, m, b) in enumerate(zip(model.blocks, masks, budget.blocks)):
        if len(m.keep) != b.heads:
            raise ContractError(
                f"block {l}: mask keeps {len(m.keep)} heads, budget says {b.heads}")
        if not (1 <= b.attn_cols <= cfg.embed_dim and 1 <= b.mlp_cols <= cfg.mlp_hidden):
            raise BudgetError(f"block {l}: budget {b} out of range")
        stacked = attention_stack(blk.qkv_w, blk.proj_w, cfg.num_heads)
        rows = attention_head_rows(cfg.num_heads, cfg.head_dim, m.keep)
        cols = top_columns(_group_norms(stacked, rows, norm), b.attn_cols)
        units = top_columns(_group_norms(mlp_stack(blk.fc1_w, blk.fc2_w), None, norm),
                            b.mlp_cols)
        out.append(BlockStructure(b.heads, b.attn_cols, b.mlp_cols,
                                  [int(h) for h in m.keep], [int(c) for c in cols],
                                  [int(u) for u in units]))
    return PruneStructure(out)


def _qkv_cols(heads, dh):
    return np.concatenate([np.arange(3 * h * dh, 3 * (h + 1) * dh) for h in heads]) \
        if len(heads) else np.zeros(0, dtype=np.intp)


def _proj_rows(heads, dh):
    return np.concatenate([np.arange(h * dh, (h + 1) * dh) for h in heads]) \
        if len(heads) else np.zeros(0, dtype=np.intp)


def compact(model, structure):
    """Physically remove everything outside ``structure`` from a dense model."""
    cfg = model.config
    dh = cfg.head_dim
    blocks = []
    for blk, s in zip(model.blocks, structure.blocks, strict=True):
        heads = np.asarray(s.head_ids, dtype=np.intp)
        cols = np.asarray(s.col_ids, dtype=np.intp)
        units = np.asarray(s.unit_ids, dtype=np.intp)
        qc, pr = _qkv_cols(heads, dh), _proj_rows(heads, dh)
        blocks.append(BlockWeights(
            qkv_w=np.ascontiguousarray(blk.qkv_w[np.ix_(cols, qc)]),
            qkv_b=None if blk.qkv_b is None else blk.qkv_b[qc].copy(),
            proj_w=np.ascontiguousarray(blk.proj_w[np.ix_(pr, cols)]),
            proj_b=blk.proj_b[cols].copy(),
            fc1_w=np.ascontiguousarray(blk.fc1_w[:, units]),
            fc1_b=blk.fc1_b[units].copy(),
            fc2_w=np.ascontiguousarray(blk.fc2_w[units]),
            fc2_b=blk.fc2_b.copy(),
            ln1_g=blk.ln1_g.copy(), ln1_b=blk.ln1_b.copy(),
            ln2_g=blk.ln2_g.copy(), ln2_b=blk.ln2_b.copy(),
            head_ids=heads.copy(), attn_cols=cols.copy(), mlp_units=units.copy()))
    out = model.copy()
    out.blocks = blocks
    return out


def masked_model(model, structure):
    """Dense model with every entry outside ``structure`` set to zero.

    Numerically this is what :func:`compact` computes, without shrinking
    any array.
    """
    cfg = model.config
    dh = cfg.head_dim
    out = model.copy()
    for blk, s in zip(out.blocks, structure.blocks, strict=True):
        heads = np.zeros(cfg.num_heads, dtype=bool)
        heads[s.head_ids] = True
        cols = np.zeros(cfg.embed_dim, dtype=bool)
        cols[s.col_ids] = True
        units = np.zeros(cfg.mlp_hidden, dtype=bool)
        units[s.unit_ids] = True
        qkv_keep = np.repeat(heads, 3 * dh)
        blk.qkv_w[~cols] = 0
        blk.qkv_w[:, ~qkv_keep] = 0
        if blk.qkv_b is not None:
            blk.qkv_b[~qkv_keep] = 0
        blk.proj_w[~np.repeat(heads, dh)] = 0
        blk.proj_w[:, ~cols] = 0
        blk.proj_b[~cols] = 0
        blk.fc1_w[:, ~units] = 0
        blk.fc1_b[~units] = 0
        blk.fc2_w[~units] = 0
    return out


def hard_prune_compact(model, masks, budget, norm="l2"):
    """Remove masked heads, low-norm attention columns and MLP units.

    Column norms are measured on the weights as they are now.  Returns the
    compacted model and the :class:`PruneStructure` it realizes.

    Raises
    ------
    ContractError
        If a mask's keep-set size disagrees with the budget's head count.
    """
    structure = select_structure(model, masks, budget, norm)
    return compact(model, structure), structure


def full_masks(config):
    return [HeadMask.full(config, l) for l in range(config.num_blocks)]
