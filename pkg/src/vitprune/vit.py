"""A small vision transformer with per-head weight addressing.

Layout conventions (all weights multiply from the right, ``y = x @ W + b``):

* ``qkv_w`` has shape ``(n_cols, n_heads * 3 * head_dim)``.  Head ``h`` owns
  output columns ``[3*h*dh, 3*(h+1)*dh)``, ordered query, key, value.
* ``proj_w`` has shape ``(n_heads * head_dim, n_cols)``; head ``h`` owns rows
  ``[h*dh, (h+1)*dh)``.
* ``n_cols`` is the number of residual-stream features the attention reads
  from and writes to.  A dense block uses all ``embed_dim`` of them; a
  compacted block keeps the subset listed in ``attn_cols`` and gathers /
  scatters accordingly.
* ``fc1_w`` is ``(embed_dim, n_hidden)`` and ``fc2_w`` is ``(n_hidden,
  embed_dim)``; hidden unit ``j`` pairs column ``j`` of ``fc1_w`` with row
  ``j`` of ``fc2_w``.
"""

import math
from collections.abc import Mapping
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import GradTape, Tensor, backward, kernels, ops


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    mlp_hidden: int = 128
    num_classes: int = 10
    channels: int = 3
    qkv_bias: bool = True
    ln_eps: float = 1e-6

    def __post_init__(self):
        for name in ("image_size", "patch_size", "embed_dim", "num_blocks",
                     "num_heads", "mlp_hidden", "num_classes", "channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self):
        return self.num_patches + 1

    @property
    def patch_dim(self):
        return self.channels * self.patch_size ** 2

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


DESK_CONFIG = VitConfig()
# timm's original vit_small_patch16_224 with a 10-way head (CIFAR-10 fine-tuning)
VIT_SMALL_CONFIG = VitConfig(image_size=224, patch_size=16, embed_dim=768,
                             num_blocks=8, num_heads=8, mlp_hidden=2304,
                             num_classes=10, qkv_bias=False)
DEIT_TINY_CONFIG = VitConfig(image_size=224, patch_size=16, embed_dim=192,
                             num_blocks=12, num_heads=3, mlp_hidden=768,
                             num_classes=1000)
DEIT_SMALL_CONFIG = VitConfig(image_size=224, patch_size=16, embed_dim=384,
                              num_blocks=12, num_heads=6, mlp_hidden=1536,
                              num_classes=1000)


@dataclass
class BlockWeights:
    qkv_w: np.ndarray
    qkv_b: np.ndarray | None
    proj_w: np.ndarray
    proj_b: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    head_ids: np.ndarray
    attn_cols: np.ndarray
    mlp_units: np.ndarray

    _ARRAYS = ("qkv_w", "qkv_b", "proj_w", "proj_b", "fc1_w", "fc1_b",
               "fc2_w", "fc2_b", "ln1_g", "ln1_b", "ln2_g", "ln2_b")
    _INDEX = ("head_ids", "attn_cols", "mlp_units")

    @property
    def n_heads(self):
        return int(self.head_ids.shape[0])

    @property
    def n_cols(self):
        return int(self.attn_cols.shape[0])

    @property
    def n_hidden(self):
        return int(self.fc1_w.shape[1])

    def head_dim(self):
        return self.proj_w.shape[0] // max(self.n_heads, 1)

    def qkv_head_columns(self, h):
        dh = self.head_dim()
        return slice(3 * h * dh, 3 * (h + 1) * dh)

    def proj_head_rows(self, h):
        dh = self.head_dim()
        return slice(h * dh, (h + 1) * dh)

    def qkv_head(self, h):
        """Head ``h``'s ``(n_cols, 3*dh)`` slice of ``qkv_w`` (a view)."""
        return self.qkv_w[:, self.qkv_head_columns(h)]

    def proj_head(self, h):
        """Head ``h``'s ``(dh, n_cols)`` slice of ``proj_w`` (a view)."""
        return self.proj_w[self.proj_head_rows(h)]

    def copy(self):
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = None if v is None else v.copy()
        return BlockWeights(**kw)


@dataclass
class ModelWeights:
    config: VitConfig
    patch_w: np.ndarray
    patch_b: np.ndarray
    cls_token: np.ndarray
    pos_embed: np.ndarray
    blocks: list = field(default_factory=list)
    norm_g: np.ndarray = None
    norm_b: np.ndarray = None
    head_w: np.ndarray = None
    head_b: np.ndarray = None

    _TOP = (("patch_embed.weight", "patch_w"), ("patch_embed.bias", "patch_b"),
            ("cls_token", "cls_token"), ("pos_embed", "pos_embed"))
    _TAIL = (("norm.weight", "norm_g"), ("norm.bias", "norm_b"),
             ("head.weight", "head_w"), ("head.bias", "head_b"))
    _BLOCK_NAMES = {
        "qkv_w": "attn.qkv.weight", "qkv_b": "attn.qkv.bias",
        "proj_w": "attn.proj.weight", "proj_b": "attn.proj.bias",
        "fc1_w": "mlp.fc1.weight", "fc1_b": "mlp.fc1.bias",
        "fc2_w": "mlp.fc2.weight", "fc2_b": "mlp.fc2.bias",
        "ln1_g": "norm1.weight", "ln1_b": "norm1.bias",
        "ln2_g": "norm2.weight", "ln2_b": "norm2.bias",
    }

    @property
    def dtype(self):
        return self.patch_w.dtype

    def named_arrays(self):
        """All trainable arrays as ``(name, array)`` pairs in a fixed order."""
        out = [(name, getattr(self, attr)) for name, attr in self._TOP]
        for l, blk in enumerate(self.blocks):
            for attr in BlockWeights._ARRAYS:
                arr = getattr(blk, attr)
                if arr is not None:
                    out.append((f"blocks.{l}.{self._BLOCK_NAMES[attr]}", arr))
        out.extend((name, getattr(self, attr)) for name, attr in self._TAIL)
        return out

    def named_index_arrays(self):
        """Structural index arrays (not trainable) as ``(name, array)`` pairs."""
        return [(f"blocks.{l}.{attr}", getattr(blk, attr))
                for l, blk in enumerate(self.blocks) for attr in BlockWeights._INDEX]

    def get_array(self, name):
        return dict(self.named_arrays())[name]

    def set_array(self, name, value):
        """Replace the array called ``name`` (shape must not change)."""
        for top, attr in self._TOP + self._TAIL:
            if name == top:
                self._check_same(getattr(self, attr), value, name)
                setattr(self, attr, value)
                return
        _, l, rest = name.split(".", 2)
        blk = self.blocks[int(l)]
        for attr, suffix in self._BLOCK_NAMES.items():
            if rest == suffix:
                self._check_same(getattr(blk, attr), value, name)
                setattr(blk, attr, value)
                return
        raise KeyError(name)

    @staticmethod
    def _check_same(old, new, name):
        if old is None or old.shape != new.shape:
            raise DimensionError(f"cannot replace {name}: shape changes")

    def copy(self):
        return replace(
            self,
            patch_w=self.patch_w.copy(), patch_b=self.patch_b.copy(),
            cls_token=self.cls_token.copy(), pos_embed=self.pos_embed.copy(),
            blocks=[b.copy() for b in self.blocks],
            norm_g=self.norm_g.copy(), norm_b=self.norm_b.copy(),
            head_w=self.head_w.copy(), head_b=self.head_b.copy())

    def astype(self, dtype):
        out = self.copy()
        for name, arr in out.named_arrays():
            out.set_array(name, arr.astype(dtype))
        return out

    def is_dense(self):
        cfg = self.config
        return all(b.n_heads == cfg.num_heads and b.n_cols == cfg.embed_dim
                   and b.n_hidden == cfg.mlp_hidden for b in self.blocks)


def _xavier(rng, n_in, n_out, dtype):
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype)


def init_weights(config, seed=0, dtype=np.float64):
    """Freshly initialized dense weights (Xavier-uniform linears, zero biases)."""
    rng = np.random.default_rng(seed)
    d, m, H = config.embed_dim, config.mlp_hidden, config.num_heads
    blocks = []
    for _ in range(config.num_blocks):
        blocks.append(BlockWeights(
            qkv_w=_xavier(rng, d, 3 * d, dtype),
            qkv_b=np.zeros(3 * d, dtype) if config.qkv_bias else None,
            proj_w=_xavier(rng, d, d, dtype),
            proj_b=np.zeros(d, dtype),
            fc1_w=_xavier(rng, d, m, dtype),
            fc1_b=np.zeros(m, dtype),
            fc2_w=_xavier(rng, m, d, dtype),
            fc2_b=np.zeros(d, dtype),
            ln1_g=np.ones(d, dtype), ln1_b=np.zeros(d, dtype),
            ln2_g=np.ones(d, dtype), ln2_b=np.zeros(d, dtype),
            head_ids=np.arange(H), attn_cols=np.arange(d),
            mlp_units=np.arange(m)))
    return ModelWeights(
        config=config,
        patch_w=_xavier(rng, config.patch_dim, d, dtype),
        patch_b=np.zeros(d, dtype),
        cls_token=(0.02 * rng.standard_normal(d)).astype(dtype),
        pos_embed=(0.02 * rng.standard_normal((config.num_tokens, d))).astype(dtype),
        blocks=blocks,
        norm_g=np.ones(d, dtype), norm_b=np.zeros(d, dtype),
        head_w=_xavier(rng, d, config.num_classes, dtype),
        head_b=np.zeros(config.num_classes, dtype))


def patchify(images, config):
    """``(B, C, S, S)`` images to ``(B, num_patches, C*p*p)`` patch rows."""
    images = np.asarray(images)
    expected = (config.channels, config.image_size, config.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise DimensionError(
            f"expected images of shape (B, {expected[0]}, {expected[1]}, {expected[2]}),"
            f" got {images.shape}")
    B = images.shape[0]
    p = config.patch_size
    g = config.image_size // p
    x = images.reshape(B, config.channels, g, p, g, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(B, g * g, config.patch_dim))


@dataclass
class HeadCapture:
    """Pre-projection per-head attention outputs.

    ``outputs[l]`` has shape ``(B, n_heads_l, tokens, head_dim)``;
    ``head_ids[l]`` maps local head positions to original head indices.
    """
    outputs: dict = field(default_factory=dict)
    head_ids: dict = field(default_factory=dict)

    def head_output(self, block, head):
        """Output of original head ``head`` in ``block``: ``(B, tokens, dh)``."""
        pos = int(np.flatnonzero(self.head_ids[block] == head)[0])
        return self.outputs[block][:, pos]


def _leaves(model, requires_grad):
    return {name: Tensor(arr, requires_grad=requires_grad, name=name)
            for name, arr in model.named_arrays()}


def _graph(model, images, P, capture_blocks=None, capture=None):
    cfg = model.config
    x = Tensor(patchify(images, cfg).astype(model.dtype, copy=False))
    B = x.shape[0]
    d = cfg.embed_dim
    x = ops.linear(x, P["patch_embed.weight"], P["patch_embed.bias"])
    cls = ops.expand(ops.reshape(P["cls_token"], (1, 1, d)), (B, 1, d))
    x = ops.concat([cls, x], axis=1)
    x = ops.add(x, P["pos_embed"])
    T = x.shape[1]
    for l, blk in enumerate(model.blocks):
        pre = f"blocks.{l}."
        nh, dh = blk.n_heads, cfg.head_dim
        dense_cols = blk.n_cols == d
        h = ops.layer_norm(x, P[pre + "norm1.weight"], P[pre + "norm1.bias"], cfg.ln_eps)
        if nh > 0 and blk.n_cols > 0:
            if not dense_cols:
                h = ops.take(h, blk.attn_cols, axis=-1)
            qkv = ops.linear(h, P[pre + "attn.qkv.weight"], P.get(pre + "attn.qkv.bias"))
            qkv = ops.transpose(ops.reshape(qkv, (B, T, nh, 3, dh)), (3, 0, 2, 1, 4))
            q, k, v = (ops.getitem(qkv, i) for i in range(3))
            scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))),
                               1.0 / math.sqrt(dh))
            heads = ops.matmul(ops.softmax(scores), v)
            if capture is not None and (capture_blocks is None or l in capture_blocks):
                capture.outputs[l] = heads.data.copy()
                capture.head_ids[l] = blk.head_ids.copy()
            merged = ops.reshape(ops.transpose(heads, (0, 2, 1, 3)), (B, T, nh * dh))
            out = ops.linear(merged, P[pre + "attn.proj.weight"], P[pre + "attn.proj.bias"])
            if not dense_cols:
                out = ops.scatter(out, blk.attn_cols, d, axis=-1)
            x = ops.add(x, out)
        h = ops.layer_norm(x, P[pre + "norm2.weight"], P[pre + "norm2.bias"], cfg.ln_eps)
        if blk.n_hidden > 0:
            h = ops.gelu(ops.linear(h, P[pre + "mlp.fc1.weight"], P[pre + "mlp.fc1.bias"]))
            x = ops.add(x, ops.linear(h, P[pre + "mlp.fc2.weight"], P[pre + "mlp.fc2.bias"]))
        else:
            x = ops.add(x, P[pre + "mlp.fc2.bias"])
    x = ops.layer_norm(x, P["norm.weight"], P["norm.bias"], cfg.ln_eps)
    x = ops.getitem(x, (slice(None), 0))
    return ops.linear(x, P["head.weight"], P["head.bias"])


def forward(model, images, capture=False):
    """Logits for ``images`` of shape ``(B, C, S, S)``.

    Parameters
    ----------
    capture : bool or iterable of int
        ``True`` records every block's per-head outputs; an iterable limits
        the capture to those block indices.

    Returns
    -------
    logits : ndarray of shape (B, num_classes)
    capture : HeadCapture or None
    """
    cap = HeadCapture() if capture is not False else None
    blocks = None if capture is True or capture is False else set(capture)
    logits = _graph(model, images, _leaves(model, False), blocks, cap)
    return logits.data, cap


def loss_and_grads(model, images, labels):
    """Cross-entropy loss and its gradient w.r.t. every named array.

    Returns
    -------
    loss : float
    grads : dict mapping array name to gradient ndarray
    """
    P = _leaves(model, True)
    with GradTape() as tape:
        tape.watch(*P.values())
        logits = _graph(model, images, P)
        loss = ops.cross_entropy(logits, labels)
    adj = backward(tape, loss)
    return float(loss.data), {name: adj[t] for name, t in P.items()}, logits.data


def predict_logits(model, images, batch_size=256):
    out = []
    for start in range(0, len(images), batch_size):
        out.append(forward(model, images[start:start + batch_size])[0])
    if not out:
        return np.zeros((0, model.config.num_classes), dtype=model.dtype)
    return np.concatenate(out, axis=0)


def accuracy(model, images, labels, batch_size=256):
    if len(labels) == 0:
        return float("nan")
    pred = predict_logits(model, images, batch_size).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def forward_per_head(model, images):
    """Reference forward that evaluates attention one head at a time.

    Uses only the raw kernels.  The projection accumulates each head's
    contribution into one buffer in head order, which reproduces the fused
    k-ordered sum exactly, so logits match :func:`forward` bit-for-bit.
    """
    cfg = model.config
    d, dh = cfg.embed_dim, cfg.head_dim
    x = kernels.matmul(patchify(images, cfg).astype(model.dtype, copy=False)
                       .reshape(-1, cfg.patch_dim), model.patch_w) + model.patch_b
    B = images.shape[0]
    x = x.reshape(B, cfg.num_patches, d)
    cls = np.broadcast_to(model.cls_token.reshape(1, 1, d), (B, 1, d))
    x = np.concatenate([cls, x], axis=1) + model.pos_embed
    T = x.shape[1]
    for blk in model.blocks:
        h, _ = kernels.layer_norm(x, blk.ln1_g, blk.ln1_b, cfg.ln_eps)
        if blk.n_heads > 0 and blk.n_cols > 0:
            h2 = np.take(h, blk.attn_cols, axis=-1).reshape(B * T, blk.n_cols)
            acc = np.zeros((B * T, blk.n_cols), dtype=x.dtype)
            for hh in range(blk.n_heads):
                cols = blk.qkv_head_columns(hh)
                qkv = kernels.matmul(h2, blk.qkv_w[:, cols])
                if blk.qkv_b is not None:
                    qkv = qkv + blk.qkv_b[cols]
                qkv = qkv.reshape(B, T, 3, dh)
                q, k, v = (np.ascontiguousarray(qkv[:, :, i]) for i in range(3))
                s = kernels.matmul(q, np.swapaxes(k, 1, 2)) * (1.0 / math.sqrt(dh))
                o = kernels.matmul(kernels.softmax_rows(s), v)
                kernels.matmul_into(acc, o.reshape(B * T, dh), blk.proj_head(hh))
            out = (acc + blk.proj_b).reshape(B, T, blk.n_cols)
            full = np.zeros((B, T, d), dtype=x.dtype)
            full[..., blk.attn_cols] = out
            x = x + full
        h, _ = kernels.layer_norm(x, blk.ln2_g, blk.ln2_b, cfg.ln_eps)
        if blk.n_hidden > 0:
            u = kernels.gelu(kernels.matmul(h.reshape(B * T, d), blk.fc1_w) + blk.fc1_b)
            x = x + (kernels.matmul(u, blk.fc2_w) + blk.fc2_b).reshape(B, T, d)
        else:
            x = x + blk.fc2_b
    x, _ = kernels.layer_norm(x, model.norm_g, model.norm_b, cfg.ln_eps)
    return kernels.matmul(np.ascontiguousarray(x[:, 0]), model.head_w) + model.head_b


# --- accounting ---------------------------------------------------------------

def _block_counts(config, budget_block):
    return (int(budget_block.heads), int(budget_block.attn_cols),
            int(budget_block.mlp_cols))


def block_param_count(config, heads, attn_cols, mlp_cols):
    """Parameters of one block keeping ``heads`` heads, ``attn_cols`` residual
    features in attention and ``mlp_cols`` hidden units."""
    d, dh = config.embed_dim, config.head_dim
    n = 0
    if heads > 0 and attn_cols > 0:
        n += attn_cols * heads * 3 * dh
        n += heads * 3 * dh if config.qkv_bias else 0
        n += heads * dh * attn_cols + attn_cols
    n += d * mlp_cols + mlp_cols + mlp_cols * d
    n += d  # fc2 bias always present
    n += 4 * d  # two layer norms
    return n


def non_block_param_count(config):
    d = config.embed_dim
    return (config.patch_dim * d + d + d + config.num_tokens * d
            + 2 * d + d * config.num_classes + config.num_classes)


def prunable_weight_count(config):
    """Weights of W_qkv, W_proj, W_fc1, W_fc2 across all blocks (no biases)."""
    d, m = config.embed_dim, config.mlp_hidden
    return config.num_blocks * (4 * d * d + 2 * d * m)


def count_params(model, mask=None):
    """Number of parameters surviving ``mask``.

    Parameters
    ----------
    model : ModelWeights or VitConfig
        A config is counted analytically (no weights allocated).
    mask : None, structural budget, or mapping
        * ``None``: every parameter (for weights, the sum of array sizes).
        * an object with ``.blocks`` whose items expose ``heads``,
          ``attn_cols`` and ``mlp_cols`` counts (e.g. a ``SparsityBudget``
          or a ``PruneStructure``): whole heads/columns removed, biases
          follow their owning unit.
        * a mapping from array name to a binary entry mask: arrays listed in
          the mapping contribute their nonzero mask entries, all other arrays
          their full size.
    """
    if isinstance(mask, Mapping):
        if not isinstance(model, ModelWeights):
            raise TypeError("entry masks need ModelWeights, not a config")
        total = 0
        for name, arr in model.named_arrays():
            if name in mask:
                m = np.asarray(mask[name])
                if m.shape != arr.shape:
                    raise DimensionError(f"mask for {name} has shape {m.shape}")
                total += int(np.count_nonzero(m))
            else:
                total += arr.size
        return total
    if mask is None and isinstance(model, ModelWeights):
        return int(sum(arr.size for _, arr in model.named_arrays()))
    config = model.config if isinstance(model, ModelWeights) else model
    if mask is None:
        per_block = [(config.num_heads, config.embed_dim, config.mlp_hidden)] * config.num_blocks
    else:
        per_block = [_block_counts(config, b) for b in mask.blocks]
    return non_block_param_count(config) + sum(
        block_param_count(config, *c) for c in per_block)


def flops_breakdown(config, mask=None, tokens=None):
    """Per-component FLOPs (2 per multiply-accumulate) of one forward pass."""
    T = config.num_tokens if tokens is None else int(tokens)
    if T < 1:
        raise ValueError("tokens must be >= 1")
    d, dh = config.embed_dim, config.head_dim
    if mask is None:
        per_block = [(config.num_heads, d, config.mlp_hidden)] * config.num_blocks
    else:
        per_block = [_block_counts(config, b) for b in mask.blocks]
    out = {"patch_embed": 2 * max(T - 1, 0) * config.patch_dim * d,
           "classifier": 2 * d * config.num_classes,
           "qkv": 0, "attention": 0, "proj": 0, "mlp": 0}
    for heads, cols, hidden in per_block:
        if heads > 0 and cols > 0:
            out["qkv"] += 2 * T * cols * heads * 3 * dh
            out["attention"] += 2 * 2 * T * T * heads * dh
            out["proj"] += 2 * T * heads * dh * cols
        out["mlp"] += 2 * 2 * T * d * hidden
    return out


def count_flops(config, mask=None, tokens=None):
    """Analytic forward FLOPs: patch embedding, per-block QKV / score / value /
    projection / MLP products, and the classifier.  Softmax and layer norm
    are not counted."""
    return int(sum(flops_breakdown(config, mask, tokens).values()))


def block_flops(config, mask=None, tokens=None):
    b = flops_breakdown(config, mask, tokens)
    return b["qkv"] + b["attention"] + b["proj"] + b["mlp"]
