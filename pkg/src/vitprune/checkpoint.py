"""Binary checkpoint format.

Layout (little-endian throughout)::

    b"GOHSP001"                                   8-byte magic
    u32 x 8: image_size, patch_size, embed_dim, num_blocks,
             num_heads, mlp_hidden, num_classes, dtype_tag
    records until end of file:
        u16 name_len, name bytes (utf-8), u8 rank, u32[rank] dims,
        prod(dims) values of the header dtype, row-major

``dtype_tag`` is 0 for float64 and 1 for float32.  Besides the trainable
arrays, records named ``meta.*`` carry config fields missing from the header
(always float64, so ``ln_eps`` survives a float32 checkpoint exactly) and
``blocks.<l>.{head_ids,attn_cols,mlp_units}`` carry the structural index
arrays of compacted models (stored as exact small integers in the payload
dtype).
"""

import struct

import numpy as np

from .errors import (
    CheckpointDimensionError,
    CheckpointFormatError,
    CheckpointTruncatedError,
)
from .vit import BlockWeights, ModelWeights, VitConfig

MAGIC = b"GOHSP001"
_HEADER = struct.Struct("<8I")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAGS = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_HEADER_FIELDS = ("image_size", "patch_size", "embed_dim", "num_blocks",
                  "num_heads", "mlp_hidden", "num_classes")


def _records(model):
    cfg = model.config
    yield "meta.channels", np.array(cfg.channels)
    yield "meta.qkv_bias", np.array(int(cfg.qkv_bias))
    yield "meta.ln_eps", np.array(cfg.ln_eps)
    yield from model.named_arrays()
    yield from model.named_index_arrays()


def save_checkpoint(model, path):
    cfg = model.config
    tag = _TAGS.get(np.dtype(model.dtype))
    if tag is None:
        raise TypeError(f"unsupported checkpoint dtype {model.dtype}")
    dt = _DTYPES[tag]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(*(getattr(cfg, f) for f in _HEADER_FIELDS), tag))
        for name, arr in _records(model):
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            rec_dt = _DTYPES[0] if name.startswith("meta.") else dt
            fh.write(np.ascontiguousarray(arr, dtype=rec_dt).tobytes())


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def done(self):
        return self.pos >= len(self.buf)


def _read_header(reader):
    magic = reader.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic bytes {magic!r}")
    values = _HEADER.unpack(reader.take(_HEADER.size, "header"))
    tag = values[-1]
    if tag not in _DTYPES:
        raise CheckpointFormatError(f"unknown dtype tag {tag}")
    return dict(zip(_HEADER_FIELDS, values[:-1])), _DTYPES[tag]


def load_checkpoint(path, config=None):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Parameters
    ----------
    config : VitConfig, optional
        Expected architecture.  Any header field that disagrees raises
        :class:`CheckpointDimensionError`.

    Raises
    ------
    CheckpointFormatError
        Bad magic, unknown dtype tag, or missing records.
    CheckpointTruncatedError
        The file ends inside the header or a record.
    CheckpointDimensionError
        Header or tensor shapes disagree with ``config`` / the header.
    """
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    header, dt = _read_header(reader)
    if config is not None:
        for key, value in header.items():
            if getattr(config, key) != value:
                raise CheckpointDimensionError(
                    f"checkpoint declares {key}={value}, config expects "
                    f"{getattr(config, key)}")
    tensors = {}
    while not reader.done():
        (n,) = struct.unpack("<H", reader.take(2, "name length"))
        try:
            name = reader.take(n, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"corrupt record name at byte {reader.pos}") from exc
        (rank,) = struct.unpack("<B", reader.take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"dims of {name}"))
        count = int(np.prod(dims)) if rank else 1
        rec_dt = _DTYPES[0] if name.startswith("meta.") else dt
        payload = reader.take(count * rec_dt.itemsize, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype=rec_dt).reshape(dims).astype(
            rec_dt.newbyteorder("="))
    return _assemble(header, dt, tensors, config)


def _pop(tensors, name):
    try:
        return tensors.pop(name)
    except KeyError:
        raise CheckpointFormatError(f"checkpoint is missing record {name!r}") from None


def _assemble(header, dt, tensors, config):
    channels = int(_pop(tensors, "meta.channels"))
    qkv_bias = bool(int(_pop(tensors, "meta.qkv_bias")))
    ln_eps = float(_pop(tensors, "meta.ln_eps"))
    cfg = VitConfig(**header, channels=channels, qkv_bias=qkv_bias, ln_eps=ln_eps)
    if config is not None and (config.channels, config.qkv_bias) != (channels, qkv_bias):
        raise CheckpointDimensionError("checkpoint channels/qkv_bias disagree with config")
    d, dh = cfg.embed_dim, cfg.head_dim

    def expect(name, shape):
        arr = _pop(tensors, name)
        if arr.shape != tuple(shape):
            raise CheckpointDimensionError(
                f"{name} has shape {arr.shape}, expected {tuple(shape)}")
        return arr

    blocks = []
    for l in range(cfg.num_blocks):
        pre = f"blocks.{l}."
        head_ids = _pop(tensors, pre + "head_ids").astype(np.intp)
        attn_cols = _pop(tensors, pre + "attn_cols").astype(np.intp)
        mlp_units = _pop(tensors, pre + "mlp_units").astype(np.intp)
        nh, nc, nm = len(head_ids), len(attn_cols), len(mlp_units)
        for idx, limit, what in ((head_ids, cfg.num_heads, "head_ids"),
                                 (attn_cols, d, "attn_cols"),
                                 (mlp_units, cfg.mlp_hidden, "mlp_units")):
            if idx.size and (idx.min() < 0 or idx.max() >= limit
                             or np.any(np.diff(idx) <= 0)):
                raise CheckpointDimensionError(
                    f"block {l} {what} must be increasing indices below {limit}")
        blocks.append(BlockWeights(
            qkv_w=expect(pre + "attn.qkv.weight", (nc, 3 * dh * nh)),
            qkv_b=expect(pre + "attn.qkv.bias", (3 * dh * nh,)) if qkv_bias else None,
            proj_w=expect(pre + "attn.proj.weight", (dh * nh, nc)),
            proj_b=expect(pre + "attn.proj.bias", (nc,)),
            fc1_w=expect(pre + "mlp.fc1.weight", (d, nm)),
            fc1_b=expect(pre + "mlp.fc1.bias", (nm,)),
            fc2_w=expect(pre + "mlp.fc2.weight", (nm, d)),
            fc2_b=expect(pre + "mlp.fc2.bias", (d,)),
            ln1_g=expect(pre + "norm1.weight", (d,)),
            ln1_b=expect(pre + "norm1.bias", (d,)),
            ln2_g=expect(pre + "norm2.weight", (d,)),
            ln2_b=expect(pre + "norm2.bias", (d,)),
            head_ids=head_ids, attn_cols=attn_cols, mlp_units=mlp_units))
    model = ModelWeights(
        config=cfg,
        patch_w=expect("patch_embed.weight", (cfg.patch_dim, d)),
        patch_b=expect("patch_embed.bias", (d,)),
        cls_token=expect("cls_token", (d,)),
        pos_embed=expect("pos_embed", (cfg.num_tokens, d)),
        blocks=blocks,
        norm_g=expect("norm.weight", (d,)),
        norm_b=expect("norm.bias", (d,)),
        head_w=expect("head.weight", (d, cfg.num_classes)),
        head_b=expect("head.bias", (cfg.num_classes,)))
    if tensors:
        raise CheckpointFormatError(f"unexpected records: {sorted(tensors)}")
    return model
