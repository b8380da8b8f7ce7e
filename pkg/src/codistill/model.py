"""Transformer encoder-decoder captioner used for both student and teacher.

Image region features are encoded without positional information (regions are
an unordered set); the decoder uses learned position embeddings, causal
self-attention, and cross-attention over the encoded regions.  Blocks are
pre-layer-norm with GELU feed-forward.  All math is float64.

The same graph builder serves three paths: tape-backed forwards for training,
no-grad forwards for frozen models, and a batched no-grad forward used for
greedy decoding over many samples at once.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .hashing import fnv1a64
from .tokenizer import BOS_ID, EOS_ID

CHECKPOINT_MAGIC = b"CODIST01"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feature_dim: int = 16
    layers: int = 2
    embed_dim: int = 64
    heads: int = 4
    ffn_dim: int = 0  # 0 means 4 * embed_dim
    max_positions: int = 32

    def __post_init__(self):
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.embed_dim)
        for name in ("vocab_size", "feature_dim", "layers", "embed_dim", "heads",
                     "ffn_dim", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "feature_dim": self.feature_dim,
            "layers": self.layers,
            "embed_dim": self.embed_dim,
            "heads": self.heads,
            "ffn_dim": self.ffn_dim,
            "max_positions": self.max_positions,
        }


@dataclass
class ModelParams:
    """Named parameter tensors plus the config that fixes their shapes."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def tensors_view(self) -> dict[str, Tensor]:
        """Constant (non-trainable) tensor wrappers for graph building."""
        return {k: Tensor(v) for k, v in self.tensors.items()}


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f, ff, v, p = (config.embed_dim, config.feature_dim, config.ffn_dim,
                      config.vocab_size, config.max_positions)
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (v, d)),
        ("pos_emb", (p, d)),
        ("feat_w", (f, d)),
        ("feat_b", (d,)),
    ]

    def attn(prefix: str):
        for proj in ("q", "k", "v", "o"):
            shapes.append((f"{prefix}.w{proj}", (d, d)))
            shapes.append((f"{prefix}.b{proj}", (d,)))

    def ln(prefix: str):
        shapes.append((f"{prefix}.gain", (d,)))
        shapes.append((f"{prefix}.bias", (d,)))

    def ffn(prefix: str):
        shapes.append((f"{prefix}.w1", (d, ff)))
        shapes.append((f"{prefix}.b1", (ff,)))
        shapes.append((f"{prefix}.w2", (ff, d)))
        shapes.append((f"{prefix}.b2", (d,)))

    for i in range(config.layers):
        ln(f"enc{i}.ln1")
        attn(f"enc{i}.attn")
        ln(f"enc{i}.ln2")
        ffn(f"enc{i}.ffn")
    ln("enc.ln_out")
    for i in range(config.layers):
        ln(f"dec{i}.ln1")
        attn(f"dec{i}.self")
        ln(f"dec{i}.ln2")
        attn(f"dec{i}.cross")
        ln(f"dec{i}.ln3")
        ffn(f"dec{i}.ffn")
    ln("dec.ln_out")
    shapes.append(("out_w", (d, v)))
    shapes.append(("out_b", (v,)))
    return shapes


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Xavier-uniform weight matrices, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(config):
        if len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
        elif name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(config, tensors)


_causal_masks: dict[int, np.ndarray] = {}


def _causal_mask(n: int) -> np.ndarray:
    mask = _causal_masks.get(n)
    if mask is None:
        mask = np.triu(np.full((n, n), -np.inf), k=1)
        _causal_masks[n] = mask
    return mask


def _split_heads(x: Tensor, heads: int) -> Tensor:
    if x.ndim == 2:
        t, d = x.shape
        return ad.transpose(ad.reshape(x, (t, heads, d // heads)), (1, 0, 2))
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _join_heads(x: Tensor) -> Tensor:
    if x.ndim == 3:
        h, t, dh = x.shape
        return ad.reshape(ad.transpose(x, (1, 0, 2)), (t, h * dh))
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _attention(p: Mapping[str, Tensor], name: str, q_in: Tensor, kv_in: Tensor,
               mask: np.ndarray | None, heads: int) -> Tensor:
    q = _split_heads(ad.matmul(q_in, p[f"{name}.wq"]) + p[f"{name}.bq"], heads)
    k = _split_heads(ad.matmul(kv_in, p[f"{name}.wk"]) + p[f"{name}.bk"], heads)
    v = _split_heads(ad.matmul(kv_in, p[f"{name}.wv"]) + p[f"{name}.bv"], heads)
    kt = ad.transpose(k, (0, 2, 1) if k.ndim == 3 else (0, 1, 3, 2))
    scores = ad.matmul(q, kt) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + mask
    ctx = ad.matmul(ad.softmax(scores), v)
    return ad.matmul(_join_heads(ctx), p[f"{name}.wo"]) + p[f"{name}.bo"]


def _ffn(p: Mapping[str, Tensor], name: str, x: Tensor) -> Tensor:
    h = ad.gelu(ad.matmul(x, p[f"{name}.w1"]) + p[f"{name}.b1"])
    return ad.matmul(h, p[f"{name}.w2"]) + p[f"{name}.b2"]


def _ln(p: Mapping[str, Tensor], name: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, p[f"{name}.gain"], p[f"{name}.bias"])


def _encode_regions(p: Mapping[str, Tensor], config: ModelConfig, feats: Tensor,
                    region_mask: np.ndarray | None) -> Tensor:
    h = ad.matmul(feats, p["feat_w"]) + p["feat_b"]
    for i in range(config.layers):
        normed = _ln(p, f"enc{i}.ln1", h)
        h = h + _attention(p, f"enc{i}.attn", normed, normed, region_mask, config.heads)
        h = h + _ffn(p, f"enc{i}.ffn", _ln(p, f"enc{i}.ln2", h))
    return _ln(p, "enc.ln_out", h)


def _decode_prefix(p: Mapping[str, Tensor], config: ModelConfig, memory: Tensor,
                   prefix: np.ndarray, cross_mask: np.ndarray | None) -> Tensor:
    t = prefix.shape[-1]
    x = ad.gather(p["tok_emb"], prefix) + ad.gather(p["pos_emb"], np.arange(t))
    causal = _causal_mask(t)
    for i in range(config.layers):
        normed = _ln(p, f"dec{i}.ln1", x)
        x = x + _attention(p, f"dec{i}.self", normed, normed, causal, config.heads)
        x = x + _attention(p, f"dec{i}.cross", _ln(p, f"dec{i}.ln2", x), memory,
                           cross_mask, config.heads)
        x = x + _ffn(p, f"dec{i}.ffn", _ln(p, f"dec{i}.ln3", x))
    x = _ln(p, "dec.ln_out", x)
    return ad.softmax(ad.matmul(x, p["out_w"]) + p["out_b"])


def forward_graph(p: Mapping[str, Tensor], config: ModelConfig, features,
                  prefix: np.ndarray, region_mask: np.ndarray | None = None,
                  cross_mask: np.ndarray | None = None) -> Tensor:
    """Softmax rows for `prefix` (BOS-led token ids) conditioned on `features`.

    Accepts unbatched ((R, F) features, (T,) prefix) or batched inputs with a
    leading batch axis and the corresponding attention masks.
    """
    feats = features if isinstance(features, Tensor) else Tensor(features)
    memory = _encode_regions(p, config, feats, region_mask)
    return _decode_prefix(p, config, memory, np.asarray(prefix, dtype=np.intp), cross_mask)


def validate_features(config: ModelConfig, features) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != config.feature_dim:
        raise ValueError(
            f"invalid features: expected (regions, {config.feature_dim}), got {feats.shape}"
        )
    if not 1 <= feats.shape[0] <= config.max_positions:
        raise ValueError(f"invalid features: region count {feats.shape[0]} out of range")
    if not np.all(np.isfinite(feats)):
        raise ValueError("invalid features: non-finite entry")
    return feats


def _validate_prefix(config: ModelConfig, prefix) -> np.ndarray:
    ids = np.asarray(prefix, dtype=np.intp)
    if ids.ndim != 1 or ids.shape[0] < 1:
        raise ValueError("prefix must be a non-empty id sequence")
    if ids.shape[0] > config.max_positions:
        raise ValueError("sequence exceeds max positions")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError(f"token id out of range for vocab size {config.vocab_size}")
    return ids


def forward(params: ModelParams, features, prefix) -> np.ndarray:
    """Per-position next-token distributions; row t follows prefix position t."""
    config = params.config
    feats = validate_features(config, features)
    ids = _validate_prefix(config, prefix)
    with ad.no_grad():
        out = forward_graph(params.tensors_view(), config, feats, ids)
    return out.data


def greedy_decode(params: ModelParams, features, max_len: int) -> list[int]:
    """Argmax decoding from BOS; stops at EOS or `max_len` emitted tokens.

    Ties pick the smallest token id.  The result excludes BOS and EOS.
    One forward pass is consumed per emitted token.
    """
    config = params.config
    if max_len > config.max_positions - 1:
        raise ValueError("max_len exceeds max positions minus BOS")
    feats = validate_features(config, features)
    prefix = [BOS_ID]
    out: list[int] = []
    for _ in range(max_len):
        rows = forward(params, feats, prefix)
        nxt = int(np.argmax(rows[-1]))
        if nxt == EOS_ID:
            break
        out.append(nxt)
        prefix.append(nxt)
    return out


def greedy_decode_batch(params: ModelParams, features_list, max_len: int) -> list[list[int]]:
    """Batched greedy decoding; same semantics as greedy_decode per sample.

    Regions are zero-padded to a common count and masked out of attention.
    Finished sequences are padded with PAD and ignored.
    """
    config = params.config
    if not features_list:
        return []
    if max_len > config.max_positions - 1:
        raise ValueError("max_len exceeds max positions minus BOS")
    feats = [validate_features(config, f) for f in features_list]
    b = len(feats)
    rmax = max(f.shape[0] for f in feats)
    batch = np.zeros((b, rmax, config.feature_dim))
    key_mask = np.full((b, 1, 1, rmax), -np.inf)
    for i, f in enumerate(feats):
        batch[i, : f.shape[0]] = f
        key_mask[i, :, :, : f.shape[0]] = 0.0
    prefix = np.full((b, 1), BOS_ID, dtype=np.intp)
    done = np.zeros(b, dtype=bool)
    outs: list[list[int]] = [[] for _ in range(b)]
    view = params.tensors_view()
    for _ in range(max_len):
        with ad.no_grad():
            rows = forward_graph(view, config, batch, prefix,
                                 region_mask=key_mask, cross_mask=key_mask)
        nxt = np.argmax(rows.data[:, -1, :], axis=-1)
        for i in range(b):
            if done[i]:
                nxt[i] = 0  # PAD
            elif nxt[i] == EOS_ID:
                done[i] = True
                nxt[i] = 0
            else:
                outs[i].append(int(nxt[i]))
        if done.all():
            break
        prefix = np.concatenate([prefix, nxt[:, None].astype(np.intp)], axis=1)
    return outs


def loss_grad(params: ModelParams, loss_fn: Callable[[dict[str, Tensor]], Tensor]
              ) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate a scalar tape loss over `params` and return (value, gradients).

    `loss_fn` receives the parameters wrapped as trainable tensors; everything
    else it closes over enters the graph as constants.
    """
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.tensors.items()}
    node = loss_fn(leaves)
    value = float(node.data)
    if not math.isfinite(value):
        raise RuntimeError("diverged")
    ad.backward(node)
    grads = {}
    for k, leaf in leaves.items():
        grads[k] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return value, grads


def save_checkpoint(params: ModelParams, path) -> None:
    """Binary checkpoint: magic, tensor table (float32 payloads), FNV-1a checksum."""
    buf = bytearray(CHECKPOINT_MAGIC)
    names = sorted(params.tensors)
    buf += struct.pack("<I", len(names))
    for name in names:
        raw = name.encode("utf-8")
        arr = params.tensors[name]
        buf += struct.pack("<I", len(raw))
        buf += raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.astype("<f4").tobytes()
    buf += struct.pack("<Q", fnv1a64(bytes(buf)))
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into float64 tensors, verifying the checksum."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 12 or blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    body, tail = blob[:-8], blob[-8:]
    if struct.unpack("<Q", tail)[0] != fnv1a64(body):
        raise ValueError("checkpoint checksum mismatch")
    off = len(CHECKPOINT_MAGIC)
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", body, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        tensors[name] = arr.astype(np.float64)
    if off != len(body):
        raise ValueError("checkpoint has trailing bytes")
    return tensors


def params_from_checkpoint(config: ModelConfig, path) -> ModelParams:
    tensors = load_checkpoint(path)
    expected = dict(_param_shapes(config))
    if set(tensors) != set(expected):
        raise ValueError("checkpoint tensors do not match model config")
    for name, arr in tensors.items():
        if arr.shape != expected[name]:
            raise ValueError(
                f"checkpoint tensor {name} has shape {arr.shape}, expected {expected[name]}"
            )
    return ModelParams(config, tensors)
