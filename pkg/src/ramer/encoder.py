"""Per-modality encoder: input projection, a single-token transformer block and
a classifier head, with hand-written backprop and stage-1 training.

The block runs at the hidden width (256) after the input projection. With one
utterance-level token the attention weight is exactly 1, so self-attention
reduces to the value projection followed by the output projection; it is
computed in that closed form.

Row-vector convention throughout: a batch is ``(n, features)`` and a layer is
``x @ W + b``.
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .modality import CODE, FROM_CODE, HIDDEN, MODALITIES, N_CLASSES
from .numerics import batch_cross_entropy, softmax
from .rfv import FormatError

LN_EPS = 1e-8
FFN_MULT = 2


@dataclass
class EncoderParams:
    W_in: np.ndarray
    b_in: np.ndarray
    W_v: np.ndarray
    b_v: np.ndarray
    W_o: np.ndarray
    b_o: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    W_f1: np.ndarray
    b_f1: np.ndarray
    W_f2: np.ndarray
    b_f2: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    W_c: np.ndarray
    b_c: np.ndarray

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @property
    def in_dim(self) -> int:
        return self.W_in.shape[0]

    @property
    def hidden(self) -> int:
        return self.W_in.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.names()}

    def copy(self) -> "EncoderParams":
        return EncoderParams(**{n: a.copy() for n, a in self.tensors().items()})

    def equal(self, other: "EncoderParams") -> bool:
        return all(np.array_equal(a, getattr(other, n)) for n, a in self.tensors().items())


def init_encoder(in_dim: int, rng: np.random.Generator, hidden: int = HIDDEN,
                 n_classes: int = N_CLASSES) -> EncoderParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit LN gains."""
    def w(fan_in, fan_out):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    ffn = FFN_MULT * hidden
    z = np.zeros
    return EncoderParams(
        W_in=w(in_dim, hidden), b_in=z(hidden),
        W_v=w(hidden, hidden), b_v=z(hidden),
        W_o=w(hidden, hidden), b_o=z(hidden),
        ln1_g=np.ones(hidden), ln1_b=z(hidden),
        W_f1=w(hidden, ffn), b_f1=z(ffn),
        W_f2=w(ffn, hidden), b_f2=z(hidden),
        ln2_g=np.ones(hidden), ln2_b=z(hidden),
        W_c=w(hidden, n_classes), b_c=z(n_classes),
    )


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def layer_norm_backward(dy: np.ndarray, g: np.ndarray, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    if rate <= 0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


@dataclass
class _Cache:
    x: np.ndarray
    p: np.ndarray
    v: np.ndarray
    ln1: tuple
    y1: np.ndarray
    z: np.ndarray
    r: np.ndarray
    ln2: tuple
    h: np.ndarray
    mask: np.ndarray | None
    h_drop: np.ndarray


def _as_batch(x, in_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ValueError(f"input dim {x.shape[-1]} does not match encoder dim {in_dim}")
    return x, single


def hidden_forward(params: EncoderParams, x: np.ndarray) -> tuple[np.ndarray, _Cache]:
    """Trunk only: ``x`` (n, in_dim) -> ``h`` (n, hidden) plus backprop cache."""
    p = x @ params.W_in + params.b_in
    v = p @ params.W_v + params.b_v
    attn = v @ params.W_o + params.b_o
    y1, ln1 = layer_norm(p + attn, params.ln1_g, params.ln1_b)
    z = y1 @ params.W_f1 + params.b_f1
    r = np.maximum(z, 0.0)
    f = r @ params.W_f2 + params.b_f2
    h, ln2 = layer_norm(y1 + f, params.ln2_g, params.ln2_b)
    return h, _Cache(x, p, v, ln1, y1, z, r, ln2, h, None, h)


def _forward(params, x, mode, rng, mask, dropout_rate):
    h, cache = hidden_forward(params, x)
    if mode == "train":
        if mask is None:
            if rng is None:
                raise ValueError("train mode needs an rng or an explicit dropout mask")
            mask = dropout_mask(rng, h.shape, dropout_rate)
        cache.mask = mask
        cache.h_drop = h * mask
    elif mode != "infer":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    logits = cache.h_drop @ params.W_c + params.b_c
    return h, logits, cache


def encoder_forward(x, params: EncoderParams, mode: str = "infer", rng=None,
                    mask=None, dropout_rate: float = 0.5):
    """Return ``(h, logits)``; ``h`` is the pre-dropout hidden feature.

    Accepts a single vector or an ``(n, in_dim)`` batch.
    """
    xb, single = _as_batch(x, params.in_dim)
    h, logits, _ = _forward(params, xb, mode, rng, mask, dropout_rate)
    if single:
        return h[0], logits[0]
    return h, logits


def hidden_backward(params: EncoderParams, cache: _Cache, dh: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the trunk parameters given ``dL/dh`` (pre-dropout)."""
    g = {}
    dr2, g["ln2_g"], g["ln2_b"] = layer_norm_backward(dh, params.ln2_g, cache.ln2)
    # r2 = y1 + f
    g["W_f2"] = cache.r.T @ dr2
    g["b_f2"] = dr2.sum(axis=0)
    dz = (dr2 @ params.W_f2.T) * (cache.z > 0)
    g["W_f1"] = cache.y1.T @ dz
    g["b_f1"] = dz.sum(axis=0)
    dy1 = dr2 + dz @ params.W_f1.T
    dr1, g["ln1_g"], g["ln1_b"] = layer_norm_backward(dy1, params.ln1_g, cache.ln1)
    # r1 = p + (p W_v + b_v) W_o + b_o
    g["W_o"] = cache.v.T @ dr1
    g["b_o"] = dr1.sum(axis=0)
    dv = dr1 @ params.W_o.T
    g["W_v"] = cache.p.T @ dv
    g["b_v"] = dv.sum(axis=0)
    dp = dr1 + dv @ params.W_v.T
    g["W_in"] = cache.x.T @ dp
    g["b_in"] = dp.sum(axis=0)
    return g


def encoder_backward(x, params: EncoderParams, target, mode: str = "infer", rng=None,
                     mask=None, dropout_rate: float = 0.5):
    """Mean cross-entropy over the batch and its exact gradient for every tensor."""
    xb, _ = _as_batch(x, params.in_dim)
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    h, logits, cache = _forward(params, xb, mode, rng, mask, dropout_rate)
    probs = softmax(logits)
    loss = batch_cross_entropy(probs, t)
    dlogits = probs.copy()
    dlogits[np.arange(len(t)), t] -= 1.0
    dlogits /= len(t)
    grads = {"W_c": cache.h_drop.T @ dlogits, "b_c": dlogits.sum(axis=0)}
    dh = dlogits @ params.W_c.T
    if cache.mask is not None:
        dh = dh * cache.mask
    grads.update(hidden_backward(params, cache, dh))
    return loss, {n: grads[n] for n in EncoderParams.names()}


# --- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    dropout_rate: float = 0.5
    learning_rate: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    hidden: int = HIDDEN

    def validate(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.learning_rate <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("learning_rate must be positive and momentum in [0, 1)")


class SGD:
    """Momentum SGD: ``v = mu * v + g; p -= lr * v`` on a dict of tensors."""

    def __init__(self, lr: float, momentum: float):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[tuple, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], key=0):
        for name, g in grads.items():
            slot = (key, name)
            v = self.velocity.get(slot)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[slot] = v
            params[name] -= self.lr * v


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    encoders: dict[str, EncoderParams]
    meta: dict = field(default_factory=dict)

    @property
    def dims(self) -> dict[str, int]:
        return {m: p.in_dim for m, p in self.encoders.items()}


def predict_labels(params: EncoderParams, x: np.ndarray, batch: int = 1024) -> np.ndarray:
    out = []
    for lo in range(0, len(x), batch):
        _, logits = encoder_forward(x[lo:lo + batch], params)
        out.append(np.atleast_2d(logits).argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def pretrain_full_modality(corpus, config: TrainConfig, log=None) -> Checkpoint:
    """Stage 1: train the three encoders on the labeled train split.

    The joint objective is the sum of per-modality cross-entropies; as the
    encoders share no parameters each is updated from its own term on the same
    batch order. The epoch with the best validation WA (mean over modalities)
    is returned.
    """
    config.validate()
    tr = corpus.split_rows("train")
    va = corpus.split_rows("val")
    if tr.size == 0:
        raise ValueError("empty train split")
    for m in MODALITIES:
        if not corpus.present[m][tr].all() or not corpus.present[m][va].all():
            raise ValueError(f"train/val samples lack {m} embeddings")
    ss = np.random.SeedSequence(config.seed)
    s_init, s_shuffle, s_drop = ss.spawn(3)
    init_rng = np.random.default_rng(s_init)
    enc = {m: init_encoder(corpus.dims[m], init_rng, config.hidden) for m in MODALITIES}
    shuffle_rng = np.random.default_rng(s_shuffle)
    drop_rng = np.random.default_rng(s_drop)
    opt = SGD(config.learning_rate, config.momentum)
    y = corpus.labels
    xs = {m: corpus.embeddings[m] for m in MODALITIES}

    best = None
    history = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(tr)
        total = 0.0
        for lo in range(0, order.size, config.batch_size):
            rows = order[lo:lo + config.batch_size]
            for m in MODALITIES:
                loss, grads = encoder_backward(xs[m][rows], enc[m], y[rows], mode="train",
                                               rng=drop_rng, dropout_rate=config.dropout_rate)
                opt.step(enc[m].__dict__, grads, key=m)
                total += loss * rows.size
        if va.size:
            val_wa = float(np.mean([100.0 * np.mean(predict_labels(enc[m], xs[m][va]) == y[va])
                                    for m in MODALITIES]))
        else:
            val_wa = 0.0
        history.append({"epoch": epoch, "train_loss": total / order.size, "val_wa": val_wa})
        if log:
            log(f"epoch {epoch:3d} loss {total / order.size:.4f} val WA {val_wa:.2f}")
        if best is None or val_wa > best[1]:
            best = (epoch, val_wa, {m: p.copy() for m, p in enc.items()})

    epoch, val_wa, params = best
    meta = {"kind": "pretrain", "epoch": epoch, "val_wa": val_wa, "seed": config.seed,
            "train_config": asdict(config), "config_hash": config_hash(asdict(config)),
            "history": history}
    return Checkpoint(params, meta)


# --- checkpoint files -------------------------------------------------------

CK_MAGIC = b"RAMERCK1"
CK_VERSION = 1


class CheckpointError(FormatError):
    pass


class DimMismatch(ValueError):
    pass


def encode_container(dims: dict[str, int], meta: dict,
                     tensors: list[tuple[str, np.ndarray]]) -> bytes:
    """Serialize a RAMERCK1 container: header, dim table, JSON meta, f64 tensors, CRC32."""
    parts = [CK_MAGIC, struct.pack("<HB", CK_VERSION, len(dims))]
    for m, d in dims.items():
        parts.append(struct.pack("<BI", CODE[m], d))
    mblob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(mblob)))
    parts.append(mblob)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        a = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<HB", len(nb), a.ndim))
        parts.append(nb)
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_container(data: bytes, path="<bytes>"):
    def need(pos, n, what):
        if pos + n > len(data) - 4:
            raise CheckpointError(path, pos, f"truncated while reading {what}")

    if len(data) < len(CK_MAGIC) + 7:
        raise CheckpointError(path, 0, "file too short")
    if data[:8] != CK_MAGIC:
        raise CheckpointError(path, 0, f"bad magic {data[:8]!r}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(path, len(data) - 4, "CRC32 mismatch")
    version, n_mod = struct.unpack_from("<HB", data, 8)
    if version != CK_VERSION:
        raise CheckpointError(path, 8, f"unsupported checkpoint version {version}")
    pos = 11
    dims = {}
    for _ in range(n_mod):
        need(pos, 5, "dim table")
        code, d = struct.unpack_from("<BI", data, pos)
        if code not in FROM_CODE:
            raise CheckpointError(path, pos, f"unknown modality code {code}")
        dims[FROM_CODE[code]] = d
        pos += 5
    need(pos, 4, "metadata length")
    (mlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    need(pos, mlen, "metadata")
    meta = json.loads(data[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    need(pos, 4, "tensor count")
    (nt,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(nt):
        need(pos, 3, "tensor header")
        nlen, ndim = struct.unpack_from("<HB", data, pos)
        pos += 3
        need(pos, nlen + 4 * ndim, "tensor header")
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) * 8
        need(pos, size, f"tensor {name}")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size // 8,
                                      offset=pos).reshape(shape).astype(np.float64)
        pos += size
    if pos != len(data) - 4:
        raise CheckpointError(path, pos, "trailing bytes before CRC")
    return dims, meta, tensors


def _encoder_tensors(encoders: dict[str, EncoderParams]):
    return [(f"{m}.{n}", a) for m in MODALITIES if m in encoders
            for n, a in encoders[m].tensors().items()]


def _encoders_from(tensors: dict, dims: dict[str, int], path) -> dict[str, EncoderParams]:
    out = {}
    for m in dims:
        try:
            p = EncoderParams(**{n: tensors[f"{m}.{n}"] for n in EncoderParams.names()})
        except KeyError as exc:
            raise CheckpointError(path, 0, f"missing tensor {exc.args[0]}") from None
        if p.in_dim != dims[m]:
            raise CheckpointError(path, 0, f"{m} W_in rows {p.in_dim} != declared dim {dims[m]}")
        out[m] = p
    return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    return encode_container(ckpt.dims, ckpt.meta, _encoder_tensors(ckpt.encoders))


def checkpoint_digest(ckpt: Checkpoint) -> str:
    return hashlib.sha256(checkpoint_bytes(ckpt)).hexdigest()[:16]


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def check_dims(found: dict[str, int], expected: dict[str, int] | None, path) -> None:
    if expected is None:
        return
    for m, d in found.items():
        if m in expected and int(expected[m]) != d:
            raise DimMismatch(f"{path}: checkpoint {m} dim {d} != expected {expected[m]}")


def load_checkpoint(path, expected_dims: dict[str, int] | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    dims, meta, tensors = decode_container(data, path)
    check_dims(dims, expected_dims, path)
    return Checkpoint(_encoders_from(tensors, dims, path), meta)
