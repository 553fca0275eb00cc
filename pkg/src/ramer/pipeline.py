"""Missing-modality training and inference with retrieved substitutes.

For every sample the available modalities are encoded, each hidden vector
queries its own modality store, and the aligned features of the hits in each
missing modality are summed and L2-normalized into one substitute. The
available hidden vectors and the substitutes are concatenated in
audio/video/text order and classified by a linear joint head.

Substitutes are constants during backprop: the stores are frozen stage-2
artifacts.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Corpus, EmotionLabel, Sample
from .encoder import (SGD, Checkpoint, CheckpointError, EncoderParams, TrainConfig,
                      _encoder_tensors, _encoders_from, check_dims, decode_container,
                      dropout_mask, encode_container, encoder_forward, hidden_backward,
                      hidden_forward)
from .modality import FROM_SHORT, HIDDEN, MODALITIES, N_CLASSES, SHORT
from .numerics import EPS, batch_cross_entropy, softmax
from .vecstore import AlignedStore, StoreError, search_rows

log = logging.getLogger(__name__)

GRID_CODES = ("a", "v", "l", "av", "al", "vl")


@dataclass(frozen=True)
class MissingCondition:
    available: tuple[str, ...]

    @property
    def missing(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m not in self.available)

    @property
    def code(self) -> str:
        return "".join(SHORT[m] for m in self.available)

    def __str__(self) -> str:
        return self.code


def parse_condition(code: str, allow_full: bool = False) -> MissingCondition:
    code = code.strip().lower()
    if not code or any(ch not in FROM_SHORT for ch in code) or len(set(code)) != len(code):
        raise ValueError(f"invalid condition {code!r}; use letters from 'avl'")
    avail = tuple(m for m in MODALITIES if SHORT[m] in code)
    if len(avail) == 3 and not allow_full:
        raise ValueError("condition 'avl' has nothing missing; it is not part of the grid")
    return MissingCondition(avail)


GRID = tuple(parse_condition(c) for c in GRID_CODES)


@dataclass
class CompletionConfig:
    k: int = 10
    metric: str = "cosine"
    db_source: str = "hidden"
    retrieval: bool = True
    keep_miss: str = "replace"
    freeze_encoders: bool = False
    multi_query_policy: str = "pooled"
    fallback: str = "first"

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.metric not in ("cosine", "euclidean"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.db_source not in ("hidden", "raw"):
            raise ValueError(f"unknown db_source {self.db_source!r}")
        if self.keep_miss not in ("replace", "avg"):
            raise ValueError(f"unknown keep_miss mode {self.keep_miss!r}")
        if self.multi_query_policy != "pooled":
            raise ValueError("only the 'pooled' multi-query policy is supported")
        if self.fallback != "first":
            raise ValueError("only the 'first' degenerate-fusion fallback is supported")


@dataclass
class RetrievalAudit:
    """Counters filled during retrieval; ``leaks`` must stay at zero."""

    queries: int = 0
    hits: int = 0
    leaks: int = 0
    degenerate: int = 0

    def merge(self, other: "RetrievalAudit") -> None:
        self.queries += other.queries
        self.hits += other.hits
        self.leaks += other.leaks
        self.degenerate += other.degenerate


# --- single-sample operations ------------------------------------------------

def infer_available_hidden(sample: Sample, condition: MissingCondition,
                           ckpt: Checkpoint) -> dict[str, np.ndarray]:
    out = {}
    for m in condition.available:
        x = sample.embeddings.get(m)
        if x is None:
            raise ValueError(f"sample {sample.id!r} has no {m} embedding")
        h, _ = encoder_forward(x, ckpt.encoders[m])
        out[m] = h
    return out


def fuse_topk(vs, audit: RetrievalAudit | None = None) -> np.ndarray:
    """Sum the retrieved vectors and L2-normalize the sum.

    If the sum cancels to (near) zero the first vector is normalized instead
    and the audit's degeneracy counter is bumped.
    """
    arr = np.asarray(vs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("fuse_topk needs a non-empty list of vectors")
    return _fuse(arr[None], audit)[0]


def _fuse(stack: np.ndarray, audit: RetrievalAudit | None) -> np.ndarray:
    """Batched fusion over ``(n, K, d)``."""
    total = stack.sum(axis=1)
    # same reduction as l2_normalize, so a single hit comes back bit-identical
    norm = np.array([np.sqrt(t @ t) for t in total])
    bad = norm <= EPS
    if np.any(bad):
        n_bad = int(bad.sum())
        log.warning("degenerate fusion for %d sample(s); using the top hit", n_bad)
        if audit is not None:
            audit.degenerate += n_bad
        first = stack[bad, 0]
        fn = np.array([np.sqrt(f @ f) for f in first])
        if np.any(fn <= EPS):
            raise ValueError("degenerate fusion and zero-norm top hit")
        total[bad] = first
        norm[bad] = fn
    return total / norm[:, None]


def complete(hidden: dict[str, np.ndarray], fused: dict[str, np.ndarray]) -> np.ndarray:
    """Concatenate one vector per modality in audio/video/text order."""
    overlap = set(hidden) & set(fused)
    gap = set(MODALITIES) - set(hidden) - set(fused)
    extra = (set(hidden) | set(fused)) - set(MODALITIES)
    if overlap or gap or extra:
        raise ValueError(f"coverage error: overlap={sorted(overlap)} gap={sorted(gap)} "
                         f"unknown={sorted(extra)}")
    parts = [hidden[m] if m in hidden else fused[m] for m in MODALITIES]
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=-1)


def retrieve_substitutes(hidden: dict[str, np.ndarray], condition: MissingCondition,
                         store: AlignedStore, cfg: CompletionConfig, exclusions=(),
                         queries: dict[str, np.ndarray] | None = None,
                         audit: RetrievalAudit | None = None) -> dict[str, list[np.ndarray]]:
    """Top-K aligned substitutes per missing modality for one sample.

    ``queries`` overrides the search keys (raw embeddings when
    ``cfg.db_source == 'raw'``); by default the hidden vectors are used.
    """
    exclusions = set(exclusions)
    q = queries if queries is not None else hidden
    rows = []
    for m in condition.available:
        key_store = store.key_store(m, cfg.db_source)
        mask = key_store.exclusion_mask(exclusions)
        ((r, _),) = search_rows(key_store, np.asarray(q[m])[None, :], cfg.k, exclude=mask,
                                metric=cfg.metric)
        rows.append(r)
    hits = np.concatenate(rows)
    if audit is not None:
        audit.queries += 1
        audit.hits += hits.size
        audit.leaks += sum(store.ids[r] in exclusions for r in hits)
    return {m: [store[m].vectors[r].astype(np.float64) for r in hits] for m in condition.missing}


# --- batched stage-3 model ----------------------------------------------------

@dataclass
class JointClassifierParams:
    W: np.ndarray
    b: np.ndarray


@dataclass
class Stage3Model:
    condition: MissingCondition
    encoders: dict[str, EncoderParams]
    joint: JointClassifierParams
    cfg: CompletionConfig
    miss_hidden: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


class RetrievalContext:
    """Everything needed to retrieve for corpus rows against one store.

    ``forbidden`` holds the store rows that must never be returned (val/test
    members); each query additionally excludes its own row.
    """

    def __init__(self, corpus: Corpus, store: AlignedStore | None, forbidden_ids,
                 audit: RetrievalAudit | None = None):
        self.corpus = corpus
        self.store = store
        self.audit = audit if audit is not None else RetrievalAudit()
        self.forbidden_ids = frozenset(forbidden_ids)
        self._barred = None
        if store is None:
            return
        ref = store[MODALITIES[0]]
        self.forbidden = ref.exclusion_mask(self.forbidden_ids)
        self.store_row = np.array([ref.id_index.get(s, -1) for s in corpus.ids], dtype=np.int64)

    @classmethod
    def for_split(cls, corpus: Corpus, store: AlignedStore | None,
                  audit: RetrievalAudit | None = None) -> "RetrievalContext":
        held = set(corpus.split_ids("val")) | set(corpus.split_ids("test"))
        return cls(corpus, store, held, audit)

    def check_capacity(self, k: int) -> None:
        free = int((~self.forbidden).sum())
        if free < 2:
            raise StoreError("retrieval store is empty after exclusions")
        if free - 1 < k:
            log.warning("store has %d usable records, fewer than k=%d", free - 1, k)

    def substitutes(self, rows: np.ndarray, condition: MissingCondition,
                    hidden: dict[str, np.ndarray], cfg: CompletionConfig) -> dict[str, np.ndarray]:
        hits = []
        self_rows = self.store_row[rows]
        for m in condition.available:
            if cfg.db_source == "raw":
                q = self.corpus.embeddings[m][rows].astype(np.float64)
            else:
                q = hidden[m]
            res = search_rows(self.store.key_store(m, cfg.db_source), q, cfg.k,
                              exclude=self.forbidden, self_rows=self_rows, metric=cfg.metric)
            hits.append(res)
        # pooled policy: each available modality contributes its own K hits
        per_query = [np.concatenate([h[i][0] for h in hits]) for i in range(rows.size)]
        self._audit(rows, per_query)
        width = max(len(p) for p in per_query)
        out = {}
        for m in condition.missing:
            vecs = self.store[m].vectors
            stack = np.zeros((rows.size, width, vecs.shape[1]))
            for i, p in enumerate(per_query):
                stack[i, :len(p)] = vecs[p]
            out[m] = _fuse(stack, self.audit)
        return out

    def _audit(self, rows, per_query) -> None:
        # id-based re-check, independent of the row masks used during the scan
        if self._barred is None:
            self._barred = np.array([s in self.forbidden_ids for s in self.store.ids])
            self._id_to_row = {s: i for i, s in enumerate(self.store.ids)}
        for r, hit_rows in zip(rows, per_query):
            own = self._id_to_row.get(self.corpus.ids[r], -1)
            self.audit.queries += 1
            self.audit.hits += len(hit_rows)
            self.audit.leaks += int(self._barred[hit_rows].sum() + np.sum(hit_rows == own))


def _missing_slots(model_cfg: CompletionConfig, condition: MissingCondition, n: int,
                   fused: dict[str, np.ndarray] | None,
                   miss_hidden: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    slots = {}
    for m in condition.missing:
        if fused is None:
            slots[m] = np.zeros((n, HIDDEN))
        elif model_cfg.keep_miss == "avg":
            slots[m] = 0.5 * (fused[m] + miss_hidden[m][None, :])
        else:
            slots[m] = fused[m]
    return slots


def miss_hidden_vectors(ckpt: Checkpoint, condition: MissingCondition) -> dict[str, np.ndarray]:
    """Normalized hidden feature of an all-zero input per missing modality."""
    out = {}
    for m in condition.missing:
        h, _ = encoder_forward(np.zeros(ckpt.encoders[m].in_dim), ckpt.encoders[m])
        out[m] = h / max(np.linalg.norm(h), EPS)
    return out


def _batch_inputs(model: Stage3Model, ctx: RetrievalContext, rows: np.ndarray):
    caches, hidden = {}, {}
    for m in model.condition.available:
        x = ctx.corpus.embeddings[m][rows].astype(np.float64)
        hidden[m], caches[m] = hidden_forward(model.encoders[m], x)
    fused = ctx.substitutes(rows, model.condition, hidden, model.cfg) if model.cfg.retrieval else None
    slots = _missing_slots(model.cfg, model.condition, rows.size, fused, model.miss_hidden)
    return complete(hidden, slots), caches


def predict_rows(model: Stage3Model, ctx: RetrievalContext, rows: np.ndarray,
                 batch: int = 512) -> tuple[np.ndarray, np.ndarray]:
    probs = np.zeros((rows.size, N_CLASSES))
    for lo in range(0, rows.size, batch):
        r = rows[lo:lo + batch]
        c, _ = _batch_inputs(model, ctx, r)
        probs[lo:lo + r.size] = softmax(c @ model.joint.W + model.joint.b)
    return probs.argmax(axis=1), probs


def predict(sample: Sample, condition: MissingCondition, model: Stage3Model,
            store: AlignedStore, cfg: CompletionConfig | None = None, exclusions=(),
            audit: RetrievalAudit | None = None) -> tuple[EmotionLabel, np.ndarray]:
    """Classify one sample; returns the label and the posterior over six classes."""
    cfg = cfg or model.cfg
    if condition != model.condition:
        raise ValueError(f"model trained for {model.condition}, asked for {condition}")
    hidden = {}
    for m in condition.available:
        x = sample.embeddings.get(m)
        if x is None:
            raise ValueError(f"sample {sample.id!r} has no {m} embedding")
        hidden[m], _ = encoder_forward(x, model.encoders[m])
    fused = None
    if cfg.retrieval:
        excl = set(exclusions) | {sample.id}
        queries = None
        if cfg.db_source == "raw":
            queries = {m: np.asarray(sample.embeddings[m], dtype=np.float64)
                       for m in condition.available}
        subs = retrieve_substitutes(hidden, condition, store, cfg, excl, queries, audit)
        fused = {m: fuse_topk(v, audit) for m, v in subs.items()}
    slots = {}
    for m in condition.missing:
        if fused is None:
            slots[m] = np.zeros(HIDDEN)
        elif cfg.keep_miss == "avg":
            slots[m] = 0.5 * (fused[m] + model.miss_hidden[m])
        else:
            slots[m] = fused[m]
    post = softmax(complete(hidden, slots) @ model.joint.W + model.joint.b)
    return EmotionLabel(int(post.argmax())), post


def stage3_loss(model: Stage3Model, ctx: RetrievalContext, rows: np.ndarray,
                targets: np.ndarray, mask: np.ndarray | None) -> float:
    """Batch loss only (no gradients)."""
    c, _ = _batch_inputs(model, ctx, rows)
    c_drop = c if mask is None else c * mask
    return batch_cross_entropy(softmax(c_drop @ model.joint.W + model.joint.b), targets)


def stage3_loss_and_grads(model: Stage3Model, ctx: RetrievalContext, rows: np.ndarray,
                          targets: np.ndarray, mask: np.ndarray | None):
    """Mean cross-entropy of one batch and gradients for the trainable tensors.

    Returns ``(loss, joint_grads, encoder_grads)``; ``mask`` is the dropout
    mask applied to the 768-d completed vector (``None`` for no dropout).
    """
    c, caches = _batch_inputs(model, ctx, rows)
    c_drop = c if mask is None else c * mask
    probs = softmax(c_drop @ model.joint.W + model.joint.b)
    loss = batch_cross_entropy(probs, targets)
    dlogits = probs.copy()
    dlogits[np.arange(rows.size), targets] -= 1.0
    dlogits /= rows.size
    joint = {"W": c_drop.T @ dlogits, "b": dlogits.sum(axis=0)}
    enc = {}
    if not model.cfg.freeze_encoders:
        dc = dlogits @ model.joint.W.T
        if mask is not None:
            dc = dc * mask
        for m in model.condition.available:
            j = MODALITIES.index(m)
            dh = dc[:, j * HIDDEN:(j + 1) * HIDDEN]
            enc[m] = hidden_backward(model.encoders[m], caches[m], dh)
    return loss, joint, enc


def init_stage3(condition: MissingCondition, ckpt: Checkpoint, cfg: CompletionConfig,
                rng: np.random.Generator) -> Stage3Model:
    width = HIDDEN * len(MODALITIES)
    lim = 1.0 / np.sqrt(width)
    joint = JointClassifierParams(rng.uniform(-lim, lim, size=(width, N_CLASSES)),
                                  np.zeros(N_CLASSES))
    encoders = {m: ckpt.encoders[m].copy() for m in condition.available}
    miss = miss_hidden_vectors(ckpt, condition) if cfg.keep_miss == "avg" else {}
    return Stage3Model(condition, encoders, joint, cfg, miss)


def _copy_model(model: Stage3Model) -> Stage3Model:
    return Stage3Model(model.condition, {m: p.copy() for m, p in model.encoders.items()},
                       JointClassifierParams(model.joint.W.copy(), model.joint.b.copy()),
                       model.cfg, {m: v.copy() for m, v in model.miss_hidden.items()},
                       dict(model.meta))


def train_missing(corpus: Corpus, condition: MissingCondition, store: AlignedStore | None,
                  ckpt: Checkpoint, cfg: CompletionConfig, train_config: TrainConfig,
                  audit: RetrievalAudit | None = None, log_fn=None) -> Stage3Model:
    """Stage 3: train the joint head (and available encoders) under ``condition``.

    Returns the weights of the epoch with the best validation WA.
    """
    cfg.validate()
    train_config.validate()
    tr = corpus.split_rows("train")
    va = corpus.split_rows("val")
    if tr.size == 0:
        raise ValueError("empty train split")
    if cfg.retrieval and store is None:
        raise ValueError("retrieval enabled but no store given")
    ctx = RetrievalContext.for_split(corpus, store, audit)
    if cfg.retrieval:
        ctx.check_capacity(cfg.k)

    s_init, s_shuffle, s_drop = np.random.SeedSequence(train_config.seed).spawn(3)
    model = init_stage3(condition, ckpt, cfg, np.random.default_rng(s_init))
    shuffle_rng = np.random.default_rng(s_shuffle)
    drop_rng = np.random.default_rng(s_drop)
    opt = SGD(train_config.learning_rate, train_config.momentum)
    y = corpus.labels
    width = HIDDEN * len(MODALITIES)

    best = None
    history = []
    for epoch in range(1, train_config.epochs + 1):
        order = shuffle_rng.permutation(tr)
        total = 0.0
        for lo in range(0, order.size, train_config.batch_size):
            rows = order[lo:lo + train_config.batch_size]
            mask = dropout_mask(drop_rng, (rows.size, width), train_config.dropout_rate)
            loss, gj, genc = stage3_loss_and_grads(model, ctx, rows, y[rows], mask)
            opt.step(model.joint.__dict__, gj, key="joint")
            for m, g in genc.items():
                opt.step(model.encoders[m].__dict__, g, key=m)
            total += loss * rows.size
        val_wa = 0.0
        if va.size:
            pred, _ = predict_rows(model, ctx, va)
            val_wa = 100.0 * float(np.mean(pred == y[va]))
        history.append({"epoch": epoch, "train_loss": total / order.size, "val_wa": val_wa})
        if log_fn:
            log_fn(f"[{condition}] epoch {epoch:3d} loss {total / order.size:.4f} val WA {val_wa:.2f}")
        if best is None or val_wa > best[1]:
            best = (epoch, val_wa, _copy_model(model))
    epoch, val_wa, model = best
    model.meta = {"kind": "stage3", "epoch": epoch, "val_wa": val_wa,
                  "condition": condition.code, "completion": asdict(cfg),
                  "train_config": asdict(train_config), "history": history}
    return model


# --- stage-3 model files --------------------------------------------------------

def stage3_bytes(model: Stage3Model) -> bytes:
    meta = dict(model.meta)
    meta["condition"] = model.condition.code
    meta["completion"] = asdict(model.cfg)
    dims = {m: p.in_dim for m, p in model.encoders.items()}
    tensors = _encoder_tensors(model.encoders)
    tensors += [("joint.W", model.joint.W), ("joint.b", model.joint.b)]
    tensors += [(f"miss.{m}", v) for m, v in sorted(model.miss_hidden.items())]
    return encode_container(dims, meta, tensors)


def stage3_digest(model: Stage3Model) -> str:
    return hashlib.sha256(stage3_bytes(model)).hexdigest()[:16]


def save_stage3(path, model: Stage3Model) -> None:
    Path(path).write_bytes(stage3_bytes(model))


def load_stage3(path, expected_dims: dict[str, int] | None = None) -> Stage3Model:
    dims, meta, tensors = decode_container(Path(path).read_bytes(), path)
    if meta.get("kind") != "stage3":
        raise CheckpointError(path, 0, f"not a stage-3 model (kind={meta.get('kind')!r})")
    check_dims(dims, expected_dims, path)
    try:
        joint = JointClassifierParams(tensors["joint.W"], tensors["joint.b"])
    except KeyError as exc:
        raise CheckpointError(path, 0, f"missing tensor {exc.args[0]}") from None
    cond = parse_condition(meta["condition"], allow_full=True)
    cfg = CompletionConfig(**meta["completion"])
    miss = {n.split(".", 1)[1]: t for n, t in tensors.items() if n.startswith("miss.")}
    return Stage3Model(cond, _encoders_from(tensors, dims, path), joint, cfg, miss, meta)
