"""Aligned per-modality hidden-feature stores with exact top-K search.

Stored vectors are L2-normalized and quantized to float32 when the store is
built, so an in-memory store and one reloaded from disk hold identical bits.
Scores are accumulated in float64 from those float32 values.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import Corpus, ScaleTier, tier_members
from .encoder import Checkpoint, encoder_forward
from .modality import MODALITIES, check_modality
from .numerics import EPS, DegenerateVector
from .rfv import FormatError, encode_rfv, read_rfv

METRICS = ("cosine", "euclidean")
STORE_VERSION = 1


class StoreError(ValueError):
    pass


@dataclass(frozen=True)
class SearchHit:
    sample_id: str
    score: float


@dataclass(frozen=True)
class FeatureRecord:
    sample_id: str
    vec: np.ndarray


class ModalityStore:
    """Immutable flat index over one modality's normalized feature rows."""

    def __init__(self, modality: str, ids: Sequence[str], vectors: np.ndarray):
        self.modality = check_modality(modality)
        self.ids = list(ids)
        self.id_index = {sid: i for i, sid in enumerate(self.ids)}
        if len(self.id_index) != len(self.ids):
            raise StoreError(f"{modality} store has duplicate ids")
        vecs = np.ascontiguousarray(vectors, dtype=np.float32)
        if vecs.ndim != 2 or vecs.shape[0] != len(self.ids):
            raise StoreError(f"expected ({len(self.ids)}, dim) vectors, got {vecs.shape}")
        vecs.flags.writeable = False
        self.vectors = vecs
        self._v64 = vecs.astype(np.float64)
        self._sq = np.einsum("ij,ij->i", self._v64, self._v64)
        # lexicographic rank of each id, the tie-breaker
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        self.id_rank = np.empty(len(self.ids), dtype=np.int64)
        self.id_rank[order] = np.arange(len(self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def record(self, i: int) -> FeatureRecord:
        return FeatureRecord(self.ids[i], self.vectors[i].astype(np.float64))

    def rows(self, ids: Iterable[str]) -> np.ndarray:
        try:
            return np.fromiter((self.id_index[s] for s in ids), dtype=np.int64)
        except KeyError as exc:
            raise StoreError(f"id {exc.args[0]!r} not in {self.modality} store") from None

    def exclusion_mask(self, ids: Iterable[str]) -> np.ndarray:
        mask = np.zeros(len(self), dtype=bool)
        idx = [self.id_index[s] for s in ids if s in self.id_index]
        mask[idx] = True
        return mask

    def keys(self, queries: np.ndarray, metric: str) -> np.ndarray:
        """Higher-is-better ranking keys, shape (n_queries, len(store))."""
        q = np.asarray(queries, dtype=np.float64)
        if metric == "cosine":
            norms = np.linalg.norm(q, axis=1, keepdims=True)
            if np.any(norms <= EPS):
                raise DegenerateVector("zero-norm query under cosine metric")
            return (q / norms) @ self._v64.T
        if metric == "euclidean":
            qq = np.einsum("ij,ij->i", q, q)[:, None]
            d2 = qq - 2.0 * (q @ self._v64.T) + self._sq[None, :]
            return -np.maximum(d2, 0.0)
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")


def _select(key: np.ndarray, rank: np.ndarray, k: int) -> np.ndarray:
    """Rows of the k best keys; ties go to the smaller id rank. -inf = excluded."""
    avail = np.flatnonzero(key > -np.inf)
    if avail.size == 0:
        raise StoreError("no records left after exclusions")
    if avail.size > k:
        kth = np.partition(key[avail], avail.size - k)[avail.size - k]
        avail = avail[key[avail] >= kth]
    order = np.lexsort((rank[avail], -key[avail]))
    return avail[order[:k]]


def _scores(key_row: np.ndarray, rows: np.ndarray, metric: str) -> np.ndarray:
    s = key_row[rows]
    return s if metric == "cosine" else np.sqrt(-s)


def search_rows(store: ModalityStore, queries: np.ndarray, k: int,
                exclude: np.ndarray | None = None, self_rows: np.ndarray | None = None,
                metric: str = "cosine", block: int = 256) -> list[tuple[np.ndarray, np.ndarray]]:
    """Batched exact search returning ``(rows, scores)`` per query.

    ``exclude`` is a boolean mask over store rows applied to every query;
    ``self_rows`` optionally bars one extra row per query (``-1`` for none).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != store.dim:
        raise ValueError(f"query dim {q.shape[1]} != store dim {store.dim}")
    out = []
    for lo in range(0, q.shape[0], block):
        keys = store.keys(q[lo:lo + block], metric)
        if exclude is not None:
            keys[:, exclude] = -np.inf
        if self_rows is not None:
            sr = self_rows[lo:lo + block]
            has = sr >= 0
            keys[np.flatnonzero(has), sr[has]] = -np.inf
        hits = _select_block(keys, store.id_rank, k, metric)
        if metric == "euclidean":
            # rank on the expanded form, report distances computed directly:
            # near-duplicates otherwise lose ~1e-8 to cancellation under sqrt
            hits = [(rows, np.sqrt(np.sum((store.vectors[rows] - qi) ** 2, axis=1)))
                    for (rows, _), qi in zip(hits, q[lo:lo + block])]
        out.extend(hits)
    return out


def _select_block(keys: np.ndarray, rank: np.ndarray, k: int, metric: str):
    """Vectorized ``_select`` for rows whose k-th key is unique and finite."""
    n = keys.shape[1]
    if k >= n:
        return [(sel, _scores(row, sel, metric))
                for row in keys for sel in [_select(row, rank, k)]]
    kth = np.partition(keys, n - k, axis=1)[:, n - k]
    above = keys >= kth[:, None]
    simple = (above.sum(axis=1) == k) & np.isfinite(kth)
    res: list = [None] * keys.shape[0]
    idx = np.flatnonzero(simple)
    if idx.size:
        cand = np.nonzero(above[idx])[1].reshape(idx.size, k)
        # order by rank, then stable by descending key: ties fall back to rank
        o = np.argsort(rank[cand], axis=1, kind="stable")
        cand = np.take_along_axis(cand, o, axis=1)
        ck = np.take_along_axis(keys[idx], cand, axis=1)
        o = np.argsort(-ck, axis=1, kind="stable")
        cand = np.take_along_axis(cand, o, axis=1)
        for j, i in enumerate(idx):
            res[i] = (cand[j], _scores(keys[i], cand[j], metric))
    for i in np.flatnonzero(~simple):
        sel = _select(keys[i], rank, k)
        res[i] = (sel, _scores(keys[i], sel, metric))
    return res


def search_topk(store: ModalityStore, query, k: int, exclusions: Iterable[str] = (),
                metric: str = "cosine") -> list[SearchHit]:
    """Exact top-K over one store.

    Cosine results are sorted by descending similarity, euclidean by ascending
    distance; equal scores are ordered by ascending sample id.
    """
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise ValueError("query must be a single vector")
    mask = store.exclusion_mask(exclusions)
    ((rows, scores),) = search_rows(store, q[None, :], k, exclude=mask, metric=metric)
    return [SearchHit(store.ids[r], float(s)) for r, s in zip(rows, scores)]


def brute_force_topk(store: ModalityStore, query, k: int, exclusions: Iterable[str] = (),
                     metric: str = "cosine") -> list[SearchHit]:
    """Reference search: score every record independently and fully sort."""
    q = np.asarray(query, dtype=np.float64)
    excluded = set(exclusions)
    scored = []
    for i, sid in enumerate(store.ids):
        if sid in excluded:
            continue
        v = store.vectors[i].astype(np.float64)
        if metric == "cosine":
            s = float(np.dot(v, q) / np.sqrt(np.dot(q, q)))
            scored.append((-s, sid, s))
        else:
            d = float(np.sqrt(np.sum((v - q) ** 2)))
            scored.append((d, sid, d))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [SearchHit(sid, s) for _, sid, s in scored[:k]]


# --- aligned stores ---------------------------------------------------------

class AlignedStore:
    """Three modality stores over one shared, identically ordered id list.

    ``raw`` optionally holds stores keyed by normalized raw embeddings, used
    only as search keys when retrieval runs against the raw-embedding source.
    """

    def __init__(self, stores: dict[str, ModalityStore], meta: dict | None = None,
                 raw: dict[str, ModalityStore] | None = None):
        ids = None
        for m in MODALITIES:
            if m not in stores:
                raise StoreError(f"aligned store is missing the {m} store")
            if ids is None:
                ids = stores[m].ids
            elif stores[m].ids != ids:
                raise StoreError(f"{m} store ids are not aligned with {MODALITIES[0]}")
        self.stores = stores
        self.ids = list(ids)
        self.meta = dict(meta or {})
        self.raw = raw

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, modality: str) -> ModalityStore:
        return self.stores[modality]

    def key_store(self, modality: str, db_source: str = "hidden") -> ModalityStore:
        if db_source == "hidden":
            return self.stores[modality]
        if db_source == "raw":
            if self.raw is None:
                raise StoreError("raw-embedding keys were not built for this store")
            return self.raw[modality]
        raise ValueError(f"db_source must be 'hidden' or 'raw', got {db_source!r}")


def _normalize_rows(x: np.ndarray, ids: Sequence[str], what: str) -> np.ndarray:
    n = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(n <= EPS)
    if bad.size:
        raise DegenerateVector(f"{what} of sample {ids[bad[0]]!r} has zero norm")
    return (x / n[:, None]).astype(np.float32)


def encode_hidden(ckpt: Checkpoint, corpus: Corpus, rows: np.ndarray, modality: str,
                  batch: int = 1024) -> np.ndarray:
    params = ckpt.encoders[modality]
    out = np.empty((rows.size, params.hidden), dtype=np.float64)
    for lo in range(0, rows.size, batch):
        r = rows[lo:lo + batch]
        h, _ = encoder_forward(corpus.embeddings[modality][r], params)
        out[lo:lo + r.size] = np.atleast_2d(h)
    return out


def build_store(corpus: Corpus, ckpt: Checkpoint, tier: ScaleTier | str = ScaleTier.SMALL,
                seed: int = 0, ckpt_hash: str = "", with_raw: bool = False) -> AlignedStore:
    """Stage 2: encode every tier member and index its normalized hidden features."""
    members = tier_members(corpus, tier, seed)
    rows = np.array(sorted(corpus.index[s] for s in members), dtype=np.int64)
    ids = [corpus.ids[i] for i in rows]
    for m in MODALITIES:
        missing = rows[~corpus.present[m][rows]]
        if missing.size:
            raise StoreError(f"sample {corpus.ids[missing[0]]!r} has no {m} embedding")
    stores = {}
    raw = {} if with_raw else None
    for m in MODALITIES:
        h = encode_hidden(ckpt, corpus, rows, m)
        stores[m] = ModalityStore(m, ids, _normalize_rows(h, ids, f"{m} hidden feature"))
        if with_raw:
            x = corpus.embeddings[m][rows].astype(np.float64)
            raw[m] = ModalityStore(m, ids, _normalize_rows(x, ids, f"{m} raw embedding"))
    meta = {"tier": ScaleTier(tier).value, "seed": seed, "checkpoint": ckpt_hash,
            "count": len(ids)}
    return AlignedStore(stores, meta, raw)


def cross_lookup(aligned: AlignedStore, ids: Sequence[str], target_modality: str) -> list[np.ndarray]:
    """Stored vectors of ``target_modality`` for ``ids``, in order."""
    store = aligned[check_modality(target_modality)]
    return [store.vectors[r].astype(np.float64) for r in store.rows(ids)]


# --- persistence ------------------------------------------------------------

def _store_files(aligned: AlignedStore) -> dict[str, bytes]:
    files = {f"{m}.rfv": encode_rfv(m, aligned.ids, aligned[m].vectors) for m in MODALITIES}
    if aligned.raw is not None:
        for m in MODALITIES:
            files[f"raw_{m}.rfv"] = encode_rfv(m, aligned.ids, aligned.raw[m].vectors)
    return files


def store_digest(aligned: AlignedStore) -> str:
    h = hashlib.sha256()
    for name, blob in sorted(_store_files(aligned).items()):
        h.update(name.encode())
        h.update(hashlib.sha256(blob).digest())
    h.update(json.dumps(aligned.meta, sort_keys=True).encode())
    return h.hexdigest()[:16]


def save_store(path, aligned: AlignedStore) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    files = _store_files(aligned)
    for name, blob in files.items():
        (d / name).write_bytes(blob)
    manifest = {"version": STORE_VERSION, "meta": aligned.meta, "ids": aligned.ids,
                "files": {n: hashlib.sha256(b).hexdigest() for n, b in sorted(files.items())}}
    (d / "store.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def load_store(path) -> AlignedStore:
    d = Path(path)
    try:
        manifest = json.loads((d / "store.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise StoreError(f"{d}: unreadable store manifest: {exc}") from None
    if manifest.get("version") != STORE_VERSION:
        raise StoreError(f"{d}: unsupported store version {manifest.get('version')}")
    ids = manifest["ids"]

    def read(name: str, m: str) -> ModalityStore:
        mod, fids, vecs = read_rfv(d / name)
        if mod != m:
            raise FormatError(d / name, 10, f"holds {mod} features, expected {m}")
        if fids != ids:
            raise StoreError(f"{d / name}: ids do not match the store manifest")
        return ModalityStore(m, fids, vecs)

    stores = {m: read(f"{m}.rfv", m) for m in MODALITIES}
    raw = None
    if all(f"raw_{m}.rfv" in manifest.get("files", {}) for m in MODALITIES):
        raw = {m: read(f"raw_{m}.rfv", m) for m in MODALITIES}
    return AlignedStore(stores, manifest.get("meta", {}), raw)
