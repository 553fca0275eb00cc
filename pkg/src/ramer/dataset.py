"""Corpus model, synthetic generation, splits, scale tiers and feature ingestion.

Embeddings are kept column-wise: one float32 ``(n, dim)`` array per modality
plus a presence mask, so a 15k-sample corpus with 1024/768/5120-d inputs fits
in a few hundred MB.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .modality import DEFAULT_DIMS, MODALITIES, N_CLASSES, check_modality
from .rfv import FormatError, read_rfv, write_rfv

TABLE1_COUNTS = (1038, 1208, 730, 1248, 616, 190)
DEFAULT_PRIORS = tuple(c / sum(TABLE1_COUNTS) for c in TABLE1_COUNTS)
LATENT_DIM = 32
SPLITS = ("train", "val", "test", "unlabeled")
SPLIT_RATIOS = (0.8, 0.1, 0.1)
UNLABELED = -1


class EmotionLabel(enum.IntEnum):
    HAPPY = 0
    ANGRY = 1
    SAD = 2
    NEUTRAL = 3
    WORRIED = 4
    SURPRISE = 5

    @property
    def display(self) -> str:
        return self.name.title()

    @classmethod
    def parse(cls, text: str) -> "EmotionLabel":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown emotion label {text!r}") from None


class ScaleTier(str, enum.Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"
    TURBO = "turbo"


class ManifestError(ValueError):
    def __init__(self, path, line: int, msg: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {msg}")


@dataclass(frozen=True)
class Sample:
    id: str
    label: EmotionLabel | None
    embeddings: dict[str, np.ndarray]
    split: str | None = None


class Corpus:
    """Immutable collection of samples sharing per-modality dimensions.

    ``labels`` holds class codes with ``-1`` for unlabeled samples; ``split``
    holds one of ``train/val/test/unlabeled`` or ``""`` when unassigned.
    """

    def __init__(self, ids: list[str], labels, dims: dict[str, int],
                 embeddings: dict[str, np.ndarray] | None = None,
                 present: dict[str, np.ndarray] | None = None, split=None):
        n = len(ids)
        self.ids = list(ids)
        self.index = {sid: i for i, sid in enumerate(self.ids)}
        if len(self.index) != n:
            raise ValueError("duplicate sample ids in corpus")
        if any(not sid for sid in self.ids):
            raise ValueError("sample ids must be non-empty")
        self.labels = np.asarray(labels, dtype=np.int64).reshape(n)
        if np.any((self.labels < UNLABELED) | (self.labels >= N_CLASSES)):
            raise ValueError("label codes must be in -1..5")
        self.dims = {m: int(dims[m]) for m in MODALITIES}
        self.embeddings: dict[str, np.ndarray] = {}
        self.present: dict[str, np.ndarray] = {}
        for m in MODALITIES:
            emb = None if embeddings is None else embeddings.get(m)
            if emb is None:
                emb = np.zeros((n, self.dims[m]), dtype=np.float32)
                mask = np.zeros(n, dtype=bool)
            else:
                emb = np.asarray(emb, dtype=np.float32)
                if emb.shape != (n, self.dims[m]):
                    raise ValueError(f"{m} embeddings have shape {emb.shape}, "
                                     f"expected {(n, self.dims[m])}")
                mask = np.ones(n, dtype=bool) if present is None or m not in present \
                    else np.asarray(present[m], dtype=bool)
            emb.flags.writeable = False
            self.embeddings[m] = emb
            self.present[m] = mask
        if split is None:
            split = np.where(self.labels == UNLABELED, "unlabeled", "")
        self.split = np.asarray(split, dtype="<U9").reshape(n)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[Sample]:
        return (self.sample(i) for i in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (self.ids == other.ids and self.dims == other.dims
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.split, other.split)
                and all(np.array_equal(self.present[m], other.present[m])
                        and np.array_equal(self.embeddings[m], other.embeddings[m])
                        for m in MODALITIES))

    def sample(self, i: int) -> Sample:
        lab = int(self.labels[i])
        embs = {m: self.embeddings[m][i] for m in MODALITIES if self.present[m][i]}
        return Sample(self.ids[i], None if lab == UNLABELED else EmotionLabel(lab),
                      embs, self.split[i] or None)

    def rows(self, ids: Iterable[str]) -> np.ndarray:
        try:
            return np.fromiter((self.index[s] for s in ids), dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"unknown sample id {exc.args[0]!r}") from None

    def split_rows(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.split == name)

    def split_ids(self, name: str) -> list[str]:
        return [self.ids[i] for i in self.split_rows(name)]

    @property
    def labeled_rows(self) -> np.ndarray:
        return np.flatnonzero(self.labels != UNLABELED)

    def with_split(self, split) -> "Corpus":
        return Corpus(self.ids, self.labels, self.dims, self.embeddings, self.present, split)

    def with_embeddings(self, modality: str, emb: np.ndarray, mask: np.ndarray) -> "Corpus":
        embs = dict(self.embeddings)
        pres = dict(self.present)
        embs[modality] = emb
        pres[modality] = mask
        dims = dict(self.dims)
        dims[modality] = emb.shape[1]
        return Corpus(self.ids, self.labels, dims, embs, pres, self.split)

    def histogram(self, rows=None) -> np.ndarray:
        labs = self.labels if rows is None else self.labels[rows]
        labs = labs[labs != UNLABELED]
        return np.bincount(labs, minlength=N_CLASSES)


# --- synthetic generation ---------------------------------------------------

@dataclass
class SyntheticConfig:
    n_labeled: int = 3000
    n_unlabeled: int = 12000
    class_priors: tuple[float, ...] = DEFAULT_PRIORS
    dims: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_DIMS))
    cluster_separation: float = 3.0
    cross_modal_correlation: float = 0.8
    noise_sigma: float = 1.0
    label_noise_rate: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        pri = np.asarray(self.class_priors, dtype=np.float64)
        if pri.shape != (N_CLASSES,) or np.any(pri < 0):
            raise ValueError("class_priors must be 6 non-negative probabilities")
        if abs(pri.sum() - 1.0) > 1e-9:
            raise ValueError(f"class_priors sum to {pri.sum():.12f}, expected 1")
        if not 0.0 <= self.cross_modal_correlation <= 1.0:
            raise ValueError("cross_modal_correlation must lie in [0, 1]")
        if self.n_labeled < 0 or self.n_unlabeled < 0:
            raise ValueError("sample counts must be non-negative")
        if self.noise_sigma < 0 or self.cluster_separation < 0:
            raise ValueError("noise_sigma and cluster_separation must be non-negative")
        if not 0.0 <= self.label_noise_rate <= 1.0:
            raise ValueError("label_noise_rate must lie in [0, 1]")
        if set(self.dims) != set(MODALITIES) or any(int(d) <= 0 for d in self.dims.values()):
            raise ValueError(f"dims must give a positive size for each of {MODALITIES}")


def _projection(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Random (latent_dim, dim) map with orthonormal rows (when dim >= latent)."""
    g = rng.standard_normal((max(dim, LATENT_DIM), LATENT_DIM))
    q, r = np.linalg.qr(g)
    q *= np.sign(np.diag(r))
    return q[:dim].T.copy()


def generate_synthetic(cfg: SyntheticConfig, chunk: int = 2048) -> Corpus:
    """Correlated Gaussian-mixture corpus.

    Each class owns an anchor of norm ``cluster_separation`` in a 32-d latent
    space. A sample draws a shared latent ``u = anchor + N(0, I)`` and, per
    modality, a private latent of the same class; the modality sees
    ``rho * u + (1 - rho) * private`` pushed through a seeded orthonormal
    projection, plus isotropic noise of scale ``noise_sigma``.
    """
    cfg.validate()
    ss = np.random.SeedSequence(cfg.seed)
    s_anchor, s_proj, s_label, s_latent, s_noise = ss.spawn(5)

    anchors = np.random.default_rng(s_anchor).standard_normal((N_CLASSES, LATENT_DIM))
    anchors *= cfg.cluster_separation / np.linalg.norm(anchors, axis=1, keepdims=True)
    prng = np.random.default_rng(s_proj)
    proj = {m: _projection(prng, cfg.dims[m]) for m in MODALITIES}

    n = cfg.n_labeled + cfg.n_unlabeled
    lrng = np.random.default_rng(s_label)
    truth = lrng.choice(N_CLASSES, size=n, p=np.asarray(cfg.class_priors, dtype=np.float64))
    labels = truth.copy()
    if cfg.label_noise_rate > 0 and cfg.n_labeled:
        flip = lrng.random(cfg.n_labeled) < cfg.label_noise_rate
        shift = lrng.integers(1, N_CLASSES, size=cfg.n_labeled)
        labels[:cfg.n_labeled] = np.where(flip, (truth[:cfg.n_labeled] + shift) % N_CLASSES,
                                          truth[:cfg.n_labeled])
    labels[cfg.n_labeled:] = UNLABELED

    rho = cfg.cross_modal_correlation
    latent_rng = np.random.default_rng(s_latent)
    shared = anchors[truth] + latent_rng.standard_normal((n, LATENT_DIM))
    embs = {}
    for m, s in zip(MODALITIES, s_noise.spawn(len(MODALITIES))):
        rng = np.random.default_rng(s)
        out = np.empty((n, cfg.dims[m]), dtype=np.float32)
        for lo in range(0, n, chunk):
            hi = min(n, lo + chunk)
            private = anchors[truth[lo:hi]] + rng.standard_normal((hi - lo, LATENT_DIM))
            w = rho * shared[lo:hi] + (1.0 - rho) * private
            noise = rng.standard_normal((hi - lo, cfg.dims[m]))
            out[lo:hi] = w @ proj[m] + cfg.noise_sigma * noise
        embs[m] = out

    ids = [f"lab_{i:06d}" for i in range(cfg.n_labeled)]
    ids += [f"unl_{i:06d}" for i in range(cfg.n_unlabeled)]
    return Corpus(ids, labels, cfg.dims, embs)


# --- splits -----------------------------------------------------------------

def _apportion(n: int, ratios=SPLIT_RATIOS) -> list[int]:
    """Largest-remainder apportionment of ``n`` items over ``ratios``."""
    exact = [n * r for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    return counts


def _class_rows(corpus: Corpus, rows: np.ndarray) -> dict[int, np.ndarray]:
    out = {}
    for c in range(N_CLASSES):
        sel = rows[corpus.labels[rows] == c]
        if sel.size:
            out[c] = sel
    return out


def split_corpus(corpus: Corpus, seed: int) -> Corpus:
    """Stratified 8:1:1 train/val/test assignment of the labeled samples."""
    lab = corpus.labeled_rows
    if lab.size == 0:
        raise ValueError("corpus has no labeled samples to split")
    rng = np.random.default_rng(seed)
    split = np.where(corpus.labels == UNLABELED, "unlabeled", "").astype("<U9")
    for c, rows in _class_rows(corpus, lab).items():
        if rows.size < 3:
            raise ValueError(f"class {EmotionLabel(c).display} has {rows.size} labeled "
                             f"samples; at least 3 are needed to stratify")
        rows = rng.permutation(rows)
        n_tr, n_va, _ = _apportion(rows.size)
        split[rows[:n_tr]] = "train"
        split[rows[n_tr:n_tr + n_va]] = "val"
        split[rows[n_tr + n_va:]] = "test"
    return corpus.with_split(split)


def stratified_folds(corpus: Corpus, n_folds: int, seed: int) -> np.ndarray:
    """Fold index per labeled row (``-1`` for unlabeled), stratified by class."""
    lab = corpus.labeled_rows
    if lab.size == 0:
        raise ValueError("corpus has no labeled samples")
    fold = np.full(len(corpus), -1, dtype=np.int64)
    rng = np.random.default_rng(seed)
    offset = 0
    for c, rows in _class_rows(corpus, lab).items():
        if rows.size < n_folds:
            raise ValueError(f"class {EmotionLabel(c).display} has {rows.size} samples, "
                             f"fewer than {n_folds} folds")
        rows = rng.permutation(rows)
        # rotate the starting fold per class so remainders spread evenly
        fold[rows] = (np.arange(rows.size) + offset) % n_folds
        offset += rows.size
    return fold


def fold_split(corpus: Corpus, folds: np.ndarray, k: int, seed: int) -> Corpus:
    """Hold out fold ``k`` as val/test halves (stratified); the rest trains.

    With five folds this reproduces the 8:1:1 ratio on every run.
    """
    split = np.where(corpus.labels == UNLABELED, "unlabeled", "train").astype("<U9")
    held = np.flatnonzero(folds == k)
    if held.size == 0:
        raise ValueError(f"fold {k} is empty")
    rng = np.random.default_rng(seed)
    for rows in _class_rows(corpus, held).values():
        rows = rng.permutation(rows)
        n_val = rows.size // 2 + (rows.size % 2) * int(rng.integers(0, 2))
        split[rows[:n_val]] = "val"
        split[rows[n_val:]] = "test"
    return corpus.with_split(split)


def tier_members(corpus: Corpus, tier: ScaleTier | str, seed: int) -> frozenset[str]:
    tier = ScaleTier(tier)
    labeled = corpus.labeled_rows
    unlabeled = np.flatnonzero(corpus.labels == UNLABELED)
    if tier is ScaleTier.SMALL:
        rows = labeled
    elif tier is ScaleTier.MEDIUM:
        rng = np.random.default_rng(seed)
        rows = np.sort(rng.choice(unlabeled, size=unlabeled.size // 2, replace=False))
    elif tier is ScaleTier.LARGE:
        rows = unlabeled
    else:
        rows = np.arange(len(corpus))
    return frozenset(corpus.ids[i] for i in rows)


# --- manifest + feature files -----------------------------------------------

def load_manifest(path, dims: dict[str, int] | None = None) -> Corpus:
    """Read a JSON-lines manifest into a corpus without embeddings."""
    ids: list[str] = []
    labels: list[int] = []
    splits: list[str] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(path, lineno, f"invalid JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise ManifestError(path, lineno, "record must be an object")
            sid = rec.get("id")
            if not isinstance(sid, str) or not sid:
                raise ManifestError(path, lineno, "missing or empty id")
            if sid in seen:
                raise ManifestError(path, lineno, f"duplicate id {sid!r}")
            seen.add(sid)
            lab = rec.get("label")
            try:
                code = UNLABELED if lab is None else int(EmotionLabel.parse(str(lab)))
            except ValueError as exc:
                raise ManifestError(path, lineno, str(exc)) from None
            sp = rec.get("split") or ""
            if sp and sp not in SPLITS:
                raise ManifestError(path, lineno, f"unknown split {sp!r}")
            if sp == "unlabeled" and code != UNLABELED:
                raise ManifestError(path, lineno, "labeled sample assigned to 'unlabeled'")
            if code == UNLABELED and sp in ("train", "val", "test"):
                raise ManifestError(path, lineno, f"unlabeled sample assigned to {sp!r}")
            ids.append(sid)
            labels.append(code)
            splits.append(sp or ("unlabeled" if code == UNLABELED else ""))
    return Corpus(ids, labels, dims or DEFAULT_DIMS, split=splits)


def load_features(corpus: Corpus, path, modality: str, expected_dim: int | None = None) -> Corpus:
    """Fill one modality's embeddings from an RFV1 file keyed by sample id."""
    check_modality(modality)
    file_mod, ids, vecs = read_rfv(path)
    if file_mod != modality:
        raise FormatError(path, 10, f"file holds {file_mod} features, expected {modality}")
    dim = vecs.shape[1]
    if expected_dim is not None and dim != expected_dim:
        raise FormatError(path, 11, f"{modality} dim {dim} != expected {expected_dim}")
    emb = np.zeros((len(corpus), dim), dtype=np.float32)
    mask = np.zeros(len(corpus), dtype=bool)
    for i, sid in enumerate(ids):
        row = corpus.index.get(sid)
        if row is None:
            raise FormatError(path, i, f"record {i}: id {sid!r} not in manifest")
        if mask[row]:
            raise FormatError(path, i, f"record {i}: duplicate id {sid!r}")
        emb[row] = vecs[i]
        mask[row] = True
    if not np.all(np.isfinite(emb)):
        raise FormatError(path, 0, "non-finite values in feature file")
    return corpus.with_embeddings(modality, emb, mask)


def write_manifest(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, sid in enumerate(corpus.ids):
            rec: dict[str, str] = {"id": sid}
            if corpus.labels[i] != UNLABELED:
                rec["label"] = EmotionLabel(int(corpus.labels[i])).display
            if corpus.split[i]:
                rec["split"] = str(corpus.split[i])
            fh.write(json.dumps(rec) + "\n")


def save_corpus(corpus: Corpus, directory) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"manifest": d / "manifest.jsonl"}
    write_manifest(corpus, paths["manifest"])
    for m in MODALITIES:
        rows = np.flatnonzero(corpus.present[m])
        paths[m] = d / f"{m}.rfv"
        write_rfv(paths[m], m, [corpus.ids[i] for i in rows], corpus.embeddings[m][rows])
    return paths


def load_corpus(directory, dims: dict[str, int] | None = None) -> Corpus:
    d = Path(directory)
    corpus = load_manifest(d / "manifest.jsonl", dims)
    for m in MODALITIES:
        p = d / f"{m}.rfv"
        if p.exists():
            corpus = load_features(corpus, p, m, None if dims is None else dims[m])
    return corpus
