"""WA/UA metrics, cross-validation over the missing-condition grid, ablations
and report files.

One *run* is one train/val/test partition: stage 1 is retrained on its train
split, stores are rebuilt from that checkpoint, and every (system, condition)
cell trains its own stage-3 model. Runs are keyed by ``(repeat, fold)`` and
merged in that order, so parallel execution does not change the output.
"""
from __future__ import annotations

import concurrent.futures as cf
import csv
import io
import json
import logging
import multiprocessing as mp
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Corpus, ScaleTier, fold_split, split_corpus, stratified_folds
from .encoder import TrainConfig, checkpoint_digest, config_hash, pretrain_full_modality
from .modality import MODALITIES, N_CLASSES
from .pipeline import (GRID_CODES, CompletionConfig, RetrievalAudit, RetrievalContext,
                       parse_condition, predict_rows, train_missing)
from .vecstore import AlignedStore, build_store, store_digest

log = logging.getLogger(__name__)


# --- metrics ----------------------------------------------------------------

def confusion(preds, truths, n_classes: int = N_CLASSES) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    p = np.asarray(preds, dtype=np.int64).ravel()
    t = np.asarray(truths, dtype=np.int64).ravel()
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} labels")
    if p.size and (p.min() < 0 or t.min() < 0 or p.max() >= n_classes or t.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def weighted_accuracy(cm) -> float:
    """Overall accuracy in percent: trace / total."""
    cm = np.asarray(cm)
    total = cm.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix")
    return 100.0 * float(np.trace(cm)) / float(total)


def unweighted_accuracy(cm) -> float:
    """Mean per-class recall in percent over classes with non-zero support."""
    cm = np.asarray(cm)
    support = cm.sum(axis=1)
    present = support > 0
    if not present.any():
        raise ValueError("no class has any support")
    recall = np.diag(cm)[present] / support[present]
    return 100.0 * float(recall.mean())


@dataclass(frozen=True)
class Metrics:
    wa: float
    ua: float

    @classmethod
    def from_predictions(cls, preds, truths) -> "Metrics":
        cm = confusion(preds, truths)
        return cls(weighted_accuracy(cm), unweighted_accuracy(cm))


@dataclass
class RunGrid:
    """Per-condition metrics of one system across all runs."""

    system: str
    results: dict[str, list[Metrics]] = field(default_factory=dict)

    def add(self, condition: str, m: Metrics) -> None:
        self.results.setdefault(condition, []).append(m)

    @property
    def conditions(self) -> list[str]:
        return [c for c in GRID_CODES if c in self.results]

    @property
    def runs(self) -> int:
        return max((len(v) for v in self.results.values()), default=0)

    def stats(self, condition: str) -> tuple[float, float, float, float]:
        """(WA mean, WA std, UA mean, UA std) for one condition."""
        ms = self.results[condition]
        wa = np.array([m.wa for m in ms])
        ua = np.array([m.ua for m in ms])
        return float(wa.mean()), float(wa.std()), float(ua.mean()), float(ua.std())

    def avg(self) -> tuple[float, float, float, float]:
        """Mean over the present conditions; std is over per-run averages."""
        conds = self.conditions
        if not conds:
            return (float("nan"),) * 4
        n = min(len(self.results[c]) for c in conds)
        wa = np.array([[self.results[c][i].wa for c in conds] for i in range(n)]).mean(axis=1)
        ua = np.array([[self.results[c][i].ua for c in conds] for i in range(n)]).mean(axis=1)
        wa_mean = float(np.mean([self.stats(c)[0] for c in conds]))
        ua_mean = float(np.mean([self.stats(c)[2] for c in conds]))
        return wa_mean, float(wa.std()), ua_mean, float(ua.std())


# --- experiment protocol ----------------------------------------------------

@dataclass
class SystemSpec:
    """One row of a result table: a named retrieval configuration."""

    name: str
    completion: CompletionConfig = field(default_factory=CompletionConfig)
    tier: str = ScaleTier.SMALL.value


@dataclass
class EvalConfig:
    protocol: str = "cv"  # "cv": folds x repeats; "holdout": one 8:1:1 split per repeat
    folds: int = 5
    repeats: int = 3
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    conditions: tuple[str, ...] = GRID_CODES
    jobs: int = 1

    def validate(self) -> None:
        if self.protocol not in ("cv", "holdout"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "cv" and self.folds < 2:
            raise ValueError("cross-validation needs at least 2 folds")
        if self.seed < 0:
            raise ValueError("master seed must be non-negative")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        for c in self.conditions:
            parse_condition(c)
        self.train.validate()


# seed streams per run: training, partitioning, fold assignment
TRAIN_STREAM, SPLIT_STREAM, FOLD_STREAM = 0, 1, 2


def run_seed(master: int, repeat: int, fold: int, stream: int = TRAIN_STREAM) -> int:
    return int(np.random.SeedSequence([master, repeat, fold, stream]).generate_state(1)[0])


def run_plan(corpus: Corpus, cfg: EvalConfig) -> list[tuple[int, int, np.ndarray]]:
    """``(repeat, fold, split array)`` for every run, in merge order."""
    plan = []
    for r in range(cfg.repeats):
        if cfg.protocol == "holdout":
            seed = run_seed(cfg.seed, r, 0, SPLIT_STREAM)
            plan.append((r, 0, split_corpus(corpus, seed).split))
            continue
        folds = stratified_folds(corpus, cfg.folds, run_seed(cfg.seed, r, 0, FOLD_STREAM))
        for k in range(cfg.folds):
            seed = run_seed(cfg.seed, r, k, SPLIT_STREAM)
            plan.append((r, k, fold_split(corpus, folds, k, seed).split))
    return plan


@dataclass
class RunRecord:
    repeat: int
    fold: int
    seed: int
    checkpoint: str
    stores: dict[str, str]
    metrics: dict[str, dict[str, dict[str, float]]]
    audit: dict[str, int]
    config_hash: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def _one_run(corpus: Corpus, repeat: int, fold: int, split: np.ndarray,
             systems: Sequence[SystemSpec], cfg: EvalConfig):
    run = corpus.with_split(split)
    seed = run_seed(cfg.seed, repeat, fold)
    tc = replace(cfg.train, seed=seed)
    ckpt = pretrain_full_modality(run, tc)
    ck_hash = checkpoint_digest(ckpt)
    stores: dict[str, AlignedStore] = {}
    for s in systems:
        if not s.completion.retrieval:
            continue
        key = s.tier
        need_raw = s.completion.db_source == "raw"
        if key not in stores or (need_raw and stores[key].raw is None):
            stores[key] = build_store(run, ckpt, s.tier, seed, ck_hash, with_raw=need_raw)
    te = run.split_rows("test")
    audit = RetrievalAudit()
    results: dict[str, dict[str, Metrics]] = {}
    for s in systems:
        store = stores.get(s.tier) if s.completion.retrieval else None
        for code in cfg.conditions:
            cond = parse_condition(code)
            model = train_missing(run, cond, store, ckpt, s.completion, tc, audit)
            ctx = RetrievalContext.for_split(run, store, audit)
            pred, _ = predict_rows(model, ctx, te)
            m = Metrics.from_predictions(pred, run.labels[te])
            results.setdefault(s.name, {})[code] = m
            log.info("run r%d f%d %s [%s] WA %.2f UA %.2f", repeat, fold, s.name, code, m.wa, m.ua)
    if audit.leaks:
        raise AssertionError(f"retrieval returned {audit.leaks} barred ids in run r{repeat} f{fold}")
    rec = RunRecord(repeat, fold, seed, ck_hash,
                    {t: store_digest(st) for t, st in sorted(stores.items())},
                    {n: {c: asdict(m) for c, m in r.items()} for n, r in results.items()},
                    asdict(audit), eval_config_hash(cfg, systems))
    return results, rec


def eval_config_hash(cfg: EvalConfig, systems: Sequence[SystemSpec]) -> str:
    # worker count does not change results, so it stays out of the hash
    return config_hash({"eval": asdict(replace(cfg, jobs=1)),
                        "systems": [asdict(s) for s in systems]})


_POOL_CORPUS: Corpus | None = None


def _pool_run(args):
    return _one_run(_POOL_CORPUS, *args)


def evaluate(corpus: Corpus, systems: Sequence[SystemSpec], cfg: EvalConfig,
             log_dir=None) -> tuple[list[RunGrid], list[RunRecord]]:
    """Run every system on every condition over the configured partitions."""
    global _POOL_CORPUS
    cfg.validate()
    for s in systems:
        s.completion.validate()
    plan = run_plan(corpus, cfg)
    tasks = [(r, f, split, list(systems), cfg) for r, f, split in plan]
    if cfg.jobs > 1 and len(tasks) > 1:
        _POOL_CORPUS = corpus
        ctx = mp.get_context("fork")
        with cf.ProcessPoolExecutor(max_workers=cfg.jobs, mp_context=ctx) as pool:
            outs = list(pool.map(_pool_run, tasks))
        _POOL_CORPUS = None
    else:
        outs = [_one_run(corpus, *t) for t in tasks]

    grids = [RunGrid(s.name) for s in systems]
    records = []
    for results, rec in outs:
        for g in grids:
            for code in cfg.conditions:
                g.add(code, results[g.system][code])
        records.append(rec)
        if log_dir is not None:
            d = Path(log_dir)
            d.mkdir(parents=True, exist_ok=True)
            (d / f"run_r{rec.repeat}_f{rec.fold}.json").write_text(rec.to_json() + "\n")
    return grids, records


def cross_validate(corpus: Corpus, condition: str | Sequence[str], cfg: EvalConfig,
                   completion: CompletionConfig | None = None, tier: str = "small",
                   name: str = "RAMER") -> RunGrid:
    conds = (condition,) if isinstance(condition, str) else tuple(condition)
    cfg = replace(cfg, conditions=conds)
    grids, _ = evaluate(corpus, [SystemSpec(name, completion or CompletionConfig(), tier)], cfg)
    return grids[0]


def default_ablation_specs(base: CompletionConfig | None = None, full: bool = False,
                           top1_tier: str = "turbo") -> list[SystemSpec]:
    """Ablation rows: the fixed variants followed by the tier x K grid.

    The desk-scale grid uses tiers {small, turbo} and K in {1, 5, 10}; ``full``
    switches to all four tiers with K in {5, 10, 15}.
    """
    base = base or CompletionConfig()
    specs = [
        SystemSpec("w/o retrieval", replace(base, retrieval=False), "small"),
        SystemSpec("Unimodal F_s", replace(base, db_source="raw"), "small"),
        SystemSpec("Euclidean", replace(base, metric="euclidean"), "small"),
        SystemSpec(f"{top1_tier}_top1", replace(base, k=1), top1_tier),
    ]
    tiers = [t.value for t in ScaleTier] if full else ["small", "turbo"]
    ks = (5, 10, 15) if full else (1, 5, 10)
    for t in tiers:
        for k in ks:
            name = f"{t}_top{k}"
            if not any(s.name == name for s in specs):
                specs.append(SystemSpec(name, replace(base, k=k), t))
    return specs


def run_ablations(corpus: Corpus, specs: Sequence[SystemSpec], cfg: EvalConfig,
                  log_dir=None) -> list[RunGrid]:
    grids, _ = evaluate(corpus, specs, cfg, log_dir)
    return grids


# --- reports ----------------------------------------------------------------

REPORT_CONDS = GRID_CODES + ("Avg",)


def _cells(grid: RunGrid, with_std: bool):
    out = []
    for c in REPORT_CONDS:
        if c == "Avg":
            vals = grid.avg() if grid.conditions else None
        else:
            vals = grid.stats(c) if c in grid.results else None
        out.append(vals)
    return out


def render_markdown(grids: Sequence[RunGrid]) -> str:
    head = ["System", "Runs"] + [f"{c} {m}" for c in REPORT_CONDS for m in ("WA", "UA")]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join(["---"] * len(head)) + "|"]
    for g in grids:
        row = [g.system, str(g.runs)]
        for vals in _cells(g, True):
            if vals is None:
                row += ["-", "-"]
            else:
                wa, was, ua, uas = vals
                row += [f"{wa:.2f} ± {was:.2f}", f"{ua:.2f} ± {uas:.2f}"]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def csv_header() -> list[str]:
    means = [f"{c}_{m}" for c in REPORT_CONDS for m in ("WA", "UA")]
    return ["system", "runs"] + means + [f"{h}_std" for h in means]


def render_csv(grids: Sequence[RunGrid]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header())
    for g in grids:
        means, stds = [], []
        for vals in _cells(g, True):
            if vals is None:
                means += ["", ""]
                stds += ["", ""]
            else:
                wa, was, ua, uas = vals
                means += [f"{wa:.2f}", f"{ua:.2f}"]
                stds += [f"{was:.2f}", f"{uas:.2f}"]
        w.writerow([g.system, g.runs] + means + stds)
    return buf.getvalue()


def emit_report(grids: Sequence[RunGrid], fmt: str, path) -> Path:
    if fmt == "markdown":
        text = render_markdown(grids)
    elif fmt == "csv":
        text = render_csv(grids)
    else:
        raise ValueError(f"format must be 'markdown' or 'csv', got {fmt!r}")
    p = Path(path)
    with open(p, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return p


def read_csv_report(path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def merge_csv_reports(paths: Sequence) -> str:
    """Markdown table from rows of several CSV reports (means and stds)."""
    head = ["System", "Runs"] + [f"{c} {m}" for c in REPORT_CONDS for m in ("WA", "UA")]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join(["---"] * len(head)) + "|"]
    for p in paths:
        for rec in read_csv_report(p):
            row = [rec["system"], rec["runs"]]
            for c in REPORT_CONDS:
                for m in ("WA", "UA"):
                    v = rec[f"{c}_{m}"]
                    row.append(f"{v} ± {rec[f'{c}_{m}_std']}" if v else "-")
            lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def export_hidden_csv(store: AlignedStore, n: int, seed: int, path,
                      labels: dict[str, str] | None = None) -> Path:
    """Seeded sample of ``n`` records per modality: modality, id, label, values."""
    if n < 0 or n > len(store):
        raise ValueError(f"n={n} outside 0..{len(store)}")
    labels = labels or {}
    rng = np.random.default_rng(seed)
    dim = store[MODALITIES[0]].dim
    p = Path(path)
    with open(p, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["modality", "id", "label"] + [f"h{j}" for j in range(dim)])
        for m in MODALITIES:
            rows = np.sort(rng.choice(len(store), size=n, replace=False))
            vecs = store[m].vectors
            for r in rows:
                sid = store.ids[r]
                w.writerow([m, sid, labels.get(sid, "")] + [repr(float(x)) for x in vecs[r]])
    return p
