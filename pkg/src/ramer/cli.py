"""Command-line front end: ``ramer <subcommand> --config run.json [flags]``.

Artifacts live under the configured output directory::

    data/               manifest.jsonl, {audio,video,text}.rfv, data.json
    checkpoint.bin      stage-1 encoders
    stores/<tier>/      stage-2 aligned store
    models/<cond>.bin   stage-3 models
    reports/            eval / ablation tables (markdown + csv)
    runs/<cmd>/         one JSON log per CV run
    exports/            hidden-feature CSV samples

Every artifact records a hash of the configuration that produced it together
with the hashes of its inputs; a downstream command refuses to run on an
artifact whose recorded hash differs from what the current config implies.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import (Corpus, EmotionLabel, ManifestError, ScaleTier, SyntheticConfig,
                      generate_synthetic, load_corpus, load_features, load_manifest,
                      save_corpus, split_corpus)
from .encoder import (TrainConfig, checkpoint_digest, config_hash, load_checkpoint,
                      pretrain_full_modality, save_checkpoint)
from .evaluation import (EvalConfig, Metrics, SystemSpec, default_ablation_specs, emit_report,
                         eval_config_hash, evaluate, export_hidden_csv, merge_csv_reports)
from .modality import DEFAULT_DIMS, MODALITIES
from .pipeline import (GRID_CODES, CompletionConfig, RetrievalAudit, RetrievalContext,
                       load_stage3, parse_condition, predict_rows, save_stage3, train_missing)
from .rfv import FormatError
from .vecstore import StoreError, build_store, load_store, save_store, store_digest

log = logging.getLogger("ramer")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_RUNTIME = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class ArtifactError(RuntimeError):
    """Missing, stale or mismatched artifact."""


# --- configuration ----------------------------------------------------------

@dataclass
class DatasetSection:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    manifest: str | None = None  # when set, real features are read instead
    features: dict[str, str] = field(default_factory=dict)
    dims: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_DIMS))


@dataclass
class EvalSection:
    protocol: str = "cv"
    folds: int = 5
    repeats: int = 3
    jobs: int = 1
    full_grid: bool = False


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    completion: CompletionConfig = field(default_factory=CompletionConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    tier: str = ScaleTier.SMALL.value
    conditions: list[str] = field(default_factory=lambda: list(GRID_CODES))
    output_dir: str = "runs/default"
    seed: int = 0

    def validate(self) -> None:
        try:
            self.dataset.synthetic.validate()
            self.train.validate()
            self.completion.validate()
            ScaleTier(self.tier)
            if not self.conditions:
                raise ValueError("conditions list is empty")
            for c in self.conditions:
                parse_condition(c)
            self.eval_config().validate()
            if self.dataset.manifest is not None:
                if set(self.dataset.features) != set(MODALITIES):
                    raise ValueError(f"dataset.features needs a path for each of {MODALITIES}")
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def eval_config(self) -> EvalConfig:
        e = self.eval
        return EvalConfig(e.protocol, e.folds, e.repeats, self.seed, self.train,
                          tuple(self.conditions), e.jobs)

    # hash chain: data -> checkpoint -> store -> stage-3 model
    def data_hash(self) -> str:
        return config_hash({"dataset": asdict(self.dataset), "seed": self.seed})

    def checkpoint_hash(self) -> str:
        return config_hash({"data": self.data_hash(), "train": asdict(self.train)})

    def store_hash(self, tier: str | None = None) -> str:
        return config_hash({"checkpoint": self.checkpoint_hash(), "tier": tier or self.tier,
                            "raw": self.completion.db_source == "raw"})

    def model_hash(self, condition: str) -> str:
        up = self.store_hash() if self.completion.retrieval else self.checkpoint_hash()
        return config_hash({"upstream": up, "completion": asdict(self.completion),
                            "condition": condition})


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kw = {}
    for k, v in data.items():
        sub = {"synthetic": SyntheticConfig, "dataset": DatasetSection, "train": TrainConfig,
               "completion": CompletionConfig, "eval": EvalSection}.get(k)
        if sub is not None and dataclasses.is_dataclass(sub):
            kw[k] = _build(sub, v, f"{where}.{k}")
        elif k == "class_priors":
            kw[k] = tuple(v)
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return _build(RunConfig, data, "config")


def apply_flags(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.tier is not None:
        cfg.tier = args.tier
    if args.condition is not None:
        cfg.conditions = [c.strip() for c in args.condition.split(",") if c.strip()]
    comp = cfg.completion
    for flag, name in (("k", "k"), ("metric", "metric"), ("db_source", "db_source"),
                       ("keep_miss", "keep_miss")):
        if getattr(args, flag) is not None:
            comp = replace(comp, **{name: getattr(args, flag)})
    if args.freeze_encoders:
        comp = replace(comp, freeze_encoders=True)
    cfg.completion = comp
    if args.jobs is not None:
        cfg.eval.jobs = args.jobs
    # one master seed drives data generation and training
    cfg.dataset.synthetic = replace(cfg.dataset.synthetic, seed=cfg.seed)
    cfg.train = replace(cfg.train, seed=cfg.seed)
    if cfg.dataset.manifest is None:
        cfg.dataset.dims = dict(cfg.dataset.synthetic.dims)
    return cfg


# --- artifact helpers -------------------------------------------------------

class Layout:
    def __init__(self, root):
        self.root = Path(root)

    data = property(lambda s: s.root / "data")
    checkpoint = property(lambda s: s.root / "checkpoint.bin")
    reports = property(lambda s: s.root / "reports")
    exports = property(lambda s: s.root / "exports")

    def store(self, tier: str) -> Path:
        return self.root / "stores" / tier

    def model(self, condition: str) -> Path:
        return self.root / "models" / f"{condition}.bin"

    def runs(self, cmd: str) -> Path:
        return self.root / "runs" / cmd


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _guard(path: Path, recorded: str | None, want: str, force: bool, what: str) -> bool:
    """True when the command should (re)build ``path``."""
    if not path.exists() or force:
        return True
    if recorded == want:
        print(f"{what} up to date: {path}")
        return False
    raise ArtifactError(f"{what} at {path} was built from config {recorded}, current config "
                        f"gives {want}; pass --force to overwrite")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return {}


def load_data(cfg: RunConfig, lay: Layout) -> Corpus:
    info = _read_json(lay.data / "data.json")
    if not info:
        raise ArtifactError(f"no dataset at {lay.data}; run gen-data first")
    if info.get("config_hash") != cfg.data_hash():
        raise ArtifactError(f"dataset hash mismatch: {lay.data} has {info.get('config_hash')}, "
                            f"config gives {cfg.data_hash()}")
    for name, digest in info.get("files", {}).items():
        p = lay.data / name
        if not p.exists() or _sha(p) != digest:
            raise ArtifactError(f"dataset file {p} is missing or modified")
    return load_corpus(lay.data, cfg.dataset.dims)


def load_ckpt(cfg: RunConfig, lay: Layout):
    if not lay.checkpoint.exists():
        raise ArtifactError(f"no checkpoint at {lay.checkpoint}; run pretrain first")
    ck = load_checkpoint(lay.checkpoint, cfg.dataset.dims)
    if ck.meta.get("config_hash") != cfg.checkpoint_hash():
        raise ArtifactError(f"checkpoint hash mismatch: {lay.checkpoint} has "
                            f"{ck.meta.get('config_hash')}, config gives {cfg.checkpoint_hash()}")
    return ck


def load_tier_store(cfg: RunConfig, lay: Layout, ck, tier: str | None = None):
    tier = tier or cfg.tier
    d = lay.store(tier)
    if not (d / "store.json").exists():
        raise ArtifactError(f"no {tier} store at {d}; run build-db first")
    st = load_store(d)
    if st.meta.get("config_hash") != cfg.store_hash(tier):
        raise ArtifactError(f"store hash mismatch: {d} has {st.meta.get('config_hash')}, "
                            f"config gives {cfg.store_hash(tier)}")
    if st.meta.get("checkpoint") != checkpoint_digest(ck):
        raise ArtifactError(f"store {d} was built from checkpoint {st.meta.get('checkpoint')}, "
                            f"current checkpoint is {checkpoint_digest(ck)}")
    return st


# --- commands ---------------------------------------------------------------

def _source_corpus(cfg: RunConfig) -> Corpus:
    ds = cfg.dataset
    if ds.manifest is None:
        return split_corpus(generate_synthetic(ds.synthetic), cfg.seed)
    corpus = load_manifest(ds.manifest, ds.dims)
    for m in MODALITIES:
        corpus = load_features(corpus, ds.features[m], m, ds.dims[m])
    return corpus


def cmd_gen_data(cfg: RunConfig, lay: Layout, force: bool) -> int:
    want = cfg.data_hash()
    if not _guard(lay.data, _read_json(lay.data / "data.json").get("config_hash"),
                  want, force, "dataset"):
        return EXIT_OK
    corpus = _source_corpus(cfg)
    paths = save_corpus(corpus, lay.data)
    info = {"config_hash": want, "count": len(corpus),
            "files": {p.name: _sha(p) for p in sorted(paths.values())}}
    (lay.data / "data.json").write_text(json.dumps(info, sort_keys=True, indent=1) + "\n")
    hist = corpus.histogram()
    print(f"wrote {len(corpus)} samples to {lay.data}")
    for lab, n in zip(EmotionLabel, hist):
        print(f"  {lab.display:<9} {int(n):6d}")
    print(f"  unlabeled {int(np.sum(corpus.labels < 0)):6d}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, lay: Layout, force: bool) -> int:
    corpus = load_data(cfg, lay)
    recorded = None
    if lay.checkpoint.exists():
        recorded = load_checkpoint(lay.checkpoint).meta.get("config_hash")
    if not _guard(lay.checkpoint, recorded, cfg.checkpoint_hash(), force, "checkpoint"):
        return EXIT_OK
    ck = pretrain_full_modality(corpus, cfg.train, log=log.info)
    ck.meta["config_hash"] = cfg.checkpoint_hash()
    ck.meta["upstream"] = {"data": cfg.data_hash()}
    save_checkpoint(lay.checkpoint, ck)
    print(f"checkpoint {lay.checkpoint}: best epoch {ck.meta['epoch']}, "
          f"val WA {ck.meta['val_wa']:.2f}")
    return EXIT_OK


def cmd_build_db(cfg: RunConfig, lay: Layout, force: bool) -> int:
    corpus = load_data(cfg, lay)
    ck = load_ckpt(cfg, lay)
    d = lay.store(cfg.tier)
    recorded = _read_json(d / "store.json").get("meta", {}).get("config_hash")
    if not _guard(d, recorded, cfg.store_hash(), force, "store"):
        return EXIT_OK
    st = build_store(corpus, ck, cfg.tier, cfg.seed, checkpoint_digest(ck),
                     with_raw=cfg.completion.db_source == "raw")
    st.meta["config_hash"] = cfg.store_hash()
    st.meta["upstream"] = {"checkpoint": cfg.checkpoint_hash()}
    save_store(d, st)
    print(f"store {d}: {len(st)} records, digest {store_digest(st)}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, lay: Layout, force: bool) -> int:
    corpus = load_data(cfg, lay)
    ck = load_ckpt(cfg, lay)
    st = load_tier_store(cfg, lay, ck) if cfg.completion.retrieval else None
    te = corpus.split_rows("test")
    for code in cfg.conditions:
        cond = parse_condition(code)
        path = lay.model(code)
        recorded = load_stage3(path).meta.get("config_hash") if path.exists() else None
        if not _guard(path, recorded, cfg.model_hash(code), force, f"model [{code}]"):
            continue
        audit = RetrievalAudit()
        model = train_missing(corpus, cond, st, ck, cfg.completion, cfg.train, audit, log.info)
        model.meta["config_hash"] = cfg.model_hash(code)
        model.meta["tier"] = cfg.tier if st is not None else None
        model.meta["upstream"] = {"checkpoint": checkpoint_digest(ck),
                                  "store": store_digest(st) if st is not None else None}
        path.parent.mkdir(parents=True, exist_ok=True)
        save_stage3(path, model)
        line = f"[{code}] model {path}: best epoch {model.meta['epoch']}"
        if te.size:
            pred, _ = predict_rows(model, RetrievalContext.for_split(corpus, st, audit), te)
            m = Metrics.from_predictions(pred, corpus.labels[te])
            line += f", test WA {m.wa:.2f} UA {m.ua:.2f}"
        if audit.leaks:
            raise AssertionError(f"retrieval leaked {audit.leaks} barred ids")
        print(line)
    return EXIT_OK


def _run_grid(cfg: RunConfig, lay: Layout, force: bool, name: str, systems) -> int:
    corpus = load_data(cfg, lay)
    ecfg = cfg.eval_config()
    want = config_hash({"data": cfg.data_hash(), "eval": eval_config_hash(ecfg, systems)})
    md, csv_path = lay.reports / f"{name}.md", lay.reports / f"{name}.csv"
    stamp = lay.runs(name) / "summary.json"
    if not _guard(csv_path, _read_json(stamp).get("config_hash"), want, force, f"{name} report"):
        return EXIT_OK
    grids, records = evaluate(corpus, systems, ecfg, lay.runs(name))
    lay.reports.mkdir(parents=True, exist_ok=True)
    emit_report(grids, "markdown", md)
    emit_report(grids, "csv", csv_path)
    leaks = sum(r.audit["leaks"] for r in records)
    summary = {"config_hash": want, "runs": len(records), "leaks": leaks,
               "degenerate": sum(r.audit["degenerate"] for r in records)}
    stamp.write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    print(md.read_text(), end="")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, lay: Layout, force: bool) -> int:
    return _run_grid(cfg, lay, force, "eval", [SystemSpec("RAMER", cfg.completion, cfg.tier)])


def cmd_ablate(cfg: RunConfig, lay: Layout, force: bool) -> int:
    specs = default_ablation_specs(cfg.completion, full=cfg.eval.full_grid)
    return _run_grid(cfg, lay, force, "ablation", specs)


def cmd_report(paths, out) -> int:
    for p in paths:
        if not Path(p).exists():
            raise ArtifactError(f"report {p} not found")
    text = merge_csv_reports(paths)
    if out:
        Path(out).write_text(text)
    else:
        print(text, end="")
    return EXIT_OK


def cmd_export_hidden(cfg: RunConfig, lay: Layout, force: bool, n: int) -> int:
    corpus = load_data(cfg, lay)
    ck = load_ckpt(cfg, lay)
    st = load_tier_store(cfg, lay, ck)
    path = lay.exports / f"hidden_{cfg.tier}.csv"
    if path.exists() and not force:
        raise ArtifactError(f"{path} exists; pass --force to overwrite")
    labels = {corpus.ids[i]: EmotionLabel(int(y)).display
              for i, y in enumerate(corpus.labels) if y >= 0}
    lay.exports.mkdir(parents=True, exist_ok=True)
    try:
        export_hidden_csv(st, n, cfg.seed, path, labels)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(f"wrote {n} records per modality to {path}")
    return EXIT_OK


# --- entry point ------------------------------------------------------------

COMMANDS = ("gen-data", "pretrain", "build-db", "train", "eval", "ablate", "report",
            "export-hidden")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ramer", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("paths", nargs="*", help="CSV reports to merge (report only)")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--output-dir", help="override the configured output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--tier", choices=[t.value for t in ScaleTier])
    p.add_argument("--condition", help="condition code(s), comma separated, e.g. a,vl")
    p.add_argument("--k", type=int)
    p.add_argument("--metric", choices=("cosine", "euclidean"))
    p.add_argument("--db-source", choices=("hidden", "raw"))
    p.add_argument("--freeze-encoders", action="store_true")
    p.add_argument("--keep-miss", choices=("replace", "avg"))
    p.add_argument("--jobs", type=int)
    p.add_argument("--force", action="store_true")
    p.add_argument("--n", type=int, default=1000, help="records per modality (export-hidden)")
    p.add_argument("--out", help="output file (report)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.paths, args.out)
        cfg = apply_flags(load_config(args.config), args)
        if args.output_dir:
            cfg.output_dir = args.output_dir
        cfg.validate()
        lay = Layout(cfg.output_dir)
        lay.root.mkdir(parents=True, exist_ok=True)
        cmd = args.command
        if cmd == "gen-data":
            return cmd_gen_data(cfg, lay, args.force)
        if cmd == "pretrain":
            return cmd_pretrain(cfg, lay, args.force)
        if cmd == "build-db":
            return cmd_build_db(cfg, lay, args.force)
        if cmd == "train":
            return cmd_train(cfg, lay, args.force)
        if cmd == "eval":
            return cmd_eval(cfg, lay, args.force)
        if cmd == "ablate":
            return cmd_ablate(cfg, lay, args.force)
        return cmd_export_hidden(cfg, lay, args.force, args.n)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactError, FormatError, StoreError, ManifestError, FileNotFoundError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
