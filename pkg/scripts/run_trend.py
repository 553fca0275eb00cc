"""Compare retrieval systems against the no-retrieval baseline on synthetic data.

Each system is ``none`` (no retrieval) or ``<tier>:<k>``. Per seed the corpus,
split and stage-1 checkpoint are shared by all systems; test WA is printed per
condition together with the mean gain over the first system.

    python scripts/run_trend.py --systems none,small:10,turbo:1 --seeds 0,1,2
"""
import argparse
import time

import numpy as np

from ramer.dataset import SyntheticConfig, generate_synthetic, split_corpus
from ramer.encoder import TrainConfig, pretrain_full_modality
from ramer.pipeline import (CompletionConfig, RetrievalContext, parse_condition, predict_rows,
                            train_missing)
from ramer.vecstore import build_store


def parse_system(text: str) -> tuple[str, str | None, CompletionConfig]:
    if text == "none":
        return text, None, CompletionConfig(retrieval=False)
    tier, k = text.split(":")
    return text, tier, CompletionConfig(k=int(k))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--systems", default="none,small:10")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--conditions", default="a,v,l")
    ap.add_argument("--noise", type=float, default=1.0)
    ap.add_argument("--rho", type=float, default=0.8)
    ap.add_argument("--n-labeled", type=int, default=3000)
    ap.add_argument("--n-unlabeled", type=int, default=12000)
    ap.add_argument("--epochs", type=int, default=40)
    args = ap.parse_args()

    systems = [parse_system(s) for s in args.systems.split(",")]
    conds = args.conditions.split(",")
    wa = {name: [] for name, _, _ in systems}
    t0 = time.perf_counter()
    for seed in (int(s) for s in args.seeds.split(",")):
        syn = SyntheticConfig(n_labeled=args.n_labeled, n_unlabeled=args.n_unlabeled,
                              cross_modal_correlation=args.rho, noise_sigma=args.noise, seed=seed)
        corpus = split_corpus(generate_synthetic(syn), seed)
        tc = TrainConfig(epochs=args.epochs, seed=seed)
        ckpt = pretrain_full_modality(corpus, tc)
        stores = {}
        te = corpus.split_rows("test")
        for name, tier, cc in systems:
            if tier is not None and tier not in stores:
                stores[tier] = build_store(corpus, ckpt, tier, seed)
            store = stores.get(tier)
            row = []
            for code in conds:
                model = train_missing(corpus, parse_condition(code), store, ckpt, cc, tc)
                pred, _ = predict_rows(model, RetrievalContext.for_split(corpus, store), te)
                row.append(100.0 * float(np.mean(pred == corpus.labels[te])))
            wa[name].append(row)
            print(f"seed {seed} {name:>10}: " + "  ".join(f"{c}={w:.2f}" for c, w in
                                                         zip(conds, row)), flush=True)
    base = np.array(wa[systems[0][0]])
    print(f"\n{'system':>10}  " + "  ".join(f"{c:>6}" for c in conds) + "    mean    gain")
    for name, _, _ in systems:
        a = np.array(wa[name])
        print(f"{name:>10}  " + "  ".join(f"{m:6.2f}" for m in a.mean(axis=0))
              + f"  {a.mean():6.2f}  {a.mean() - base.mean():+6.2f}")
    print(f"\n{time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
