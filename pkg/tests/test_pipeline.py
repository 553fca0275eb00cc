import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ramer.dataset import SyntheticConfig, generate_synthetic, split_corpus
from ramer.encoder import Checkpoint, TrainConfig, encoder_forward, init_encoder
from ramer.numerics import l2_normalize
from ramer.pipeline import (GRID_CODES, CompletionConfig, RetrievalAudit, RetrievalContext,
                            complete, fuse_topk, infer_available_hidden, load_stage3,
                            parse_condition, predict, predict_rows, retrieve_substitutes,
                            save_stage3, stage3_bytes, train_missing)
from ramer.vecstore import AlignedStore, ModalityStore, StoreError, build_store

from gradcheck import stage3_gradcheck

DIMS = {"audio": 8, "video": 6, "text": 10}


def test_conditions():
    assert [parse_condition(c).code for c in GRID_CODES] == list(GRID_CODES)
    c = parse_condition("la")
    assert c.available == ("audio", "text") and c.missing == ("video",) and c.code == "al"
    for bad in ("avl", "", "x", "aa"):
        with pytest.raises(ValueError):
            parse_condition(bad)
    assert parse_condition("avl", allow_full=True).missing == ()


@pytest.fixture(scope="module")
def toy():
    corpus = split_corpus(generate_synthetic(SyntheticConfig(
        n_labeled=240, n_unlabeled=60, dims=DIMS, class_priors=(0.5, 0.5, 0, 0, 0, 0),
        cluster_separation=12.0, noise_sigma=0.1, seed=4)), 4)
    rng = np.random.default_rng(4)
    ck = Checkpoint({m: init_encoder(d, rng) for m, d in DIMS.items()})
    return corpus, ck, build_store(corpus, ck, "turbo", 4, with_raw=True)


def test_infer_available_hidden(toy):
    corpus, ck, _ = toy
    s = corpus.sample(0)
    assert list(infer_available_hidden(s, parse_condition("a"), ck)) == ["audio"]
    h = infer_available_hidden(s, parse_condition("av"), ck)
    assert sorted(h) == ["audio", "video"]
    for m in h:
        np.testing.assert_array_equal(h[m], encoder_forward(s.embeddings[m], ck.encoders[m])[0])
    h2 = infer_available_hidden(s, parse_condition("av"), ck)
    assert all(np.array_equal(h[m], h2[m]) for m in h)


def test_retrieve_counts_and_self_exclusion(toy):
    corpus, ck, store = toy
    s = corpus.sample(3)
    cfg = CompletionConfig(k=10)
    for code, n in (("a", 10), ("av", 20)):
        cond = parse_condition(code)
        hid = infer_available_hidden(s, cond, ck)
        audit = RetrievalAudit()
        subs = retrieve_substitutes(hid, cond, store, cfg, {s.id}, audit=audit)
        assert sorted(subs) == sorted(cond.missing)
        assert all(len(v) == n for v in subs.values())
        assert audit.leaks == 0 and audit.hits == n
    # the sample's own stored vector is the nearest neighbour unless excluded
    q = store["audio"].vectors[3].astype(np.float64)
    own = store["video"].vectors[3].astype(np.float64)
    got = retrieve_substitutes({"audio": q}, parse_condition("a"), store,
                               CompletionConfig(k=1), {store.ids[3]})
    assert not np.array_equal(got["video"][0], own)


def test_separated_clusters_retrieve_own_class():
    rng = np.random.default_rng(0)
    dim, per = 16, 20
    vecs, ids, cls = [], [], []
    for c in range(4):
        base = np.eye(dim)[c]
        for j in range(per):
            vecs.append(base + 0.05 * rng.standard_normal(dim))
            ids.append(f"c{c}_{j:02d}")
            cls.append(c)
    vecs = np.array(vecs)
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    store = AlignedStore({m: ModalityStore(m, ids, vecs) for m in ("audio", "video", "text")})
    for c in range(4):
        q = np.eye(dim)[c] + 0.05 * rng.standard_normal(dim)
        subs = retrieve_substitutes({"audio": q}, parse_condition("a"), store, CompletionConfig(k=10))
        for v in subs["video"]:
            assert int(np.argmax(v)) == c


def test_fuse_examples(caplog):
    v = l2_normalize([1.0, 2.0, 3.0])
    assert np.array_equal(fuse_topk([v]), v)
    np.testing.assert_allclose(fuse_topk([v, v]), v, atol=1e-15)
    audit = RetrievalAudit()
    with caplog.at_level(logging.WARNING):
        out = fuse_topk([[1.0, 0, 0], [-1.0, 0, 0]], audit)
    assert np.array_equal(out, [1.0, 0, 0]) and audit.degenerate == 1
    assert "degenerate" in caplog.text
    with pytest.raises(ValueError):
        fuse_topk([])


unit_lists = st.integers(1, 15).flatmap(
    lambda k: arrays(np.float64, (k, 12), elements=st.floats(-1, 1)))


@given(unit_lists, st.randoms(use_true_random=False))
def test_fuse_properties(vs, rnd):
    norms = np.linalg.norm(vs, axis=1)
    if np.any(norms < 1e-3) or np.linalg.norm(vs.sum(axis=0)) < 1e-6:
        return
    vs = vs / norms[:, None]
    f = fuse_topk(vs)
    assert abs(np.linalg.norm(f) - 1) < 1e-6
    perm = list(range(len(vs)))
    rnd.shuffle(perm)
    np.testing.assert_allclose(fuse_topk(vs[perm]), f, atol=1e-12)
    assert np.array_equal(fuse_topk(vs[:1]), l2_normalize(vs[0]))


def test_complete_routing():
    h = {"audio": np.full(256, 1.0)}
    f = {"video": np.full(256, 2.0), "text": np.full(256, 3.0)}
    c = complete(h, f)
    assert c.shape == (768,)
    assert c[0] == 1 and c[256] == 2 and c[767] == 3
    full = complete({m: np.full(256, i) for i, m in enumerate(("audio", "video", "text"))}, {})
    assert full[300] == 1
    with pytest.raises(ValueError):
        complete(h, {"video": f["video"]})
    with pytest.raises(ValueError):
        complete(h, {**f, "audio": h["audio"]})


@given(st.floats(1e-2, 1e2))
def test_hidden_query_scale_invariance(alpha):
    rng = np.random.default_rng(1)
    v = rng.standard_normal((40, 8))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    ids = [f"s{i}" for i in range(40)]
    store = AlignedStore({m: ModalityStore(m, ids, v[np.roll(np.arange(40), j)])
                          for j, m in enumerate(("audio", "video", "text"))})
    h = {"audio": rng.standard_normal(8), "text": rng.standard_normal(8)}
    cond, cfg = parse_condition("al"), CompletionConfig(k=5)
    base = retrieve_substitutes(h, cond, store, cfg)
    scaled = retrieve_substitutes({m: alpha * x for m, x in h.items()}, cond, store, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(base["video"], scaled["video"]))


def test_stage3_gradients():
    assert max(stage3_gradcheck(2, condition="vl").values()) < 1e-4


def test_capacity_check(toy):
    corpus, _, store = toy
    with pytest.raises(StoreError):
        RetrievalContext(corpus, store, set(corpus.ids)).check_capacity(1)


TC = TrainConfig(epochs=6, batch_size=32, learning_rate=0.01, seed=2)


@pytest.fixture(scope="module")
def trained(toy):
    corpus, ck, store = toy
    audit = RetrievalAudit()
    model = train_missing(corpus, parse_condition("a"), store, ck, CompletionConfig(k=5), TC, audit)
    return model, audit


def test_train_with_retrieval_fits_separable_data(toy, trained):
    corpus, _, store = toy
    model, audit = trained
    assert audit.leaks == 0 and audit.queries > 0
    te = corpus.split_rows("test")
    pred, probs = predict_rows(model, RetrievalContext.for_split(corpus, store), te)
    assert np.all(pred == corpus.labels[te])
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-9)


def test_predict_single_matches_batch(toy, trained):
    corpus, _, store = toy
    model, _ = trained
    held = set(corpus.split_ids("val")) | set(corpus.split_ids("test"))
    ctx = RetrievalContext.for_split(corpus, store)
    for r in corpus.split_rows("test")[:5]:
        s = corpus.sample(int(r))
        lab, post = predict(s, model.condition, model, store, exclusions=held)
        lab2, post2 = predict(s, model.condition, model, store, exclusions=held)
        assert np.array_equal(post, post2) and lab == lab2
        assert abs(post.sum() - 1) < 1e-9 and int(lab) == corpus.labels[r]
        _, bp = predict_rows(model, ctx, np.array([r]))
        np.testing.assert_allclose(post, bp[0], atol=1e-12)


def test_without_retrieval_converges(toy):
    corpus, ck, _ = toy
    m = train_missing(corpus, parse_condition("v"), None, ck, CompletionConfig(retrieval=False), TC)
    te = corpus.split_rows("test")
    pred, _ = predict_rows(m, RetrievalContext.for_split(corpus, None), te)
    assert np.mean(pred == corpus.labels[te]) == 1.0


def test_training_deterministic_and_freeze(toy):
    corpus, ck, store = toy
    tc = TrainConfig(epochs=2, batch_size=64, seed=9)
    cfg = CompletionConfig(k=3, freeze_encoders=True)
    a = train_missing(corpus, parse_condition("av"), store, ck, cfg, tc)
    b = train_missing(corpus, parse_condition("av"), store, ck, cfg, tc)
    assert stage3_bytes(a) == stage3_bytes(b)
    for m in ("audio", "video"):
        assert a.encoders[m].equal(ck.encoders[m])
    c = train_missing(corpus, parse_condition("av"), store, ck, CompletionConfig(k=3), tc)
    assert not c.encoders["audio"].equal(ck.encoders["audio"])


@pytest.mark.parametrize("cfg", [CompletionConfig(k=2, keep_miss="avg"),
                                 CompletionConfig(k=2, db_source="raw"),
                                 CompletionConfig(k=2, metric="euclidean")])
def test_variants_run_and_persist(toy, cfg, tmp_path):
    corpus, ck, store = toy
    audit = RetrievalAudit()
    m = train_missing(corpus, parse_condition("l"), store, ck, cfg,
                      TrainConfig(epochs=1, batch_size=64), audit)
    assert audit.leaks == 0
    save_stage3(tmp_path / "m.bin", m)
    back = load_stage3(tmp_path / "m.bin")
    assert back.cfg == cfg and stage3_bytes(back) == stage3_bytes(m)
    rows = corpus.split_rows("test")
    ctx = RetrievalContext.for_split(corpus, store)
    assert np.array_equal(predict_rows(back, ctx, rows)[1], predict_rows(m, ctx, rows)[1])
