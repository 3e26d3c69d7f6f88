"""Smoke test for the longrank_py extension module.

Build and install first:

    pip install maturin
    maturin develop --release -m crates/python/Cargo.toml

then run `python python/smoke_test.py`.
"""

import math
import tempfile
from pathlib import Path

import longrank_py as lr


def main():
    assert lr.tokenize("Hello, World! 42") == ["hello", ",", "world", "!", "42"]

    assert lr.lr_at(0) == 0.0
    assert lr.lr_at(2500) == 3e-5
    assert lr.lr_at(150000) == 0.0
    try:
        lr.lr_at(150001)
    except ValueError:
        pass
    else:
        raise AssertionError("lr_at past the end should raise")

    assert lr.reciprocal_rank(["a", "b", "c"], {"c": 1}) == 1 / 3
    assert lr.mrr({"q1": ["a", "b"], "q2": ["x", "y"]}, [("q1", "a", 1), ("q2", "z", 1)]) == 0.5

    corpus = lr.synthetic(7)
    assert len(corpus.docs) == 200 and len(corpus.queries) == 40
    queries = dict(corpus.queries)

    index = lr.Index(corpus.docs)
    assert len(index) == 200 and index.avg_doc_length > 0
    hits = index.search(queries["Q000"], k=10)
    assert 0 < len(hits) <= 10
    assert all(a[1] >= b[1] for a, b in zip(hits, hits[1:]))

    with tempfile.TemporaryDirectory() as tmp:
        index.save(str(Path(tmp) / "index"))
        assert lr.Index.load(str(Path(tmp) / "index")).search(queries["Q000"], k=10) == hits

        candidates = {q: index.search(queries[q]) for q in corpus.train_queries}
        train_queries = [(q, queries[q]) for q in corpus.train_queries]
        model_config = {
            "hidden_dim": 16,
            "num_layers": 1,
            "num_heads": 2,
            "window": 8,
            "max_len": 40,
            "classifier_hidden_dim": 8,
            "vocab_size": 256,
        }
        train_config = {
            "batch_size": 2,
            "learning_rate": 1e-3,
            "warmup_steps": 2,
            "total_steps": 6,
            "checkpoint_interval": 3,
        }
        out = Path(tmp) / "model"
        model, losses = lr.train(
            corpus.docs, train_queries, corpus.qrels, candidates,
            model_config=model_config, train_config=train_config, out_dir=str(out),
        )
        assert len(losses) == 6 and all(math.isfinite(x) for x in losses)
        assert model.num_parameters > 0

        docs = {d[0]: d for d in corpus.docs}
        query = queries[corpus.held_out_queries[0]]
        pool = [docs[d] for d, _ in index.search(query, k=20)]
        ranked = model.rerank(query, pool)
        assert sorted(d for d, _ in ranked) == sorted(d[0] for d in pool)
        assert all(0.0 <= p <= 1.0 for _, p in ranked)

        loaded = lr.Reranker.load(str(out / "model.ckpt"))
        assert loaded.rerank(query, pool) == ranked
        assert loaded.score(query, pool[0][2]) == model.score(query, pool[0][2])

    held_out = {q: [d for d, _ in index.search(queries[q])] for q in corpus.held_out_queries}
    print(f"bm25 held-out mrr@100 {lr.mrr(held_out, corpus.qrels):.4f}")
    print("smoke test passed")


if __name__ == "__main__":
    main()
