"""Smoke test for the stlstm_py extension module.

Build and install it first, e.g.

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/stlstm_py-*.whl
"""

import math
import os
import sys
import tempfile

import stlstm_py as s


def main():
    corpus = s.Corpus.interval_switch(seed=1, n_users=20, n_pois=24)
    print(corpus)

    models = {}
    for variant in ("lstm", "st-lstm", "st-clstm"):
        m = s.Model(variant, corpus.n_pois, cell_size=16, embed_size=16, lr=0.01, seed=1)
        losses = m.train(corpus, 20)
        assert losses[-1] < losses[0], (variant, losses[0], losses[-1])
        metrics = m.evaluate(corpus)
        print(f"{variant:<8} loss {losses[0]:.3f} -> {losses[-1]:.3f}  "
              f"acc@1 {metrics['acc@1']:.3f}  acc@10 {metrics['acc@10']:.3f}  map {metrics['map']:.3f}")
        models[variant] = m

    st = models["st-clstm"]
    for name in ("W_t1", "W_d1"):
        values, shape = st.tensor(name)
        assert shape == [16] and max(values) <= 0.0, name

    _, pois, n_train = corpus.user(0)
    history = [(p, 2.0, 0.5) for p in pois[:n_train]]
    print("top-5 after user 0's training history:", st.predict_topk(history, 5))

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        st.save(path)
        back = s.Model.load(path)
        assert back.evaluate(corpus) == st.evaluate(corpus)
        corpus.save(os.path.join(d, "corpus.bin"))
        again = s.Corpus.load(os.path.join(d, "corpus.bin"))
        assert again.content_hash() == corpus.content_hash()

    assert math.isclose(s.haversine(0, 0, 90, 0), 10007.543, abs_tol=1e-3)
    failed = [case for case in s.gradcheck() if not case[3]]
    assert not failed, failed
    print("ok")


if __name__ == "__main__":
    sys.exit(main())
