use pyo3::prelude::*;
use stlstm_py::stlstm_py;

fn run(code: &std::ffi::CStr) {
    pyo3::append_to_inittab!(stlstm_py);
    Python::initialize();
    Python::attach(|py| {
        if let Err(e) = py.run(code, None, None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn python_round_trip() {
    run(c"
import os, tempfile
import stlstm_py as s

c = s.Corpus.periodic(0, 20, 12)
assert len(c) == 20 and c.n_pois == 12, c
user, pois, n_train = c.user(0)
assert n_train == 21 and len(pois) == 30

m = s.Model('st-clstm', c.n_pois, cell_size=8, embed_size=8, lr=0.01)
losses = m.train(c, 5)
assert len(losses) == 5 and losses[-1] < losses[0], losses
assert max(m.tensor('W_t1')[0]) <= 0.0
metrics = m.evaluate(c)
assert 0.0 <= metrics['acc@1'] <= metrics['map'] <= 1.0, metrics
assert metrics['n_instances'] == 20 * 9

top = m.predict_topk([(pois[0], 6.0, 0.5), (pois[1], 6.0, 0.5)], 3)
assert len(top) == 3 and len(set(top)) == 3

with tempfile.TemporaryDirectory() as d:
    path = os.path.join(d, 'm.ckpt')
    m.save(path)
    back = s.Model.load(path)
    assert back.epochs_completed == 5
    assert back.evaluate(c) == metrics
    try:
        s.Model.load(os.path.join(d, 'missing.ckpt'))
        raise AssertionError('expected IOError')
    except IOError:
        pass

try:
    s.Model('gru', 5)
    raise AssertionError('expected ValueError')
except ValueError:
    pass

assert abs(s.haversine(0.0, 0.0, 90.0, 0.0) - 10007.543) < 1e-3
assert all(ok for _, _, _, ok in s.gradcheck())
");
}
