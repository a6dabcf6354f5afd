use std::ffi::CString;

use pyo3::types::PyDict;

use super::*;

/// Runs `code` with the module bound to `tp`; assertion failures surface as panics.
fn run(code: &str) {
    Python::attach(|py| {
        let module = PyModule::new(py, "topopack_py").unwrap();
        topopack_py(&module).unwrap();
        let globals = PyDict::new(py);
        globals.set_item("tp", module).unwrap();
        let src = CString::new(code).unwrap();
        if let Err(e) = py.run(&src, Some(&globals), None) {
            e.display(py);
            panic!("python snippet failed: {e}");
        }
    });
}

#[test]
fn mask_counts() {
    run(r#"
assert tp.allowed_count(1000, 3) == 1100001
assert tp.sequence_length(1000, 3) == 10001
assert abs(tp.sparsity_ratio(1000, 3) - 0.0110) < 5e-5
s = tp.mask_stats(4, 2)
assert (s["M"], s["k"], s["N"], s["allowed"]) == (4, 2, 21, 4 * 25 + 16 + 1)
lay = tp.PackLayout(6, 6, 3)
assert lay.pack_count == 4 and lay.seq_len == 41
assert len(lay.allowed_pairs()) == tp.allowed_count(4, 3)
assert lay.token_kind(0) == ("global", None, None)
assert lay.token_kind(10) == ("summary", 0, None)
assert lay.token_to_coord(lay.coord_to_token(4, 5)) == (4, 5)
assert lay.allows(5, 0) and not lay.allows(1, 11)
"#);
}

#[test]
fn sparse_matches_dense() {
    run(r#"
import random
random.seed(3)
lay = tp.PackLayout(4, 6, 2)
n, d = lay.seq_len, 5
mat = lambda: [[random.gauss(0, 1) for _ in range(d)] for _ in range(n)]
q, k, v = mat(), mat(), mat()
valid = [True] * n
valid[3] = False
for kv in (None, valid):
    a = tp.sparse_attention(q, k, v, lay, kv)
    b = tp.dense_attention(q, k, v, lay, kv)
    assert max(abs(x - y) for ra, rb in zip(a, b) for x, y in zip(ra, rb)) < 1e-10
try:
    tp.sparse_attention(q, k, v, lay, [True])
    raise AssertionError("expected ValueError")
except ValueError:
    pass
"#);
}

#[test]
fn grids_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.fgrid");
    run(&format!(
        r#"
g, labels = tp.synth_grid(7, height=6, width=9, dim=4)
again, _ = tp.synth_grid(7, height=6, width=9, dim=4)
assert g.to_bytes() == again.to_bytes()
assert (g.height, g.width, g.dim, len(labels)) == (6, 9, 4, 54)
g.write({path:?})
back = tp.FeatureGrid.read({path:?})
# The file stores single precision, so bytes match exactly and values to f32 rounding.
assert back.to_bytes() == g.to_bytes() and back.validity == g.validity
assert max(abs(a - b) for a, b in zip(back.features, g.features)) < 1e-6
h = tp.FeatureGrid(1, 2, 1, [0.5, 0.0], [True, False])
assert h.feature(0, 0) == [0.5] and h.validity == [True, False]
assert tp.FeatureGrid.from_bytes(h.to_bytes()).features == [0.5, 0.0]
try:
    tp.FeatureGrid(1, 2, 1, [0.5, 1.5], [True, False])
    raise AssertionError("expected ValueError")
except ValueError:
    pass
try:
    tp.FeatureGrid.from_bytes(b"nope")
    raise AssertionError("expected ValueError")
except ValueError:
    pass
"#
    ));
}

#[test]
fn regions_recover_planted_blobs() {
    run(r#"
g, labels = tp.synth_grid(11, height=12, width=12, dim=16, clusters=3, noise=0.05)
r = tp.propose_regions(g)
assert len(r["regions"]) == 3 and len(r["seeds"]) == 3
pred = [0] * (g.height * g.width)
for idx, region in enumerate(r["regions"]):
    for cell in region:
        pred[cell] = idx
assert tp.adjusted_rand_index(labels, pred) > 0.9
assert tp.adjusted_rand_index([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
"#);
}

#[test]
fn training_chain_and_condense() {
    run(r#"
corpus = [tp.synth_grid(s, height=6, width=6, dim=8)[0] for s in range(4)]
ck = None
for stage in ("mae1", "mae2", "moco", "connector"):
    summary, ck = tp.train_stage(stage, corpus, seed=1, steps=30, resume=ck)
    assert summary["stage"] == stage and len(summary["log"]) == 30
    assert set(summary["log"][0]) == {"step", "loss", "phase", "queue_len"}
assert ck.meta["stage"] == "connector"
assert "connector.queries" in ck.param_names()
assert len(ck.param("connector.queries")) == 32
restored = tp.Checkpoint.from_bytes(ck.to_bytes())
assert restored.to_bytes() == ck.to_bytes()
tokens = tp.condense(corpus[0], restored)
assert len(tokens) == 32 and all(len(t) == 8 for t in tokens)
assert len(tp.condense(corpus[0], queries=7)) == 7
summary, _ = tp.train_stage("moco", corpus, seed=2, steps=5, noise=0.0, queue=0)
assert all(abs(e["loss"]) < 1e-9 for e in summary["log"])
try:
    tp.train_stage("mae3", corpus, seed=0)
    raise AssertionError("expected ValueError")
except ValueError:
    pass
"#);
}
