"""Smoke test for the compiled extension.

Build and install it first, e.g.

    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/topopack-*.whl

then run ``python python/smoke_test.py``.
"""

import random
import sys
import tempfile
from pathlib import Path

import topopack_py as tp


def max_abs_diff(a, b):
    return max(abs(x - y) for ra, rb in zip(a, b) for x, y in zip(ra, rb))


def check_mask():
    assert tp.allowed_count(1000, 3) == 1_100_001
    ratio = tp.sparsity_ratio(1000, 3)
    assert abs(ratio - 0.0110) < 5e-5, ratio
    layout = tp.PackLayout(6, 9, 3)
    assert len(layout.allowed_pairs()) == tp.allowed_count(layout.pack_count, 3)
    return f"allowed(1000, 3) = {tp.allowed_count(1000, 3)}, ratio {ratio:.6f}"


def check_attention():
    rng = random.Random(0)
    layout = tp.PackLayout(6, 6, 3)
    n, d = layout.seq_len, 8
    q, k, v = ([[rng.gauss(0, 1) for _ in range(d)] for _ in range(n)] for _ in range(3))
    dev = max_abs_diff(tp.sparse_attention(q, k, v, layout), tp.dense_attention(q, k, v, layout))
    assert dev < 1e-10, dev
    return f"sparse vs dense max deviation {dev:.2e}"


def check_regions():
    grid, labels = tp.synth_grid(3, noise=0.05)
    report = tp.propose_regions(grid)
    pred = [0] * (grid.height * grid.width)
    for idx, region in enumerate(report["regions"]):
        for cell in region:
            pred[cell] = idx
    ari = tp.adjusted_rand_index(labels, pred)
    assert ari >= 0.9, ari
    return f"{len(report['regions'])} regions, ARI {ari:.3f}, seeds {report['seeds']}"


def check_training(workdir):
    corpus = [tp.synth_grid(s, height=6, width=6, dim=8)[0] for s in range(8)]
    # On a corpus this small a longer queue would hold stale keys of the
    # query's own grid, so it is kept one short of the corpus size.
    queue = len(corpus) - 1
    ckpt = None
    losses = []
    for stage in ("mae1", "mae2", "moco", "connector"):
        summary, ckpt = tp.train_stage(stage, corpus, seed=1, steps=100, resume=ckpt, queue=queue)
        assert summary["improved"], summary["stage"]
        losses.append(f"{stage} {summary['initial_loss']:.3f}->{summary['final_loss']:.3f}")
    path = str(Path(workdir) / "connector.tpck")
    ckpt.save(path)
    tokens = tp.condense(corpus[0], tp.Checkpoint.load(path))
    assert len(tokens) == 32 and len(tokens[0]) == 8
    return ", ".join(losses) + f"; condensed to {len(tokens)} tokens"


def check_files(workdir):
    grid, _ = tp.synth_grid(7)
    path = str(Path(workdir) / "g.fgrid")
    grid.write(path)
    assert tp.FeatureGrid.read(path).to_bytes() == grid.to_bytes()
    try:
        tp.FeatureGrid.from_bytes(b"FGRD")
    except ValueError:
        pass
    else:
        raise AssertionError("truncated grid was accepted")
    return repr(grid)


def main():
    failures = 0
    with tempfile.TemporaryDirectory() as workdir:
        checks = [
            ("mask", check_mask),
            ("attention", check_attention),
            ("regions", check_regions),
            ("training", lambda: check_training(workdir)),
            ("files", lambda: check_files(workdir)),
        ]
        for name, check in checks:
            try:
                print(f"PASS {name}: {check()}")
            except Exception as exc:  # report every check, then fail once
                failures += 1
                print(f"FAIL {name}: {exc!r}")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
