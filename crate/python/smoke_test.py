"""Smoke test for the `eatt` Python extension.

Build first:  pip install ./crates/py   (or `maturin develop -m crates/py/Cargo.toml`)
Run:          python python/smoke_test.py
"""

import math
import random
import tempfile

import eatt


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def main():
    rng = random.Random(0)

    b = eatt.binarize([0.5, 1.0, 1.5, -2.0])
    assert b == [0.0, 0.0, 1.0, 0.0], b
    g = eatt.surrogate_grad([1.0], [1.0])
    assert close(g[0], math.sqrt(2 / math.pi)), g

    xb = [[float(rng.random() > 0.5) for _ in range(5)] for _ in range(3)]
    w = [[rng.uniform(-1, 1) for _ in range(4)] for _ in range(5)]
    proj = eatt.selective_project(xb, w)
    for i in range(3):
        for j in range(4):
            assert close(proj[i][j], sum(xb[i][k] * w[k][j] for k in range(5)))
    assert eatt.nonzero_ratio([0.0, 1.0, 1.0, 0.0]) == 0.5

    x = [[rng.uniform(-1, 1) for _ in range(8)] for _ in range(5)]
    for kind in ["vanilla", "e-att", "dense", "rand-init"]:
        att = eatt.Attention(kind, d=8, heads=2, max_len=6, seed=3)
        out, weights = att.forward(x, causal=True)
        assert len(out) == 5 and len(out[0]) == 8
        assert len(weights) == 2
        for head in weights:
            for i, row in enumerate(head):
                assert close(sum(row), 1.0), (kind, row)
                assert all(v == 0.0 for v in row[i + 1:]), (kind, row)

    assert eatt.count_ops("vanilla", "alignment", 4, 8) == (640, 640)
    assert eatt.count_ops("e-att", "alignment", 4, 8)[1] == 0
    m = eatt.measure_ops("vanilla", "alignment", 4, 8)
    assert (m["additions"], m["multiplications"]) == (640, 640), m
    assert eatt.energy_ratio("vanilla", "attention", 22, 512) == 100.0
    assert eatt.energy_ratio("e-att", "alignment", 22, 512) < 1.0
    rows = eatt.energy_report(["vanilla", "e-att"], ["attention"], ["asic", "fpga"], [22], [64, 128])
    assert len(rows) == 8 and {"variant", "joules", "ratio_percent"} <= rows[0].keys()

    for op in ["binarize", "l1-attention", "vanilla-attention", "dense", "randinit"]:
        res = eatt.gradcheck(op, seed=1, trials=1)
        assert all(r["passed"] for r in res), res

    try:
        eatt.count_ops("dense", "block", 4, 8)
    except eatt.EattError:
        pass
    else:
        raise AssertionError("unsupported combination accepted")
    try:
        eatt.Attention("e-att", d=6, heads=4)
    except ValueError:
        pass
    else:
        raise AssertionError("indivisible heads accepted")

    t = eatt.Trainer("reverse", "all=e-att", steps=20, train_examples=300, eval_examples=16)
    t.run()
    assert t.step == 20 and t.history[-1]["step"] == 20
    stats = t.binarization_stats()
    assert all(0.0 <= s["rho"] <= 1.0 for s in stats)
    with tempfile.TemporaryDirectory() as d:
        t.save(d)
        back = eatt.Trainer.load(d)
        assert back.step == 20 and back.history == t.history

    z = eatt.Trainer("copy", steps=5, train_examples=200, eval_examples=8)
    z.run(0)
    assert z.step == 0 and len(z.history) == 1

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
