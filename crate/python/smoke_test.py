"""Smoke test for the compiled extension.

Build and import with either `maturin develop -m crates/python/Cargo.toml`
or by copying target/*/libhyperconformer_py.so next to this file as
hyperconformer_py.so.
"""

import math
import random

import hyperconformer_py as hc


def main():
    counts = hc.count_params("hyperconformer", preset="small", scope="full")
    assert abs(counts["total"] / 1e6 - 7.9) <= 0.79, counts
    assert counts["total"] < hc.count_params("conformer")["total"]
    print("params hyperconformer-small", counts["total"])

    enc = hc.Encoder.toy("hyperconformer", d_model=16, layers=1, heads=2, kernel=3, seed=1)
    rng = random.Random(0)
    feats = [[rng.uniform(-1, 1) for _ in range(hc.FEATURE_DIM)] for _ in range(40)]
    y = enc.forward(feats)
    assert y.shape == [hc.subsampled_len(40), 16], y.shape
    assert y.tolist() == enc.forward(feats).tolist()
    print(enc, "->", y)

    # uniform over 3 classes, 2 frames, target [1]: paths 01, 10, 11
    lp = [[math.log(1 / 3)] * 3 for _ in range(2)]
    loss, grad = hc.ctc_loss(lp, [1])
    assert abs(loss - -math.log(3 / 9)) < 1e-12, loss
    assert all(abs(sum(row) + 1.0) < 1e-12 for row in grad)
    assert hc.greedy_decode([[0.0, -9, -9], [-9, 0.0, -9], [-9, 0.0, -9], [0.0, -9, -9], [-9, 0.0, -9]]) == [1, 1]

    flops = hc.flop_model("conformer", 3000)
    assert flops["total"] == sum(v for k, v in flops.items() if k != "total")

    err = hc.gradcheck("hypermixer", seed=7)
    assert err < 1e-4, err
    passed, suites = hc.run_verify(seed=3)
    assert passed, suites

    try:
        hc.Encoder("lstm")
    except ValueError as e:
        assert "valid models" in str(e)
    else:
        raise AssertionError("unknown model accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
