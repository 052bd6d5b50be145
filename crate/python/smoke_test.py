"""Smoke test for the `ganseg` extension module.

Build and install first, e.g. `pip install --no-build-isolation ./crates/py`
(or `maturin develop -m crates/py/Cargo.toml`), then run this script.
"""

import math
import sys
import tempfile

import ganseg


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    g = ganseg.Generator.oracle_generator(resolution=16, edge_px=1.0)
    check(g.resolution == 16 and g.n_layers == 3, "oracle generator shape")

    img = g.sample(3)
    check(len(img) == 3 and len(img[0]) == 16, "sample is [3][16][16]")
    check(all(-1.0 <= v <= 1.0 for ch in img for row in ch for v in row), "sample within [-1, 1]")
    check(math.isclose(ganseg.ssim(img, img), 1.0, abs_tol=1e-12), "ssim identity")

    mask = g.true_mask(3)
    hard = [[1 if v >= 0.5 else 0 for v in row] for row in mask]
    m = ganseg.compute_metrics(hard, hard)
    check(m["miou"] == 1.0, "metrics on identical masks")

    scores = g.score_layers(n_crops=4, n_codes=2, seed=1)
    check(scores["argmax"] == 1, "background scoring picks layer 1")
    probe = g.trgb_probe(n_samples=4, seed=1)
    check(len(probe["layers"]) == g.n_layers, "probe covers every layer")

    overrides = {"iterations": "3", "batch": "2", "calibration_samples": "4"}
    lines = [l for l in ganseg.train_config("oracle").splitlines() if l.split(" =")[0] not in overrides]
    cfg = "\n".join(lines + [f"{k} = {v}" for k, v in overrides.items()])
    with tempfile.TemporaryDirectory() as out:
        alpha, summary = ganseg.train_alpha(g, scores["argmax"], cfg, out)
        check(summary["steps"] == 3, "alpha training ran")
        soft = alpha.predict_mask(5)
        check(all(0.0 < v < 1.0 for row in soft for v in row), "mask strictly inside (0, 1)")
        path = out + "/copy.ckpt"
        alpha.save(path)
        again = ganseg.AlphaNet.load(path, g)
        check(again.predict_mask(5) == soft, "alpha checkpoint round trip")
        report = ganseg.evaluate_oracle(alpha, n=4, seed=0)
        check(0.0 <= report["miou"] <= 1.0, "oracle evaluation")

        other = ganseg.Generator.toy(resolution=16, width=4, seed=2)
        try:
            ganseg.AlphaNet.load(path, other)
        except ValueError:
            check(True, "alpha refuses a different generator")
        else:
            check(False, "alpha refuses a different generator")

    print("smoke test passed")


if __name__ == "__main__":
    main()
