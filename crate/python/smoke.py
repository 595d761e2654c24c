"""Smoke test for the `avgk` extension module.

Builds the crate, copies the shared library next to this script as
`avgk.so` and checks a handful of known values.

    python3 python/smoke.py
"""

import math
import os
import shutil
import subprocess
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)


def build():
    subprocess.run(["cargo", "build", "--release", "-p", "avgk-py"], cwd=ROOT, check=True)
    shutil.copy(os.path.join(ROOT, "target", "release", "libavgk.so"), os.path.join(HERE, "avgk.so"))
    sys.path.insert(0, HERE)


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    build()
    import avgk

    p = avgk.softmax([[0.0, 0.0], [1.0, 1.0 + math.log(3.0)]])
    assert close(p[0][0], 0.5) and close(p[1][1], 0.75), p

    value, grad = avgk.ce_loss([[0.0, 0.0]], [0])
    assert close(value, math.log(2.0)), value
    assert close(grad[0][0], -0.5) and close(grad[0][1], 0.5), grad

    value, _ = avgk.an_loss([[0.0, 0.0, 0.0]], [1])
    assert close(value, 2 * math.log(2.0)), value

    # Candidates from the worked three-row example: K = 2 gives (K-1)|B| = 3.
    z = [[math.log(v) for v in row] for row in [[0.70, 0.12, 0.10, 0.08], [0.25, 0.50, 0.15, 0.10], [0.05, 0.35, 0.40, 0.20]]]
    assert avgk.propose_candidates(z, [0, 1, 2], 2) == [[], [0], [1, 3]]

    out = avgk.avgk_loss(z, z, [0, 1, 2], 2, 0.3)
    assert close(out["value"], out["ce"] + out["bce"])
    assert out["candidates"] == [[], [0], [1, 3]]

    lam = avgk.calibrate([[0.9, 0.1], [0.6, 0.4]], 1)
    assert close(lam, 0.5), lam
    assert avgk.predict_sets([[0.9, 0.1], [0.6, 0.4]], lam) == [[0], [0]]
    assert close(avgk.avg_k_accuracy([[0.9, 0.1], [0.6, 0.4]], [0, 1], lam), 0.5)

    try:
        avgk.train(avgk.generate(n_train=10, n_val=10, n_test=10), loss="hinge")
    except ValueError as e:
        assert "avgk" in str(e)
    else:
        raise AssertionError("unknown loss accepted")

    data = avgk.generate(classes=6, superclasses=3, n_train=600, n_val=200, n_test=300, seed=3)
    model = avgk.train(data, k=2, epochs=10, lr_steps=[], seed=3)
    metrics = model.evaluate(data)
    bayes, _ = data.bayes_avgk_accuracy(2)
    assert abs(metrics["mean_set_size"] - 2.0) < 0.5, metrics
    assert metrics["test_avgk_accuracy"] <= bayes + 0.05, (metrics, bayes)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.bin")
        model.save(path)
        again = avgk.Model.load(path)
        x, _ = data.split("test")
        assert again.predict_proba(x[:5]) == model.predict_proba(x[:5])

    print(f"ok: {data!r}, test avg-2 accuracy {metrics['test_avgk_accuracy']:.4f} (Bayes {bayes:.4f})")


if __name__ == "__main__":
    main()
