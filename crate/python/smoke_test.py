"""Smoke test for the nestkit Python extension.

Build and run:
    maturin develop -m crates/python/Cargo.toml
    python python/smoke_test.py
"""

import math
import os
import tempfile

import nestkit


def main():
    names = nestkit.problems()
    assert "gaussian" in names, names

    summary, tree = nestkit.run("gaussian", nlive=100, sampler="mlfriends", seed=3)
    expected = summary["analytic_log_z"]
    err = summary["log_z_err"]
    assert abs(summary["log_z"] - expected) < 4 * err, (summary["log_z"], expected, err)
    assert len(tree) > 100
    assert summary["ess"] > 10
    assert abs(sum(row[0] for row in summary["posterior"]) - 1.0) < 1e-9

    again = tree.integrate()
    assert abs(again["log_z"] - summary["log_z"]) < 1e-8
    assert tree.estimate_uncertainty(folds=5, resamples=10) > 0

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "run.nstree")
        tree.save(path)
        loaded = nestkit.Tree.load(path)
        assert loaded.to_bytes() == tree.to_bytes()

    _, other = nestkit.run("gaussian", nlive=100, sampler="mlfriends", seed=4)
    merged = nestkit.Tree.merge([tree, other])
    assert len(merged) == len(tree) + len(other) - 1
    assert merged.integrate()["ess"] > summary["ess"]

    t = nestkit.Tree(1)
    a = t.attach_child(0, [0.5], -1.0)
    t.attach_child(a, [0.4], 0.0)
    assert t.children(0) == [a]
    assert t.node(a)["log_likelihood"] == -1.0

    z = nestkit.utest_z([i % 10 for i in range(1000)], [10] * 1000)
    assert abs(z) < 3, z
    assert nestkit.ks_test([0] * 200, 100) < 1e-6

    assert abs(nestkit.alpha_formula(2, 100) - 0.586) < 0.01

    prior = nestkit.Prior([
        {"type": "uniform", "low": -1.0, "high": 1.0},
        {"type": "normal", "mean": 0.0, "sigma": 2.0},
        {"type": "log-uniform", "low": 1e-3, "high": 1e3},
    ])
    x = prior.transform([0.5, 0.5, 0.5])
    assert abs(x[0]) < 1e-12 and abs(x[1]) < 1e-12 and abs(x[2] - 1.0) < 1e-9
    dirichlet = nestkit.Prior([{"type": "dirichlet", "k": 3}])
    assert abs(sum(dirichlet.transform([0.2, 0.7, 0.4])) - 1.0) < 1e-12

    try:
        nestkit.run("no-such-problem")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown problem accepted")

    print("smoke test passed: logZ = %.3f +- %.3f (analytic %.3f)"
          % (summary["log_z"], err, expected))
    assert math.isfinite(summary["information_gain"])


if __name__ == "__main__":
    main()
