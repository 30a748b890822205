"""Smoke test for the pyclustalign extension module.

Build and install first, e.g. `maturin develop --release` in crates/python.
"""

import json
import math
import tempfile

import pyclustalign as ca


def main():
    p = ca.softmax([1.0, 0.0])
    assert abs(p[0] - 0.7311) < 1e-4 and abs(sum(p) - 1.0) < 1e-12

    assert abs(ca.cosine_similarity([1.0, 0.0], [0.0, 2.0])) < 1e-12
    assert abs(ca.poly_lr(0.01, 0, 100) - 0.01) < 1e-15

    proto, idx = ca.select_prototype([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
    assert idx == 1 and proto == [0.9, 0.1]

    a = [[0.5, 0.5], [0.5, 0.5]]
    value, grad = ca.ncut_loss([[1.0, 0.0], [0.0, 1.0]], a)
    assert value == 1.0 and len(grad) == 2
    assert ca.hard_ncut_value([0, 1], a, 2) == 1.0

    checks = ca.check_grads(instances=2, probes=10)
    assert len(checks) == 10 and all(c["passed"] for c in checks), checks

    ds = ca.Dataset.generate(3, seed=1, shift="default")
    shape, x, labels = ds.sample(0)
    assert len(ds) == 3 and len(x) == math.prod(shape) and len(labels) == shape[0] * shape[1]

    with tempfile.TemporaryDirectory() as tmp:
        config = """
objective_base = "toy"
[objective]
warmup_iters = 20
adapt_iters = 20
max_iters = 40
[data]
n_source = 6
n_target = 6
n_test = 6
"""
        summary = json.loads(ca.run_experiment(config, output_dir=tmp))
        assert summary["num_classes"] == 5
        seg = ca.Segmenter.load(f"{tmp}/seed_0/checkpoint")
        per_class, miou, acc = seg.evaluate(ds)
        assert 0.0 <= miou <= 1.0 and len(per_class) == 5
        pred = seg.predict(x, shape[0], shape[1], shape[2])
        assert len(pred) == shape[0] * shape[1]

        try:
            ca.run_experiment("[losses]\nuse_b = true\n", output_dir=tmp)
        except ValueError as e:
            assert "use_b" in str(e) or "unknown" in str(e), e
        else:
            raise AssertionError("invalid config accepted")

    print("pyclustalign smoke test passed")


if __name__ == "__main__":
    main()
