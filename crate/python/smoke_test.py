#!/usr/bin/env python3
"""Smoke test for the ibpwf_py extension module.

Builds nothing itself: it looks for the compiled cdylib under target/
(release preferred), copies it next to a temp dir as an importable module,
and exercises the exposed surface end to end, including a miniature
one-task training run on the bundled MNIST files.

Run from the repository root:  python3 python/smoke_test.py
"""

import json
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def locate_cdylib():
    names = {"linux": "libibpwf_py.so", "darwin": "libibpwf_py.dylib"}
    lib = names.get(sys.platform, "libibpwf_py.so")
    candidates = [
        os.path.join(ROOT, "target", "release", lib),
        os.path.join(ROOT, "target", "debug", lib),
    ]
    for c in candidates:
        if os.path.exists(c):
            return c
    sys.exit(
        "ibpwf_py cdylib not found; build it first:\n"
        "  cargo build --release -p ibpwf-py"
    )


def import_module():
    src = locate_cdylib()
    tmp = tempfile.mkdtemp(prefix="ibpwf_py_")
    shutil.copy(src, os.path.join(tmp, "ibpwf_py.so"))
    sys.path.insert(0, tmp)
    import ibpwf_py

    return ibpwf_py


def approx(x, y, tol=1e-9):
    assert abs(x - y) <= tol, f"{x} vs {y} (tol {tol})"


def main():
    m = import_module()
    data_dir = os.environ.get("IBPWF_DATA_DIR", os.path.join(ROOT, "data"))

    # analytic distribution surface
    approx(m.kumaraswamy_kl(1.0, 1.0, 1.0, 1.0, 10), 0.0)
    assert abs(m.kumaraswamy_kl(2.0, 3.0, 2.0, 3.0, 10)) < 1e-3
    assert m.kumaraswamy_kl(2.0, 1.0, 5.0, 1.0, 10) > 0.0
    approx(m.kumaraswamy_moment(1.0, 1.0, 1.0), 0.5, 1e-12)
    approx(m.kumaraswamy_entropy(1.0, 1.0), 0.0, 1e-12)

    # samplers: inverse-CDF identity and symmetry
    v = m.kumaraswamy_sample(2.0, 3.0, 0.25)
    approx(1.0 - (1.0 - v**2.0) ** 3.0, 0.25, 1e-10)
    approx(m.concrete_sample(0.5, 2.0 / 3.0, 0.5), 0.5, 1e-12)

    pi = m.stick_breaking([0.5, 0.5, 0.5])
    assert pi == [0.5, 0.25, 0.125], pi

    # configs and data plumbing
    cfg = json.loads(m.preset_config("split"))
    assert cfg["benchmark"] == "split_mnist" and cfg["tasks"] == 5
    n_train, n_test, dim = m.mnist_summary(data_dir)
    assert (n_train, n_test, dim) == (60000, 10000, 784)
    assert m.permuted_first_task_is_identity(data_dir, 1)

    sizes = m.stream_sizes(json.dumps(cfg), data_dir)
    assert len(sizes) == 5
    assert sum(s[0] for s in sizes) == 60000
    assert sum(s[1] for s in sizes) == 10000

    # miniature end-to-end run: one task, two short phases
    cfg.update(tasks=1, seed=7)
    cfg["train"].update(epochs_expand=1, epochs_finetune=1)
    cfg["evaluation"].update(entropy_samples_per_split=50, entropy_ensemble=20)
    metrics = json.loads(m.run_experiment(json.dumps(cfg), data_dir))
    acc = metrics["final_avg_task"]
    assert acc > 0.98, f"one-task split accuracy {acc}"
    assert metrics["stages"][0]["task_inference"] == 1.0
    ent = metrics["stages"][0]["entropy"]
    assert ent is not None and len(ent) == 5
    seen, unseen = ent[0], ent[1:]
    assert all(u > seen for u in unseen), f"entropy ordering {ent}"
    assert not math.isnan(metrics["total_seconds"])

    print("smoke test passed:")
    print(f"  one-task split accuracy {acc:.4f}")
    print(f"  entropy seen {seen:.3f} vs unseen {[round(u, 3) for u in unseen]}")


if __name__ == "__main__":
    main()
