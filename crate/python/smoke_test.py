"""Smoke test for the scaar extension module.

Build and install it first:

    pip install -e crates/python --no-build-isolation
    python3 python/smoke_test.py
"""

import json
import math
import os
import tempfile

import scaar

SMALL = json.dumps({
    "victim": {"layers": [{"kind": "conv", "ops": 40}, {"kind": "fc", "ops": 10}],
               "input_dim": 16, "n_classes": 4},
    "leakage": {"sigma": 0.5},
    "train": {"epochs": 8, "batch_size": 16, "learning_rate": 0.003},
    "preprocess": {"smooth_window": 2, "decimate": 2},
    "n_per_class": 50,
    "seed": 3,
})


def main():
    assert scaar.hamming_weight(0b1011) == 3
    t = scaar.welch_t([1, 2, 3, 4], [2, 3, 4, 5])
    assert math.isclose(t, -1.0954451150103321, rel_tol=1e-9), t

    traces = scaar.simulate(SMALL)
    assert len(traces) == 200 and traces.fixed_len == 200
    assert traces.class_counts() == [50] * 4
    assert traces.validate() == []

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "t.scar")
        traces.write(path)
        back = scaar.TraceSet.read(path)
        assert back.labels() == traces.labels()
        assert back.samples(7) == traces.samples(7)

        profiling, attack = scaar.split(traces, SMALL)
        assert (len(profiling), len(attack)) == (180, 20)
        model = scaar.profile(profiling, SMALL)
        acc = model.score(attack)
        print(f"attack accuracy {acc:.3f} ({model.n_params} parameters)")
        assert acc > 0.5

        model.save(os.path.join(d, "m.bin"))
        again = scaar.Model.load(os.path.join(d, "m.bin"))
        assert again.predict(attack) == model.predict(attack)

        cam = model.grad_cam(attack.samples(0), attack.labels()[0])
        assert len(cam) == model.input_len and min(cam) >= 0.0

    a, b = scaar.class_vs_rest(traces, 0, seed=1)
    report = scaar.tvla(a, b)
    assert len(report["t"]) == 200 and report["threshold"] == 4.5
    print(f"max |t| class 0 vs rest: {max(abs(x) for x in report['t']):.1f}")

    lengths = [len(scaar.simulate_llm(list(range(n)))) for n in range(4)]
    assert lengths[0] == 0 and lengths == sorted(set(lengths)), lengths

    lo, hi = scaar.binomial_band(1000, 0.1)
    assert lo < 0.1 < hi
    assert scaar.shift([1, 2, 3], 1) == [0, 1, 2]
    print("smoke test passed")


if __name__ == "__main__":
    main()
