"""Benchmark: compiled fused kernels vs the pure-numpy fallback.

Times the individual kernels and a representative end-to-end training slice
on both paths (the pure path is selected in a subprocess through
``VRBA_PURE_PYTHON=1``), and checks that the two implementations agree.

Run from the repository root:

    python3 benchmarks/bench_kernels.py
"""

import json
import os
import subprocess
import sys
import time

import numpy as np

REPS = {"tanh_pair": 200, "tanh_quad": 200, "gelu_pair": 200}
SHAPE = (512, 64)


def time_kernels():
    from vrba import kernels

    rng = np.random.default_rng(0)
    v = rng.normal(size=SHAPE)
    out = {"compiled": kernels.HAVE_COMPILED}
    for name, reps in REPS.items():
        fn = getattr(kernels, name)
        fn(v)  # warm up
        t0 = time.perf_counter()
        for _ in range(reps):
            fn(v)
        out[name + "_us"] = (time.perf_counter() - t0) / reps * 1e6
    return out


def time_training_slice():
    from vrba.config import parse_config
    from vrba.problems import train_pinn

    cfg = parse_config({
        "problem": "poisson", "mode": "vrba_weighting", "potential": "quadratic",
        "seed": 0, "iters": 1500, "log_every": 1500,
    })
    t0 = time.perf_counter()
    result = train_pinn(cfg)
    ms_per_iter = (time.perf_counter() - t0) / cfg.iters * 1e3
    return ms_per_iter, float(result.records[-1].rel_l2)


def values_for_agreement():
    from vrba import kernels

    rng = np.random.default_rng(1)
    v = rng.normal(size=(64, 8))
    vals = []
    for name in REPS:
        vals.extend(np.asarray(part).ravel() for part in getattr(kernels, name)(v))
    return np.concatenate(vals)


def main():
    if os.environ.get("_BENCH_CHILD"):
        payload = {
            "kernels": time_kernels(),
            "train": time_training_slice(),
            "values": values_for_agreement().tolist(),
        }
        print("\n_BENCH_JSON " + json.dumps(payload))
        return

    results = {}
    for label, env_extra in (("compiled", {}), ("pure", {"VRBA_PURE_PYTHON": "1"})):
        env = dict(os.environ, _BENCH_CHILD="1", **env_extra)
        proc = subprocess.run([sys.executable, __file__], capture_output=True,
                              text=True, env=env)
        if proc.returncode != 0:
            raise SystemExit(f"{label} run failed:\n{proc.stderr}")
        line = [l for l in proc.stdout.splitlines() if l.startswith("_BENCH_JSON ")][-1]
        results[label] = json.loads(line[len("_BENCH_JSON "):])

    comp, pure = results["compiled"], results["pure"]
    if not comp["kernels"]["compiled"]:
        print("note: compiled extension unavailable; both rows use the fallback")

    print(f"{'kernel':<14}{'compiled (us)':>14}{'pure (us)':>12}{'speedup':>9}")
    for name in REPS:
        a = comp["kernels"][name + "_us"]
        b = pure["kernels"][name + "_us"]
        print(f"{name:<14}{a:>14.1f}{b:>12.1f}{b / a:>9.2f}x")

    (ms_c, rel_c), (ms_p, rel_p) = comp["train"], pure["train"]
    print(f"{'train slice':<14}{ms_c * 1e3:>14.1f}{ms_p * 1e3:>12.1f}{ms_p / ms_c:>9.2f}x"
          f"   (ms/iter x1000; rel_l2 {rel_c:.3e} vs {rel_p:.3e})")

    gap = np.max(np.abs(np.asarray(comp["values"]) - np.asarray(pure["values"])))
    print(f"max kernel value disagreement: {gap:.3e}")
    if gap > 1e-12:
        raise SystemExit("kernel paths disagree beyond tolerance")


if __name__ == "__main__":
    main()
