"""Benchmark the compiled kernel core against the pure-numpy fallback.

Times the fused denoiser forward, the AdamW update, and an end-to-end
guided sampling call under each backend.  Run as:

    python benchmarks/bench_kernels.py
"""

import os
import time

import numpy as np

from synreplay import _purecore
from synreplay.generator import GeneratorModel, NoiseSchedule, sample_cfg
from synreplay.numcore.rng import RngStream

try:
    from synreplay import _fastcore
except ImportError:
    _fastcore = None


def timeit(fn, repeats):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_mlp(core, repeats=300, batch=8):
    rng = RngStream(1)
    args = (rng.normal((batch, 288)),
            rng.normal((288, 128)) * 0.05, rng.normal((128,)) * 0.01,
            rng.normal((128, 128)) * 0.05, rng.normal((128,)) * 0.01,
            rng.normal((128, 256)) * 0.05, rng.normal((256,)) * 0.01)
    return timeit(lambda: core.mlp3_tanh(*args), repeats)


def bench_adamw(core, repeats=300):
    rng = RngStream(2)
    p = rng.normal((40000,))
    g = rng.normal((40000,))
    m = np.zeros(40000)
    v = np.zeros(40000)
    state = {"step": 0}

    def step():
        state["step"] += 1
        core.adamw_update(p, g, m, v, state["step"], 1e-3, 0.9, 0.999, 1e-8, 1e-2)

    return timeit(step, repeats)


def bench_sampler(backend_name, repeats=20):
    os.environ["SYNREPLAY_BACKEND"] = backend_name
    # backend is chosen at import; re-resolve through a fresh interpreter-free
    # path by swapping the module attribute directly
    from synreplay import backend
    core = _fastcore if backend_name == "compiled" else _purecore
    old = (backend.mlp3_tanh, backend.adamw_update, backend.BACKEND)
    backend.mlp3_tanh, backend.adamw_update, backend.BACKEND = \
        core.mlp3_tanh, core.adamw_update, backend_name
    try:
        gen = GeneratorModel(class_names=["thing"], pixels=256, width=128,
                             schedule=NoiseSchedule(steps=50, beta_start=0.01, beta_end=0.3),
                             init_seed=0)
        state = {"i": 0}

        def one():
            state["i"] += 1
            sample_cfg(gen, "thing", 7.5, seed=state["i"])

        return timeit(one, repeats)
    finally:
        backend.mlp3_tanh, backend.adamw_update, backend.BACKEND = old


def main():
    cores = [("python", _purecore)]
    if _fastcore is not None:
        cores.append(("compiled", _fastcore))
    print(f"{'kernel':<22}" + "".join(f"{name:>14}" for name, _ in cores) +
          ("       speedup" if len(cores) == 2 else ""))
    rows = [
        ("mlp3_tanh 1x288", lambda core: bench_mlp(core, batch=1)),
        ("mlp3_tanh 8x288", bench_mlp),
        ("adamw_update 40k", bench_adamw),
    ]
    for label, fn in rows:
        times = [fn(core) for _, core in cores]
        line = f"{label:<22}" + "".join(f"{t * 1e6:>11.1f} us" for t in times)
        if len(times) == 2:
            line += f"{times[0] / times[1]:>12.2f}x"
        print(line)
    times = [bench_sampler(name) for name, _ in cores]
    line = f"{'sample_cfg 50 steps':<22}" + "".join(f"{t * 1e3:>11.2f} ms" for t in times)
    if len(times) == 2:
        line += f"{times[0] / times[1]:>12.2f}x"
    print(line)
    if _fastcore is None:
        print("\ncompiled core unavailable; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
