"""Benchmark: numba sweep kernel vs the pure-numpy fallback.

Times repeated snapshot solves and one full CVR day on the bundled 240-bus
synthetic feeder under both backends and checks that they agree.

Usage: python benchmarks/bench_solver.py [--repeats N]
"""

import argparse
import time

import numpy as np

from cvrsim.kernels import SOURCE_ANGLES, compile_network, run_sweep
from cvrsim.powerflow import SolveOptions
from cvrsim.scenario import ScenarioConfig, SynthesisParams, run_scenario, synthesize_feeder


def time_sweeps(compiled, backend, repeats):
    inj_p, inj_q = compiled.zero_injections()
    src = np.ones(3) * SOURCE_ANGLES
    # warm up (JIT compile / cache load)
    run_sweep(compiled, 1.0, inj_p, inj_q, src, 1e-6, 100, backend=backend)
    t0 = time.perf_counter()
    for _ in range(repeats):
        out = run_sweep(compiled, 1.0, inj_p, inj_q, src, 1e-6, 100, backend=backend)
    elapsed = time.perf_counter() - t0
    assert out[4], "solve did not converge"
    return elapsed / repeats, out[0]


def time_cvr_day(network, backend):
    import cvrsim.kernels as kernels

    previous = kernels.BACKEND
    kernels.BACKEND = backend
    try:
        cfg = ScenarioConfig(feeder=network, allocation="dispersed",
                             penetration_pct=60.0, mode="vrp", cvr_enabled=True)
        run_scenario(cfg, options=SolveOptions())  # warm up
        t0 = time.perf_counter()
        result = run_scenario(cfg)
        elapsed = time.perf_counter() - t0
    finally:
        kernels.BACKEND = previous
    return elapsed, result


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200,
                        help="snapshot solves per backend (default 200)")
    args = parser.parse_args()

    network = synthesize_feeder(SynthesisParams())
    compiled = compile_network(network)
    print(f"feeder: {compiled.n_bus} buses, {compiled.n_line} lines")

    try:
        t_numba, v_numba = time_sweeps(compiled, "numba", args.repeats)
    except ImportError:
        print("numba not available; benchmarking the numpy path only")
        t_numba = v_numba = None
    t_numpy, v_numpy = time_sweeps(compiled, "numpy", args.repeats)

    print(f"\nsnapshot solve ({args.repeats} repeats):")
    if t_numba is not None:
        dv = np.abs(v_numba - v_numpy).max()
        print(f"  numba : {t_numba * 1e3:8.3f} ms")
        print(f"  numpy : {t_numpy * 1e3:8.3f} ms")
        print(f"  speedup: {t_numpy / t_numba:5.1f}x   max |dV| {dv:.2e} p.u.")
    else:
        print(f"  numpy : {t_numpy * 1e3:8.3f} ms")

    day_numpy, r_numpy = time_cvr_day(network, "numpy")
    print("\nfull CVR day (dispersed, volt-var, 60% penetration):")
    if t_numba is not None:
        day_numba, r_numba = time_cvr_day(network, "numba")
        taps_match = all(a.taps == b.taps for a, b in zip(r_numba.hours, r_numpy.hours))
        print(f"  numba : {day_numba:6.2f} s")
        print(f"  numpy : {day_numpy:6.2f} s")
        print(f"  speedup: {day_numpy / day_numba:5.1f}x   taps identical: {taps_match}")
    else:
        print(f"  numpy : {day_numpy:6.2f} s")


if __name__ == "__main__":
    main()
