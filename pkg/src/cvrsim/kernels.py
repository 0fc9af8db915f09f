"""Ladder-iteration kernels behind the radial sweep solver.

Two interchangeable implementations of the same backward/forward sweep over
a compiled (array-form) network:

* a numba ``@njit`` scalar loop over lines (default), and
* a pure-numpy path that processes lines level by level.

Set ``CVRSIM_BACKEND=numpy`` to force the numpy path, ``=numba`` to require
numba.  Unset, numba is used when importable and numpy otherwise.
``benchmarks/bench_solver.py`` times the two against each other.
"""

from __future__ import annotations

import os
import warnings
import weakref
from dataclasses import dataclass

import numpy as np

from .network import FeederNetwork, require_radial

ENV_BACKEND = "CVRSIM_BACKEND"

# 0 deg, -120 deg, +120 deg source rotation
SOURCE_ANGLES = np.exp(1j * np.deg2rad(np.array([0.0, -120.0, 120.0])))


def _select_backend() -> str:
    choice = os.environ.get(ENV_BACKEND, "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(f"{ENV_BACKEND} must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise
        warnings.warn("numba unavailable; using the numpy sweep kernel", RuntimeWarning)
        return "numpy"
    return "numba"


BACKEND = _select_backend()


def active_backend() -> str:
    return BACKEND


@dataclass(eq=False)
class CompiledNetwork:
    """Array form of a validated radial network, everything in per-unit.

    Bus 0 is the source; lines are sorted by (depth, id) so that a forward
    scan visits parents before children and ``level_starts`` delimits the
    depth levels for the vectorized backend.  Load polynomials are aggregated
    per bus-phase: p(v) = scale * (a2*v^2 + a1*v + a0).
    """

    bus_ids: tuple[str, ...]
    bus_index: dict[str, int]
    line_ids: tuple[str, ...]
    f_idx: np.ndarray
    t_idx: np.ndarray
    z_pu: np.ndarray
    level_starts: np.ndarray
    phase_mask: np.ndarray
    a2p: np.ndarray
    a1p: np.ndarray
    a0p: np.ndarray
    a2q: np.ndarray
    a1q: np.ndarray
    a0q: np.ndarray
    v_base: np.ndarray
    s_base_1ph_kw: float

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_line(self) -> int:
        return len(self.line_ids)

    def zero_injections(self) -> tuple[np.ndarray, np.ndarray]:
        shape = (self.n_bus, 3)
        return np.zeros(shape), np.zeros(shape)


_compiled_cache: "weakref.WeakKeyDictionary[FeederNetwork, CompiledNetwork]" = (
    weakref.WeakKeyDictionary()
)


def compile_network(network: FeederNetwork) -> CompiledNetwork:
    """Build (and cache) the array representation used by the kernels."""
    cached = _compiled_cache.get(network)
    if cached is not None:
        return cached
    require_radial(network)

    children: dict[str, list[tuple[str, object]]] = {}
    for line in network.lines:
        children.setdefault(line.from_bus, []).append((line.id, line))
    for lst in children.values():
        lst.sort(key=lambda item: item[0])

    # breadth-first depth assignment, children in ascending line-id order
    depth_of: dict[str, int] = {network.source_bus: 0}
    ordered_lines: list[tuple[int, str, object]] = []
    frontier = [network.source_bus]
    while frontier:
        nxt: list[str] = []
        for bus in frontier:
            for lid, line in children.get(bus, []):
                depth_of[line.to_bus] = depth_of[bus] + 1
                ordered_lines.append((depth_of[line.to_bus], lid, line))
                nxt.append(line.to_bus)
        frontier = nxt
    ordered_lines.sort(key=lambda item: (item[0], item[1]))

    bus_ids = [network.source_bus] + [line.to_bus for _, _, line in ordered_lines]
    bus_index = {b: i for i, b in enumerate(bus_ids)}
    n = len(bus_ids)
    nl = len(ordered_lines)

    bus_map = network.bus_map
    v_base = np.array([bus_map[b].base_voltage for b in bus_ids])
    s1_w = network.s_base_1ph_kw * 1000.0
    z_base = v_base * v_base / s1_w

    f_idx = np.empty(nl, dtype=np.int64)
    t_idx = np.empty(nl, dtype=np.int64)
    z_pu = np.empty((nl, 3, 3), dtype=np.complex128)
    line_ids = []
    depths = []
    for k, (depth, lid, line) in enumerate(ordered_lines):
        fi = bus_index[line.from_bus]
        ti = bus_index[line.to_bus]
        if not np.isclose(v_base[fi], v_base[ti], rtol=1e-9):
            raise ValueError(
                f"line {lid}: endpoints have different voltage bases "
                "(in-line transformers are not modeled)"
            )
        f_idx[k] = fi
        t_idx[k] = ti
        z_pu[k] = line.z_total() / z_base[ti]
        line_ids.append(lid)
        depths.append(depth)

    max_depth = depths[-1] if depths else 0
    level_starts = np.zeros(max_depth + 1, dtype=np.int64)
    for d in depths:
        level_starts[d] += 1
    level_starts = np.concatenate(([0], np.cumsum(level_starts[1:])))

    phase_mask = np.zeros((n, 3), dtype=bool)
    for b, i in bus_index.items():
        for ph in bus_map[b].phases:
            phase_mask[i, ph.index] = True

    coeff = [np.zeros((n, 3)) for _ in range(6)]
    a2p, a1p, a0p, a2q, a1q, a0q = coeff
    s1_kw = network.s_base_1ph_kw
    for load in network.loads:
        i = bus_index[load.bus]
        ph = load.phase.index
        v0 = load.v0
        a2p[i, ph] += load.p0 * load.zp / (v0 * v0) / s1_kw
        a1p[i, ph] += load.p0 * load.ip / v0 / s1_kw
        a0p[i, ph] += load.p0 * load.pp / s1_kw
        a2q[i, ph] += load.q0 * load.zq / (v0 * v0) / s1_kw
        a1q[i, ph] += load.q0 * load.iq / v0 / s1_kw
        a0q[i, ph] += load.q0 * load.pq / s1_kw

    compiled = CompiledNetwork(
        bus_ids=tuple(bus_ids),
        bus_index=bus_index,
        line_ids=tuple(line_ids),
        f_idx=f_idx,
        t_idx=t_idx,
        z_pu=z_pu,
        level_starts=level_starts,
        phase_mask=phase_mask,
        a2p=a2p,
        a1p=a1p,
        a0p=a0p,
        a2q=a2q,
        a1q=a1q,
        a0q=a0q,
        v_base=v_base,
        s_base_1ph_kw=s1_kw,
    )
    _compiled_cache[network] = compiled
    return compiled


def _make_numba_kernel():
    import numba

    @numba.njit(cache=True)
    def sweep_numba(f_idx, t_idx, z, a2p, a1p, a0p, a2q, a1q, a0q,
                    load_scale, inj_p, inj_q, src_v, tol, max_sweeps):
        n = a2p.shape[0]
        nl = f_idx.shape[0]
        v = np.empty((n, 3), dtype=np.complex128)
        for b in range(n):
            for ph in range(3):
                v[b, ph] = src_v[ph]
        i_node = np.zeros((n, 3), dtype=np.complex128)
        accum = np.zeros((n, 3), dtype=np.complex128)
        i_br = np.zeros((nl, 3), dtype=np.complex128)
        sweeps = 0
        converged = nl == 0
        while sweeps < max_sweeps:
            sweeps += 1
            for b in range(n):
                for ph in range(3):
                    vm = abs(v[b, ph])
                    p = load_scale * (a2p[b, ph] * vm * vm + a1p[b, ph] * vm
                                      + a0p[b, ph]) - inj_p[b, ph]
                    q = load_scale * (a2q[b, ph] * vm * vm + a1q[b, ph] * vm
                                      + a0q[b, ph]) - inj_q[b, ph]
                    if p != 0.0 or q != 0.0:
                        i_node[b, ph] = (complex(p, q) / v[b, ph]).conjugate()
                    else:
                        i_node[b, ph] = 0.0 + 0.0j
                    accum[b, ph] = i_node[b, ph]
            for li in range(nl - 1, -1, -1):
                t = t_idx[li]
                f = f_idx[li]
                for ph in range(3):
                    c = accum[t, ph]
                    i_br[li, ph] = c
                    accum[f, ph] += c
            dv = 0.0
            for li in range(nl):
                f = f_idx[li]
                t = t_idx[li]
                for ph in range(3):
                    drop = (z[li, ph, 0] * i_br[li, 0]
                            + z[li, ph, 1] * i_br[li, 1]
                            + z[li, ph, 2] * i_br[li, 2])
                    nv = v[f, ph] - drop
                    d = abs(nv - v[t, ph])
                    if d > dv:
                        dv = d
                    v[t, ph] = nv
            if dv < tol:
                converged = True
                break
        # refresh the currents at the final voltages so that downstream power
        # accounting (losses, source injection) matches the reported state
        for b in range(n):
            for ph in range(3):
                vm = abs(v[b, ph])
                p = load_scale * (a2p[b, ph] * vm * vm + a1p[b, ph] * vm
                                  + a0p[b, ph]) - inj_p[b, ph]
                q = load_scale * (a2q[b, ph] * vm * vm + a1q[b, ph] * vm
                                  + a0q[b, ph]) - inj_q[b, ph]
                if p != 0.0 or q != 0.0:
                    i_node[b, ph] = (complex(p, q) / v[b, ph]).conjugate()
                else:
                    i_node[b, ph] = 0.0 + 0.0j
                accum[b, ph] = i_node[b, ph]
        for li in range(nl - 1, -1, -1):
            t = t_idx[li]
            f = f_idx[li]
            for ph in range(3):
                c = accum[t, ph]
                i_br[li, ph] = c
                accum[f, ph] += c
        return v, i_br, accum[0].copy(), sweeps, converged

    return sweep_numba


_numba_kernel = None


def _ensure_numba_kernel():
    global _numba_kernel
    if _numba_kernel is None:
        _numba_kernel = _make_numba_kernel()
    return _numba_kernel


def _node_currents(v, a2p, a1p, a0p, a2q, a1q, a0q, load_scale, inj_p, inj_q):
    vm = np.abs(v)
    p = load_scale * (a2p * vm * vm + a1p * vm + a0p) - inj_p
    q = load_scale * (a2q * vm * vm + a1q * vm + a0q) - inj_q
    s = p + 1j * q
    out = np.zeros_like(v)
    nz = s != 0
    out[nz] = np.conj(s[nz] / v[nz])
    return out


def sweep_numpy(f_idx, t_idx, z, level_starts, a2p, a1p, a0p, a2q, a1q, a0q,
                load_scale, inj_p, inj_q, src_v, tol, max_sweeps):
    """Vectorized sweep: levels of the tree are processed as array blocks."""
    n = a2p.shape[0]
    nl = f_idx.shape[0]
    v = np.empty((n, 3), dtype=np.complex128)
    v[:] = src_v
    i_br = np.zeros((nl, 3), dtype=np.complex128)
    nlev = len(level_starts) - 1
    sweeps = 0
    converged = nl == 0
    accum = np.zeros_like(v)
    while sweeps < max_sweeps:
        sweeps += 1
        accum = _node_currents(v, a2p, a1p, a0p, a2q, a1q, a0q,
                               load_scale, inj_p, inj_q)
        for lev in range(nlev - 1, -1, -1):
            a, b = level_starts[lev], level_starts[lev + 1]
            i_br[a:b] = accum[t_idx[a:b]]
            np.add.at(accum, f_idx[a:b], i_br[a:b])
        dv = 0.0
        for lev in range(nlev):
            a, b = level_starts[lev], level_starts[lev + 1]
            drop = np.einsum("lij,lj->li", z[a:b], i_br[a:b])
            nv = v[f_idx[a:b]] - drop
            diff = np.abs(nv - v[t_idx[a:b]])
            if diff.size:
                dv = max(dv, float(diff.max()))
            v[t_idx[a:b]] = nv
        if dv < tol:
            converged = True
            break
    accum = _node_currents(v, a2p, a1p, a0p, a2q, a1q, a0q,
                           load_scale, inj_p, inj_q)
    for lev in range(nlev - 1, -1, -1):
        a, b = level_starts[lev], level_starts[lev + 1]
        i_br[a:b] = accum[t_idx[a:b]]
        np.add.at(accum, f_idx[a:b], i_br[a:b])
    return v, i_br, accum[0].copy(), sweeps, converged


def run_sweep(compiled: CompiledNetwork, load_scale: float,
              inj_p: np.ndarray, inj_q: np.ndarray, src_v: np.ndarray,
              tol: float, max_sweeps: int, backend: str | None = None):
    """Dispatch one snapshot solve to the selected backend.

    Returns (voltages (n,3), branch currents (L,3), source current (3,),
    sweep count, converged flag); everything complex per-unit.
    """
    chosen = backend or BACKEND
    if chosen == "numba":
        kernel = _ensure_numba_kernel()
        return kernel(
            compiled.f_idx, compiled.t_idx, compiled.z_pu,
            compiled.a2p, compiled.a1p, compiled.a0p,
            compiled.a2q, compiled.a1q, compiled.a0q,
            float(load_scale), inj_p, inj_q, src_v, float(tol), int(max_sweeps),
        )
    if chosen == "numpy":
        return sweep_numpy(
            compiled.f_idx, compiled.t_idx, compiled.z_pu, compiled.level_starts,
            compiled.a2p, compiled.a1p, compiled.a0p,
            compiled.a2q, compiled.a1q, compiled.a0q,
            float(load_scale), inj_p, inj_q, src_v, float(tol), int(max_sweeps),
        )
    raise ValueError(f"unknown backend {chosen!r}")
