"""Discretized photon modes, the truncated symmetric Fock basis and field operators.

A photon mode carries a momentum k, a helicity label, a quadrature weight w
and a real polarization vector.  Ladder operators are normalized so that
[a_i, a_j^dagger] = delta_ij / w_i, which turns Riemann sums of field
integrals into plain matrix sums (H_f = sum_i w_i |k_i| a_i^dagger a_i).

Fock states are stored as sorted tuples of mode indices, padded with the
sentinel value ``n_modes``.  A state with occupations {3: 2, 7: 1} is the row
(3, 3, 7, M, ...).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

OperatorMatrix = np.ndarray | sp.spmatrix

# Lebedev rules on the unit sphere, exact for polynomials of degree 3, 5 and 7.
_A1 = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
_A2 = np.array([[a, b, 0] for a in (1, -1) for b in (1, -1)]
               + [[a, 0, b] for a in (1, -1) for b in (1, -1)]
               + [[0, a, b] for a in (1, -1) for b in (1, -1)], float) / np.sqrt(2.0)
_A3 = np.array([[a, b, c] for a in (1, -1) for b in (1, -1) for c in (1, -1)], float) / np.sqrt(3.0)
_LEBEDEV = {
    6: ((_A1,), (1.0 / 6.0,)),
    14: ((_A1, _A3), (1.0 / 15.0, 3.0 / 40.0)),
    26: ((_A1, _A2, _A3), (1.0 / 21.0, 4.0 / 105.0, 9.0 / 280.0)),
}


def direction_rule(n_dir: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit directions and weights summing to 4*pi for a supported spherical design."""
    if n_dir not in _LEBEDEV:
        raise ValueError(f"n_dir must be one of {sorted(_LEBEDEV)}, got {n_dir}")
    orbits, weights = _LEBEDEV[n_dir]
    dirs = np.vstack(orbits)
    w = np.concatenate([np.full(len(o), wt) for o, wt in zip(orbits, weights)])
    return dirs, 4.0 * np.pi * w


def radial_rule(n_r: int, k_max: float, ir_scales: Sequence[float] | None = None,
                uv_panels: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes and weights on (0, k_max].

    Without ``ir_scales`` this is a plain n_r point rule.  With a decreasing
    sequence rho_0 > rho_1 > ... > rho_J every shell [rho_{j+1}, rho_j] and the
    innermost ball [0, rho_J] gets one node, so each renormalization scale sees
    its own shell of modes; the remaining nodes are split evenly over
    ``uv_panels`` equal panels of [rho_0, k_max].
    """
    if n_r < 1 or k_max <= 0:
        raise ValueError("need n_r >= 1 and k_max > 0")
    edges_ir: list[float] = []
    if ir_scales is not None and len(ir_scales) > 0:
        scales = np.asarray(ir_scales, float)
        if np.any(np.diff(scales) >= 0) or scales[-1] <= 0 or scales[0] >= k_max:
            raise ValueError("ir_scales must decrease strictly inside (0, k_max)")
        edges_ir = [0.0] + list(scales[::-1])
    panels: list[tuple[float, float, int]] = []
    for a, b in zip(edges_ir[:-1], edges_ir[1:]):
        panels.append((a, b, 1))
    n_uv = n_r - len(panels)
    lo = edges_ir[-1] if edges_ir else 0.0
    if n_uv < uv_panels:
        raise ValueError(f"n_r={n_r} leaves {n_uv} nodes for {uv_panels} uv panels")
    bounds = np.linspace(lo, k_max, uv_panels + 1)
    counts = [n_uv // uv_panels + (1 if i < n_uv % uv_panels else 0) for i in range(uv_panels)]
    for i, c in enumerate(counts):
        panels.append((bounds[i], bounds[i + 1], c))
    nodes, weights = [], []
    for a, b, c in panels:
        x, w = np.polynomial.legendre.leggauss(c)
        nodes.append(0.5 * (b - a) * x + 0.5 * (b + a))
        weights.append(0.5 * (b - a) * w)
    return np.concatenate(nodes), np.concatenate(weights)


def polarizations(directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Real transverse polarization pair for each unit direction.

    eps1 is Gram-Schmidt of a reference axis (z, or x when the direction is too
    close to z) against the direction; eps2 = khat x eps1.
    """
    khat = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    ref = np.tile([0.0, 0.0, 1.0], (len(khat), 1))
    near = np.abs(khat[:, 2]) > 0.9
    ref[near] = [1.0, 0.0, 0.0]
    e1 = ref - np.sum(ref * khat, axis=1, keepdims=True) * khat
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(khat, e1)
    return e1, e2


@dataclass(frozen=True, eq=False)
class ModeGrid:
    """Discrete photon modes: momenta, helicities, weights, polarizations."""

    k: np.ndarray
    helicity: np.ndarray
    weight: np.ndarray
    eps: np.ndarray
    uv_sigma: float = 1.0

    @property
    def n_modes(self) -> int:
        return len(self.weight)

    @cached_property
    def absk(self) -> np.ndarray:
        return np.linalg.norm(self.k, axis=1)

    def cutoff(self, theta: complex = 0.0) -> np.ndarray:
        """Gaussian cutoff Lambda(e^{-theta} k) = exp(-e^{-2 theta} |k|^2 / (2 sigma^2))."""
        return np.exp(-np.exp(-2.0 * theta) * self.absk ** 2 / (2.0 * self.uv_sigma ** 2))


def build_grid(n_r: int, n_dir: int, k_max: float, uv_sigma: float = 1.0,
               ir_scales: Sequence[float] | None = None, uv_panels: int = 1) -> ModeGrid:
    """Spherical product grid: radial nodes x directions x two helicities."""
    r, wr = radial_rule(n_r, k_max, ir_scales, uv_panels)
    dirs, wd = direction_rule(n_dir)
    e1, e2 = polarizations(dirs)
    ks, hel, ws, eps = [], [], [], []
    for ri, wri in zip(r, wr):
        for d, wdi, a, b in zip(dirs, wd, e1, e2):
            for lam, e in ((1, a), (2, b)):
                ks.append(ri * d)
                hel.append(lam)
                ws.append(wri * ri ** 2 * wdi)
                eps.append(e)
    return ModeGrid(np.array(ks), np.array(hel), np.array(ws), np.array(eps), float(uv_sigma))


def grid_from_arrays(k, weight, eps=None, helicity=None, uv_sigma: float = 1.0) -> ModeGrid:
    """Grid from explicit mode data; polarizations default to the helicity-1 choice."""
    k = np.atleast_2d(np.asarray(k, float))
    weight = np.asarray(weight, float).ravel()
    if helicity is None:
        helicity = np.ones(len(k), int)
    if eps is None:
        e1, e2 = polarizations(k)
        eps = np.where(np.asarray(helicity)[:, None] == 1, e1, e2)
    return ModeGrid(k, np.asarray(helicity, int), weight, np.atleast_2d(np.asarray(eps, float)),
                    float(uv_sigma))


def multiset_log_factorial(tuples: np.ndarray, sentinel: int) -> np.ndarray:
    """log prod_x (count of x)! for each padded sorted row."""
    tuples = np.atleast_2d(tuples)
    out = np.zeros(len(tuples))
    if tuples.shape[1] == 0:
        return out
    run = np.ones(len(tuples))
    for c in range(1, tuples.shape[1]):
        same = (tuples[:, c] == tuples[:, c - 1]) & (tuples[:, c] != sentinel)
        run = np.where(same, run + 1, 1.0)
        out += np.where(same, np.log(run), 0.0)
    return out


class FockBasis:
    """Occupation-number basis truncated in photon number and field energy.

    States with at least two photons are additionally capped by ``e_max_multi``
    when it is given; single photons are only limited by ``e_max``.
    """

    def __init__(self, grid: ModeGrid, n_max: int, e_max: float, e_max_multi: float | None = None,
                 max_dim: int = 20000):
        if grid.n_modes == 0:
            raise ValueError("empty mode grid")
        if n_max < 0 or not e_max > 0:
            raise ValueError("need n_max >= 0 and e_max > 0")
        self.grid = grid
        self.n_max = int(n_max)
        self.e_max = float(e_max)
        self.e_max_multi = None if e_max_multi is None else float(e_max_multi)
        self.max_dim = int(max_dim)
        self.sentinel = grid.n_modes
        width = max(self.n_max, 1)
        if float(self.sentinel + 1) ** width > 2.0 ** 62:
            raise ValueError("too many modes for the integer state encoding")
        self._width = width
        self.tuples = self._enumerate()
        self.n_photons = np.sum(self.tuples != self.sentinel, axis=1)
        kk = np.vstack([grid.k, np.zeros(3)])
        ak = np.append(grid.absk, 0.0)
        self.h_f = ak[self.tuples].sum(axis=1)
        self.p_f = kk[self.tuples].sum(axis=1)
        self.codes = self.encode(self.tuples)
        self._order = np.argsort(self.codes, kind="stable")
        self._sorted_codes = self.codes[self._order]

    @property
    def dim(self) -> int:
        return len(self.tuples)

    @property
    def width(self) -> int:
        return self._width

    def _cap(self, n: int) -> float:
        if n >= 2 and self.e_max_multi is not None:
            return min(self.e_max, self.e_max_multi)
        return self.e_max

    def _enumerate(self) -> np.ndarray:
        s = self.sentinel
        absk = self.grid.absk
        levels = [np.full((1, self._width), s, dtype=np.int64)]
        energies = [np.zeros(1)]
        total = 1
        prev, prev_e = levels[0], energies[0]
        for n in range(1, self.n_max + 1):
            last = prev[:, n - 2] if n >= 2 else np.full(len(prev), -1)
            cand_e = prev_e[:, None] + absk[None, :]
            ok = (np.arange(self.grid.n_modes)[None, :] >= last[:, None]) & (cand_e <= self._cap(n) + 1e-14)
            rows, modes = np.nonzero(ok)
            total += len(rows)
            if total > self.max_dim:
                raise ValueError(f"Fock basis exceeds max_dim={self.max_dim} (reached {total} at n={n})")
            new = prev[rows].copy()
            new[:, n - 1] = modes
            if len(new) == 0:
                break
            levels.append(new)
            energies.append(cand_e[rows, modes])
            prev, prev_e = new, cand_e[rows, modes]
        return np.vstack(levels)

    def encode(self, tuples: np.ndarray) -> np.ndarray:
        tuples = np.atleast_2d(tuples).astype(np.int64)
        base = self.sentinel + 1
        code = np.zeros(len(tuples), dtype=np.int64)
        for c in range(tuples.shape[1]):
            code = code * base + tuples[:, c]
        return code

    def lookup(self, tuples: np.ndarray) -> np.ndarray:
        """Basis index of each padded sorted row, -1 when absent."""
        tuples = np.atleast_2d(tuples)
        if tuples.shape[1] > self._width:
            extra = tuples[:, self._width:]
            fits = np.all(extra == self.sentinel, axis=1)
            tuples = tuples[:, :self._width]
        else:
            fits = np.ones(len(tuples), bool)
            if tuples.shape[1] < self._width:
                pad = np.full((len(tuples), self._width - tuples.shape[1]), self.sentinel)
                tuples = np.hstack([tuples, pad])
        codes = self.encode(tuples)
        pos = np.searchsorted(self._sorted_codes, codes)
        pos = np.clip(pos, 0, self.dim - 1)
        hit = (self._sorted_codes[pos] == codes) & fits
        return np.where(hit, self._order[pos], -1)

    def occupation(self, i: int) -> dict[int, int]:
        modes, counts = np.unique(self.tuples[i][self.tuples[i] != self.sentinel], return_counts=True)
        return {int(m): int(c) for m, c in zip(modes, counts)}

    @cached_property
    def log_fact(self) -> np.ndarray:
        """log prod_x n_x! per state."""
        return multiset_log_factorial(self.tuples, self.sentinel)

    @cached_property
    def removal_table(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """All single-photon removals (src, dst, mode, sqrt(n_mode/w_mode))."""
        s = self.sentinel
        srcs, dsts, modes = [], [], []
        for c in range(self._width):
            col = self.tuples[:, c]
            first = col != s
            if c > 0:
                first &= col != self.tuples[:, c - 1]
            idx = np.nonzero(first)[0]
            if len(idx) == 0:
                continue
            rem = np.delete(self.tuples[idx], c, axis=1)
            rem = np.hstack([rem, np.full((len(idx), 1), s)])
            dst = self.lookup(rem)
            srcs.append(idx)
            dsts.append(dst)
            modes.append(col[idx])
        if not srcs:
            e = np.zeros(0, int)
            return e, e, e, np.zeros(0)
        src = np.concatenate(srcs)
        dst = np.concatenate(dsts)
        mode = np.concatenate(modes)
        counts = np.sum(self.tuples[src] == mode[:, None], axis=1)
        amp = np.sqrt(counts / self.grid.weight[mode])
        return src, dst, mode, amp


def build_basis(grid: ModeGrid, n_max: int, e_max: float, e_max_multi: float | None = None,
                max_dim: int = 20000) -> FockBasis:
    return FockBasis(grid, n_max, e_max, e_max_multi, max_dim)


def ladder_ops(basis: FockBasis, mode_index: int) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Annihilation and (projected) creation operator of one mode."""
    if not 0 <= mode_index < basis.grid.n_modes:
        raise IndexError(f"mode index {mode_index} out of range")
    src, dst, mode, amp = basis.removal_table
    sel = mode == mode_index
    a = sp.csr_matrix((amp[sel], (dst[sel], src[sel])), shape=(basis.dim, basis.dim))
    return a, a.T.conj().tocsr()


def field_ops(grid: ModeGrid, basis: FockBasis) -> tuple[sp.dia_matrix, list[sp.dia_matrix]]:
    """Diagonal H_f and the three components of P_f."""
    if basis.grid is not grid:
        raise ValueError("basis was built on a different grid")
    h = sp.diags(basis.h_f)
    return h, [sp.diags(basis.p_f[:, c]) for c in range(3)]


CutoffProfile = Callable[[np.ndarray], np.ndarray]


def cosine_profile(x: np.ndarray) -> np.ndarray:
    """chi(x) = 1 for x <= 3/4, cos^2(2 pi (x - 3/4)) on (3/4, 1], 0 beyond."""
    x = np.asarray(x, float)
    mid = np.cos(2.0 * np.pi * (x - 0.75)) ** 2
    return np.where(x <= 0.75, 1.0, np.where(x > 1.0, 0.0, mid))


def chi_pair(h: np.ndarray, rho: float, profile: CutoffProfile = cosine_profile) -> tuple[np.ndarray, np.ndarray]:
    """Values of chi_rho and chibar_rho = sqrt(1 - chi_rho^2) at field energies h."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    c = profile(np.asarray(h, float) / rho)
    return c, np.sqrt(np.clip(1.0 - c * c, 0.0, 1.0))


def cutoff_ops(basis: FockBasis, rho: float, profile: CutoffProfile = cosine_profile):
    """Diagonal sharp indicator 1(H_f <= rho), chi_rho(H_f) and chibar_rho(H_f)."""
    c, cb = chi_pair(basis.h_f, rho, profile)
    sharp = (basis.h_f <= rho).astype(float)
    return sp.diags(sharp), sp.diags(c), sp.diags(cb)


def sub_basis(basis: FockBasis, rho: float) -> np.ndarray:
    """Indices of basis states with H_f <= rho, ordered by H_f (vacuum first).

    The ordering makes the sub-bases of decreasing scales nested prefixes.
    """
    idx = np.nonzero(basis.h_f <= rho * (1 + 1e-14))[0]
    return idx[np.argsort(basis.h_f[idx], kind="stable")]


def log_factorial(n) -> np.ndarray:
    return gammaln(np.asarray(n, float) + 1.0)
