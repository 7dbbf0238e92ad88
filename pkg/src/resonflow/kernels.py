"""Wick kernels on the discrete mode grid.

A generalized Wick monomial

    W_{m,n} = 1(H_f <= rho) sum_K prod(w) a*(K_c) w(H_f, P_f, K) a(K_a) 1(H_f <= rho)

is stored through its samples w(S; C, A): S is the spectator Fock state seen by
the kernel (its field energy and momentum are the arguments r, l), C and A are
the sorted multisets of creation and annihilation modes.  On a finite
occupation basis every matrix has exactly one such representation whose
creation and annihilation groups never share a mode (``decompose``); that
canonical form is what the flow stores and serializes.
"""

from __future__ import annotations

import itertools
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .fockspace import FockBasis, chi_pair, cosine_profile, multiset_log_factorial, sub_basis


@dataclass(eq=False)
class WickKernel:
    m: int
    n: int
    spectator: np.ndarray  # basis index of S
    create: np.ndarray  # (K, m) sorted modes
    annihilate: np.ndarray  # (K, n) sorted modes
    values: np.ndarray  # (K,) complex

    def __post_init__(self):
        self.spectator = np.asarray(self.spectator, np.int64).ravel()
        k = len(self.spectator)
        self.create = np.asarray(self.create, np.int64).reshape(k, self.m)
        self.annihilate = np.asarray(self.annihilate, np.int64).reshape(k, self.n)
        self.values = np.asarray(self.values, complex).ravel()

    def __len__(self) -> int:
        return len(self.values)

    def r(self, basis: FockBasis) -> np.ndarray:
        return basis.h_f[self.spectator]

    def l(self, basis: FockBasis) -> np.ndarray:
        return basis.p_f[self.spectator]


@dataclass(eq=False)
class KernelFamily:
    rho: float
    E: complex
    kernels: dict[tuple[int, int], WickKernel] = field(default_factory=dict)

    def get(self, m: int, n: int) -> WickKernel | None:
        return self.kernels.get((m, n))


def empty_kernel(m: int, n: int) -> WickKernel:
    return WickKernel(m, n, np.zeros(0, int), np.zeros((0, m), int), np.zeros((0, n), int), np.zeros(0))


def _pad(t: np.ndarray, width: int, s: int) -> np.ndarray:
    if t.shape[1] >= width:
        return t
    return np.hstack([t, np.full((len(t), width - t.shape[1]), s, dtype=t.dtype)])


def wick_log_factor(basis: FockBasis, spect: np.ndarray, create: np.ndarray, annihilate: np.ndarray):
    """Matrix-element factor of a kernel sample, and the out/in basis indices.

    <S+C| W |S+A> = m! n! / (C! A!) * sqrt((S+C)! (S+A)!) / S! * prod_{C,A} sqrt(w) * w(S; C, A)
    where X! is prod_x (count_x)!.  Returns (log factor, out, in), -1 for states
    outside the basis.
    """
    s = basis.sentinel
    m, n = create.shape[1], annihilate.shape[1]
    st = basis.tuples[spect]
    out_t = np.sort(np.concatenate([st, create], axis=1), axis=1)
    in_t = np.sort(np.concatenate([st, annihilate], axis=1), axis=1)
    out = basis.lookup(out_t)
    inn = basis.lookup(in_t)
    lw = np.log(np.append(basis.grid.weight, 1.0))
    lf = (math.lgamma(m + 1) + math.lgamma(n + 1)
          - _mlf(create, s) - _mlf(annihilate, s)
          + 0.5 * (_mlf(out_t, s) + _mlf(in_t, s)) - basis.log_fact[spect]
          + 0.5 * (lw[create].sum(axis=1) + lw[annihilate].sum(axis=1)))
    return lf, out, inn


def _mlf(t: np.ndarray, s: int) -> np.ndarray:
    if t.shape[1] == 0:
        return np.zeros(len(t))
    return multiset_log_factorial(np.sort(t, axis=1), s)


class WickTable:
    """Canonical (m, n, S, C, A, factor) data for every ordered pair of a sub-basis."""

    def __init__(self, basis: FockBasis, rho: float):
        self.basis = basis
        self.rho = float(rho)
        self.sub = sub_basis(basis, rho)
        D = len(self.sub)
        s = basis.sentinel
        w = basis.width
        t = basis.tuples[self.sub]
        # rank of each entry among equal modes in its own tuple
        rank = np.zeros_like(t)
        for c in range(1, w):
            same = t[:, c] == t[:, c - 1]
            rank[:, c] = np.where(same, rank[:, c - 1] + 1, 0)
        valid = t != s
        out_t = np.repeat(t, D, axis=0)
        in_t = np.tile(t, (D, 1))
        out_rank = np.repeat(rank, D, axis=0)
        in_rank = np.tile(rank, (D, 1))
        out_valid = np.repeat(valid, D, axis=0)
        in_valid = np.tile(valid, (D, 1))
        cnt_in = (out_t[:, :, None] == in_t[:, None, :]).sum(axis=2)
        cnt_out = (in_t[:, :, None] == out_t[:, None, :]).sum(axis=2)
        out_shared = out_valid & (cnt_in > out_rank)
        in_shared = in_valid & (cnt_out > in_rank)
        self.m = (out_valid & ~out_shared).sum(axis=1).astype(np.int8)
        self.n = (in_valid & ~in_shared).sum(axis=1).astype(np.int8)
        big = s
        spect_t = np.sort(np.where(out_shared, out_t, big), axis=1)
        self.create = np.sort(np.where(out_valid & ~out_shared, out_t, big), axis=1)
        self.annihilate = np.sort(np.where(in_valid & ~in_shared, in_t, big), axis=1)
        spect = basis.lookup(spect_t)
        if np.any(spect < 0):
            raise RuntimeError("basis is not closed under photon removal")
        self.spectator = spect
        lw = np.log(np.append(basis.grid.weight, 1.0))
        lf_out = np.repeat(basis.log_fact[self.sub], D)
        lf_in = np.tile(basis.log_fact[self.sub], D)
        lmf = np.array([math.lgamma(k + 1) for k in range(2 * w + 2)])
        self.log_factor = (lmf[self.m] + lmf[self.n]
                           - multiset_log_factorial(self.create, s)
                           - multiset_log_factorial(self.annihilate, s)
                           + 0.5 * (lf_out + lf_in) - basis.log_fact[spect]
                           + 0.5 * (lw[self.create].sum(axis=1) + lw[self.annihilate].sum(axis=1)))
        self.factor = np.exp(self.log_factor).reshape(D, D)
        self.order = (self.m + self.n).reshape(D, D)
        ak = np.append(basis.grid.absk, 1.0)
        self.sqrt_k = np.sqrt(ak[self.create].prod(axis=1) * ak[self.annihilate].prod(axis=1)).reshape(D, D)

    @property
    def dim(self) -> int:
        return len(self.sub)

    def mask(self, m_max: int | None) -> np.ndarray | None:
        if m_max is None or m_max >= 2 * self.basis.n_max:
            return None
        return self.order <= m_max

    def types(self) -> list[tuple[int, int]]:
        pairs = set(zip(self.m.tolist(), self.n.tolist()))
        return sorted(pairs)


_TABLES: dict[tuple[int, float], WickTable] = {}


def wick_table(basis: FockBasis, rho: float) -> WickTable:
    key = (id(basis), round(float(rho), 15))
    tab = _TABLES.get(key)
    if tab is None or tab.basis is not basis:
        if len(_TABLES) > 32:
            _TABLES.clear()
        tab = WickTable(basis, rho)
        _TABLES[key] = tab
    return tab


def decompose(basis: FockBasis, rho: float, A: np.ndarray, m_max: int | None = None,
              atol: float = 0.0) -> tuple[KernelFamily, float]:
    """Canonical Wick kernels of a matrix on {H_f <= rho}.

    Returns the family (kernels with m + n <= m_max) and the summed half-norm of
    the dropped kernels.
    """
    tab = wick_table(basis, rho)
    D = tab.dim
    A = np.asarray(A)
    if A.shape != (D, D):
        raise ValueError(f"matrix shape {A.shape} does not match sub-basis dimension {D}")
    E = complex(A[0, 0])
    vals = (A / tab.factor).ravel().copy()
    diag = np.arange(D) * (D + 1)
    vals[diag] -= E
    fam = KernelFamily(float(rho), E)
    dropped = 0.0
    flat_m, flat_n = tab.m, tab.n
    for m, n in tab.types():
        sel = (flat_m == m) & (flat_n == n)
        if m == 0 and n == 0:
            idx = diag
        else:
            idx = np.nonzero(sel & (np.abs(vals) > atol))[0]
        k = WickKernel(m, n, tab.spectator[idx], tab.create[idx, :m], tab.annihilate[idx, :n], vals[idx])
        if m_max is not None and m + n > m_max:
            dropped += half_norm(k, basis)
            continue
        fam.kernels[(m, n)] = k
    return fam, dropped


def assemble_monomial(basis: FockBasis, k: WickKernel, rho: float) -> np.ndarray:
    """Dense matrix of one Wick monomial on {H_f <= rho}, creation left of annihilation."""
    sub = sub_basis(basis, rho)
    pos = np.full(basis.dim, -1)
    pos[sub] = np.arange(len(sub))
    M = np.zeros((len(sub), len(sub)), complex)
    if k.m + k.n > 2 * basis.n_max:
        warnings.warn(f"W_{k.m},{k.n} exceeds the photon-number reach of the basis; zero matrix")
        return M
    if len(k) == 0:
        return M
    s = basis.sentinel
    lf, out, inn = wick_log_factor(basis, k.spectator, _pad(k.create, k.m, s), _pad(k.annihilate, k.n, s))
    ok = (out >= 0) & (inn >= 0)
    ok[ok] &= (pos[out[ok]] >= 0) & (pos[inn[ok]] >= 0)
    np.add.at(M, (pos[out[ok]], pos[inn[ok]]), np.exp(lf[ok]) * k.values[ok])
    return M


def evaluate_family(basis: FockBasis, fam: KernelFamily) -> np.ndarray:
    """H[w, E] = sum of monomials + E on {H_f <= rho}."""
    sub = sub_basis(basis, fam.rho)
    M = fam.E * np.eye(len(sub), dtype=complex)
    for k in fam.kernels.values():
        M += assemble_monomial(basis, k, fam.rho)
    return M


def half_norm(k: WickKernel, basis: FockBasis) -> float:
    """sup |w| / sqrt(prod |k_C| prod |k_A|); the plain sup norm when m = n = 0."""
    if len(k) == 0:
        return 0.0
    ak = basis.grid.absk
    den = np.sqrt(ak[k.create].prod(axis=1) * ak[k.annihilate].prod(axis=1))
    return float(np.max(np.abs(k.values) / den))


def tuple_measure(basis: FockBasis, rho: float, m: int) -> float:
    """V_m: summed weight of ordered m-tuples of modes forming a state with H_f <= rho."""
    if m == 0:
        return 1.0
    sub = sub_basis(basis, rho)
    sel = sub[basis.n_photons[sub] == m]
    if len(sel) == 0:
        return 0.0
    t = basis.tuples[sel][:, :m]
    lw = np.log(basis.grid.weight)[t].sum(axis=1)
    return float(np.sum(np.exp(math.lgamma(m + 1) - basis.log_fact[sel] + lw)))


def monomial_bound(basis: FockBasis, k: WickKernel, rho: float) -> dict:
    """Operator-norm bound ||W_{m,n}|| <= ||w||_{1/2} sqrt(V_m V_n) rho^{(m+n)/2}.

    Also reports the continuum form (8 pi)^{(m+n)/2} rho^{2(m+n)} ||w||_{1/2} and the
    ratio of the two (the discretization-adjusted constant).
    """
    hn = half_norm(k, basis)
    vm, vn = tuple_measure(basis, rho, k.m), tuple_measure(basis, rho, k.n)
    disc = hn * math.sqrt(vm * vn) * rho ** ((k.m + k.n) / 2)
    cont = hn * (8 * math.pi) ** ((k.m + k.n) / 2) * rho ** (2 * (k.m + k.n))
    return {"half_norm": hn, "bound": disc, "continuum_bound": cont,
            "adjusted_constant": disc / cont if cont > 0 else 0.0}


def operator_norm(A: np.ndarray) -> float:
    """Spectral norm, computed on the nonzero rows and columns only.

    Blocks larger than 400 use a Lanczos estimate of the top singular value.
    """
    A = np.asarray(A)
    rows = np.nonzero(np.any(A != 0, axis=1))[0]
    cols = np.nonzero(np.any(A != 0, axis=0))[0]
    if len(rows) == 0:
        return 0.0
    B = A[np.ix_(rows, cols)]
    if min(B.shape) > 400:
        try:
            s = spla.svds(B, k=1, tol=1e-14, return_singular_vectors=False, random_state=0)
            return float(s[0])
        except spla.ArpackNoConvergence:
            pass
    return float(np.linalg.norm(B, 2))


def symmetrize(k: WickKernel) -> WickKernel:
    """Average samples over permutations inside the creation and annihilation groups."""
    c = np.sort(k.create, axis=1)
    a = np.sort(k.annihilate, axis=1)
    keys = np.hstack([k.spectator[:, None], c, a])
    if len(keys) == 0:
        return WickKernel(k.m, k.n, k.spectator, c, a, k.values)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    tot = np.zeros(len(uniq), complex)
    cnt = np.zeros(len(uniq))
    np.add.at(tot, inv, k.values)
    np.add.at(cnt, inv, 1.0)
    return WickKernel(k.m, k.n, uniq[:, 0], uniq[:, 1:1 + k.m], uniq[:, 1 + k.m:], tot / cnt)


def kernel_from_function(basis: FockBasis, rho: float, m: int, n: int, func) -> WickKernel:
    """Sample w(r, l, K_c, K_a) on every admissible (S; C, A) of {H_f <= rho}.

    ``func`` receives arrays r (K,), l (K, 3), create modes (K, m) and
    annihilation modes (K, n) and returns K complex values.  Intended for small
    validation problems; coincident creation/annihilation modes are included.
    """
    sub = sub_basis(basis, rho)
    s = basis.sentinel
    groups = {}
    for size in {m, n}:
        sel = np.nonzero(basis.n_photons == size)[0]
        groups[size] = basis.tuples[sel][:, :size] if size else np.zeros((1, 0), int)
    spects, cs, as_ = [], [], []
    for S in sub:
        st = basis.tuples[S][None, :]
        C, A = groups[m], groups[n]
        oc = basis.lookup(np.sort(np.hstack([np.repeat(st, len(C), 0), _pad(C, C.shape[1], s)]), axis=1))
        ia = basis.lookup(np.sort(np.hstack([np.repeat(st, len(A), 0), _pad(A, A.shape[1], s)]), axis=1))
        okc = np.nonzero((oc >= 0) & (basis.h_f[np.maximum(oc, 0)] <= rho))[0]
        oka = np.nonzero((ia >= 0) & (basis.h_f[np.maximum(ia, 0)] <= rho))[0]
        if len(okc) == 0 or len(oka) == 0:
            continue
        ci, ai = np.meshgrid(okc, oka, indexing="ij")
        spects.append(np.full(ci.size, S))
        cs.append(C[ci.ravel()])
        as_.append(A[ai.ravel()])
    if not spects:
        return empty_kernel(m, n)
    sp_ = np.concatenate(spects)
    c = np.vstack(cs)
    a = np.vstack(as_)
    vals = np.asarray(func(basis.h_f[sp_], basis.p_f[sp_], c, a), complex)
    return WickKernel(m, n, sp_, c, a, vals)


# ---------------------------------------------------------------------------
# contraction combinatorics and pull-through shifts


def contraction_multiplicity(M, N, m, n) -> int:
    """C^{M,N}_{m,n} = prod_i binom(M_i, m_i) binom(N_i, n_i)."""
    out = 1
    for Mi, Ni, mi, ni in zip(M, N, m, n):
        out *= math.comb(Mi, mi) * math.comb(Ni, ni)
    return out


def pull_through_shifts(create: list, annihilate: list):
    """Argument shifts of the factors of a product after normal ordering.

    ``create[i]`` and ``annihilate[i]`` list the uncontracted creation and
    annihilation momenta of factor i (0-based).  For factor i the kernel
    argument is shifted by the creations of later factors and the annihilations
    of earlier ones (r_i, l_i); the resolvent to its right additionally sees
    its own annihilations (rt_i, lt_i).
    """
    L = len(create)
    if len(annihilate) != L:
        raise ValueError("create and annihilate must list the same factors")
    ck = [np.reshape(np.asarray(c, float), (-1, 3)) for c in create]
    ak = [np.reshape(np.asarray(a, float), (-1, 3)) for a in annihilate]
    e_c = np.array([np.linalg.norm(c, axis=1).sum() for c in ck])
    e_a = np.array([np.linalg.norm(a, axis=1).sum() for a in ak])
    v_c = np.array([c.sum(axis=0) for c in ck]).reshape(L, 3)
    v_a = np.array([a.sum(axis=0) for a in ak]).reshape(L, 3)
    r, rt = np.zeros(L), np.zeros(L)
    l, lt = np.zeros((L, 3)), np.zeros((L, 3))
    for i in range(L):
        later_c = slice(i + 1, L)
        r[i] = e_a[:i].sum() + e_c[later_c].sum()
        l[i] = v_a[:i].sum(axis=0) + v_c[later_c].sum(axis=0)
        rt[i] = e_a[:i + 1].sum() + e_c[later_c].sum()
        lt[i] = v_a[:i + 1].sum(axis=0) + v_c[later_c].sum(axis=0)
    return r, l, rt, lt


def _matchings(ann_legs: list[tuple[int, int]], cre_legs: list[tuple[int, int]]):
    """All pairings of annihilation legs with creation legs of strictly later vertices."""
    if not ann_legs:
        yield ()
        return
    first, rest = ann_legs[0], ann_legs[1:]
    for j, c in enumerate(cre_legs):
        if c[0] > first[0]:
            for tail in _matchings(rest, cre_legs[:j] + cre_legs[j + 1:]):
                yield ((first, c),) + tail


def contract_vacuum(basis: FockBasis, vertices: list, resolvents: list, modes=None) -> complex:
    """<Omega| V_0 R_0 V_1 R_1 ... V_{L-1} |Omega> by explicit Wick contraction.

    Each vertex is a list of ``(m, n, fn)`` terms where ``fn(S, C, A)`` returns
    the kernel value for the spectator multiset S and the sorted leg modes, or
    a ``("fixed", modes_c, modes_a)`` ladder string with fixed modes and unit
    kernel.  ``resolvents[i]`` maps the multiset of photons in flight between
    vertex i and i+1 to a complex number.  Free lines run over ``modes``
    (default: all modes).  Meant for small validation problems.
    """
    if modes is None:
        modes = range(basis.grid.n_modes)
    modes = list(modes)
    w = basis.grid.weight
    L = len(vertices)
    total = 0.0 + 0.0j
    choices = [v if isinstance(v, list) else [v] for v in vertices]
    for combo in itertools.product(*choices):
        ann, cre, fixed = [], [], {}
        for i, term in enumerate(combo):
            if term[0] == "fixed":
                _, fc, fa = term
                for q, mode in enumerate(fc):
                    cre.append((i, q))
                    fixed[("c", i, q)] = mode
                for q, mode in enumerate(fa):
                    ann.append((i, q))
                    fixed[("a", i, q)] = mode
            else:
                m, n, _ = term
                cre += [(i, q) for q in range(m)]
                ann += [(i, q) for q in range(n)]
        if len(ann) != len(cre):
            continue
        for match in _matchings(ann, cre):
            total += _sum_lines(basis, combo, match, fixed, resolvents, modes, w, L)
    return total


def _sum_lines(basis, combo, match, fixed, resolvents, modes, w, L):
    line_modes: list[list[int]] = []
    for (ai, aq), (ci, cq) in match:
        fa = fixed.get(("a", ai, aq))
        fc = fixed.get(("c", ci, cq))
        if fa is not None and fc is not None:
            line_modes.append([fa] if fa == fc else [])
        elif fa is not None:
            line_modes.append([fa])
        elif fc is not None:
            line_modes.append([fc])
        else:
            line_modes.append(modes)
    total = 0.0 + 0.0j
    for assign in itertools.product(*line_modes):
        val = 1.0 + 0.0j
        for t, ((ai, aq), (ci, cq)) in enumerate(match):
            # a contraction is 1/w; every kernel leg carries one factor w
            n_kernel_legs = (("a", ai, aq) not in fixed) + (("c", ci, cq) not in fixed)
            val *= w[assign[t]] ** (n_kernel_legs - 1)
        if val == 0:
            continue
        for i, term in enumerate(combo):
            if term[0] == "fixed":
                continue
            m, n, fn = term
            spect = sorted(assign[t] for t, ((ai, _), (ci, _)) in enumerate(match) if ai < i < ci)
            C = sorted(assign[t] for t, (_, (ci, _)) in enumerate(match) if ci == i)
            A = sorted(assign[t] for t, ((ai, _), _) in enumerate(match) if ai == i)
            val *= fn(tuple(spect), tuple(C), tuple(A))
            if val == 0:
                break
        if val == 0:
            continue
        for i in range(L - 1):
            flight = sorted(assign[t] for t, ((ai, _), (ci, _)) in enumerate(match) if ai <= i < ci)
            val *= resolvents[i](tuple(flight))
        total += val
    return total


# ---------------------------------------------------------------------------
# re-Wick ordering of one decimation step


@dataclass
class RewickReport:
    neumann_ratio: float
    neumann_tail: float
    dropped_mass: float
    min_resolvent_denominator: float
    growth: dict = field(default_factory=dict)


def decimate_matrix(H: np.ndarray, h_in: np.ndarray, rho_new: float, *, l_max: int | None = 4,
                    profile=cosine_profile, mu: float | None = None, mask: np.ndarray | None = None,
                    with_q: bool = False, ratio: bool = True):
    """One smooth Feshbach step of H on {H_f <= rho} down to {H_f <= rho_new}.

    T is the diagonal of H (the (0,0) kernel plus E), P = chi_{rho_new}(H_f).
    With ``l_max`` the inverse on ran Pbar is replaced by the Neumann series
    up to L = l_max factors; ``l_max=None`` solves exactly.  Returns the new
    matrix on the states with H_f <= rho_new and a report dict.  ``ratio=False``
    skips the spectral norms of the Neumann diagnostics.
    """
    D = len(h_in)
    t = np.diag(H).copy()
    chi, chib = chi_pair(h_in, rho_new, profile)
    out = np.nonzero(h_in <= rho_new * (1 + 1e-14))[0]
    bar = np.nonzero(chib > 0)[0]
    n = len(out)
    rep = {"dim_in": D, "dim_out": n, "dim_bar": len(bar)}
    if mu is not None:
        crit = np.nonzero(h_in >= 0.75 * rho_new)[0]
        if len(crit):
            den = np.abs(t[crit])
            i = int(np.argmin(den))
            rep["min_resolvent_denominator"] = float(den[i])
            if den[i] < mu * rho_new / 2:
                raise ValueError(f"resolvent denominator {den[i]:.3e} < mu*rho/2 = {mu * rho_new / 2:.3e} "
                                 f"at state {int(crit[i])} (H_f={h_in[crit[i]]:.4g})")
    # F = T + chi W chi on the output states; only states with chi < 1 need scaling
    if n and out[-1] == n - 1:
        F = H[:n, :n].copy()
    else:
        F = H[np.ix_(out, out)]
    soft = np.nonzero(chi[out] < 1.0)[0]
    if len(soft):
        F[soft, :] *= chi[out][soft][:, None]
        F[:, soft] *= chi[out][soft][None, :]
    F[np.arange(n), np.arange(n)] = t[out]
    if len(bar) and n:
        same = out[:, None] == bar[None, :]
        Wob = chi[out][:, None] * np.where(same, 0.0, H[np.ix_(out, bar)])
        Wbo = np.where(same.T, 0.0, H[np.ix_(bar, out)]) * chi[out][None, :]
        Wbb = H[np.ix_(bar, bar)].copy()
        Wbb[np.arange(len(bar)), np.arange(len(bar))] = 0.0
        if l_max is None:
            Hb = np.diag(t[bar]) + chib[bar][:, None] * Wbb * chib[bar][None, :]
            Y = np.linalg.solve(Hb, chib[bar][:, None] * Wbo)
            F -= Wob @ (chib[bar][:, None] * Y)
            if ratio:
                rep["neumann_ratio"] = float(np.linalg.norm((chib[bar] ** 2 / t[bar])[:, None] * Wbb, 2))
                rep["neumann_tail"] = 0.0
        else:
            R = chib[bar] ** 2 / t[bar]
            RW = R[:, None] * Wbb
            Y = R[:, None] * Wbo
            acc = np.zeros((len(bar), n), complex)
            # sum_L (-1)^L Wob (RW)^{L-2} R Wbo, accumulated on the small side
            for L in range(2, l_max + 1):
                acc += (-1) ** L * Y
                if L < l_max:
                    Y = RW @ Y
            F -= Wob @ acc
            if ratio:
                q = float(np.linalg.norm(RW, 2))
                rep["neumann_ratio"] = q
                last = float(np.linalg.norm(Wob @ Y, 2))
                rep["neumann_tail"] = last * q / (1 - q) if q < 1 else np.inf
                if q >= 1:
                    raise ValueError(f"Neumann ratio {q:.3g} >= 1")
    if mask is not None:
        F *= mask
    if with_q:
        return F, rep, (t, H - np.diag(t), chi, chib, out, bar)
    return F, rep


def rewick(basis: FockBasis, fam: KernelFamily, rho_new: float, *, l_max: int | None = 4, m_max: int | None = 2,
           mu: float | None = None, profile=cosine_profile) -> tuple[KernelFamily, RewickReport]:
    """Kernels of the Feshbach-decimated operator at scale rho_new.

    The normal-ordered output is obtained by evaluating the signed Neumann
    products on the occupation basis and re-reading them as canonical Wick
    kernels; output orders m + n > m_max are dropped and their half-norm mass
    is reported.
    """
    H = evaluate_family(basis, fam)
    sub = sub_basis(basis, fam.rho)
    F, rep = decimate_matrix(H, basis.h_f[sub], rho_new, l_max=l_max, profile=profile, mu=mu)
    new, dropped = decompose(basis, rho_new, F, m_max=m_max)
    growth = {}
    for (m, n), k in new.kernels.items():
        if m + n >= 1:
            hn = half_norm(k, basis)
            growth[(m, n)] = (hn ** (1.0 / (m + n)) * rho_new) if hn > 0 else 0.0
    report = RewickReport(rep.get("neumann_ratio", 0.0), rep.get("neumann_tail", 0.0), dropped,
                          rep.get("min_resolvent_denominator", np.nan), growth)
    return new, report


# ---------------------------------------------------------------------------
# binary snapshots
#
# little-endian layout, version 1:
#   header   b"RFKF" | u16 version | u16 reserved | f64 rho | f64 Re E | f64 Im E | u32 n_kernels
#   kernel   u16 m | u16 n | u64 K | i64 spectator[K] | i64 create[K*m] | i64 annihilate[K*n]
#            | f64 values[2K] (re, im interleaved)

SNAPSHOT_MAGIC = b"RFKF"
SNAPSHOT_VERSION = 1
_HEAD = struct.Struct("<4sHHdddI")
_KHEAD = struct.Struct("<HHQ")


def family_to_bytes(fam: KernelFamily) -> bytes:
    keys = sorted(fam.kernels)
    parts = [_HEAD.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, 0, float(fam.rho), complex(fam.E).real,
                        complex(fam.E).imag, len(keys))]
    for key in keys:
        k = fam.kernels[key]
        parts.append(_KHEAD.pack(k.m, k.n, len(k)))
        parts.append(k.spectator.astype("<i8").tobytes())
        parts.append(k.create.astype("<i8").tobytes())
        parts.append(k.annihilate.astype("<i8").tobytes())
        parts.append(k.values.astype("<c16").tobytes())
    return b"".join(parts)


def family_from_bytes(data: bytes) -> KernelFamily:
    if len(data) < _HEAD.size:
        raise ValueError("truncated kernel snapshot")
    magic, version, _, rho, er, ei, nk = _HEAD.unpack_from(data, 0)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError("not a kernel snapshot (bad magic)")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    off = _HEAD.size
    kernels = {}
    for _ in range(nk):
        m, n, K = _KHEAD.unpack_from(data, off)
        off += _KHEAD.size

        def take(count, dtype):
            nonlocal off
            size = np.dtype(dtype).itemsize * count
            if off + size > len(data):
                raise ValueError("truncated kernel snapshot")
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
            off += size
            return arr

        spect = take(K, "<i8")
        create = take(K * m, "<i8").reshape(K, m)
        ann = take(K * n, "<i8").reshape(K, n)
        vals = take(K, "<c16")
        kernels[(m, n)] = WickKernel(m, n, spect.copy(), create.copy(), ann.copy(), vals.copy())
    if off != len(data):
        raise ValueError("trailing bytes in kernel snapshot")
    return KernelFamily(rho, complex(er, ei), kernels)


def write_family(path, fam: KernelFamily) -> None:
    with open(path, "wb") as fh:
        fh.write(family_to_bytes(fam))


def read_family(path) -> KernelFamily:
    with open(path, "rb") as fh:
        return family_from_bytes(fh.read())
