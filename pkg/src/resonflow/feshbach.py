"""Smooth Feshbach-Schur map on finite matrices.

For a pair (H, T) with W = H - T and a hermitian 0 <= P <= 1 commuting with T,

    F_P(H, T) = T + P W P - P W Pbar (H_Pbar)^{-1} Pbar W P,   H_Pbar = T + Pbar W Pbar,
    Q_P(H, T) = P - Pbar (H_Pbar)^{-1} Pbar W P,

where Pbar = sqrt(1 - P^2) and the inverse is taken on ran Pbar.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

RANGE_TOL = 1e-12
INVERTIBLE_TOL = 1e-10


def _dense(A) -> np.ndarray:
    return np.asarray(A.toarray() if hasattr(A, "toarray") else A, dtype=complex)


def _sqrt_complement(P: np.ndarray) -> np.ndarray:
    if np.allclose(P, np.diag(np.diag(P)), atol=0):
        d = np.clip(1.0 - np.diag(P).real ** 2, 0.0, 1.0)
        return np.diag(np.sqrt(d)).astype(complex)
    vals, vecs = np.linalg.eigh(P)
    vals = np.sqrt(np.clip(1.0 - vals ** 2, 0.0, 1.0))
    return (vecs * vals) @ vecs.conj().T


def _range(A: np.ndarray, tol: float = RANGE_TOL) -> np.ndarray:
    """Orthonormal basis of ran A (left singular vectors above tol)."""
    if np.allclose(A, np.diag(np.diag(A)), atol=0):
        idx = np.nonzero(np.abs(np.diag(A)) > tol)[0]
        U = np.zeros((len(A), len(idx)), complex)
        U[idx, np.arange(len(idx))] = 1.0
        return U
    u, s, _ = np.linalg.svd(A)
    return u[:, s > tol]


@dataclass(eq=False)
class FeshbachPair:
    H: np.ndarray
    T: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        self.H = _dense(self.H)
        self.T = _dense(self.T)
        self.P = _dense(self.P)
        n = len(self.H)
        if self.H.shape != (n, n) or self.T.shape != (n, n) or self.P.shape != (n, n):
            raise ValueError("H, T and P must be square of equal size")
        if not np.all(np.isfinite(self.H)) or not np.all(np.isfinite(self.T)):
            raise ValueError("non-finite entries")
        if not np.allclose(self.P, self.P.conj().T, atol=1e-12):
            raise ValueError("P must be hermitian")
        ev = np.linalg.eigvalsh(self.P)
        if ev.min() < -1e-12 or ev.max() > 1 + 1e-12:
            raise ValueError("spectrum of P must lie in [0, 1]")
        self.Pbar = _sqrt_complement(self.P)
        if np.linalg.norm(self.P) == 0 or np.linalg.norm(self.Pbar) < RANGE_TOL:
            raise ValueError("P and Pbar must both be nonzero")
        scale = max(1.0, np.linalg.norm(self.T))
        for name, X in (("P", self.P), ("Pbar", self.Pbar)):
            if np.linalg.norm(self.T @ X - X @ self.T) > 1e-12 * scale:
                raise ValueError(f"T does not commute with {name}")
        self.W = self.H - self.T
        self.U_bar = _range(self.Pbar)
        self.U_p = _range(self.P)

    @property
    def H_bar(self) -> np.ndarray:
        """T + Pbar W Pbar."""
        return self.T + self.Pbar @ self.W @ self.Pbar

    def shifted(self, z: complex) -> "FeshbachPair":
        eye = np.eye(len(self.H))
        return FeshbachPair(self.H - z * eye, self.T - z * eye, self.P)


@dataclass
class PairReport:
    passed: bool
    t_invertible: bool
    hbar_invertible: bool
    t_min_sv: float
    hbar_min_sv: float
    norm_tinv_w: float  # ||T^{-1} Pbar W Pbar||
    norm_w_tinv: float  # ||Pbar W T^{-1} Pbar||
    norm_tinv_wp: float  # ||T^{-1} Pbar W P||
    messages: list[str] = field(default_factory=list)


def _restricted_min_sv(A: np.ndarray, U: np.ndarray) -> tuple[float, float]:
    if U.shape[1] == 0:
        return np.inf, 0.0
    R = U.conj().T @ A @ U
    s = np.linalg.svd(R, compute_uv=False)
    return float(s[-1]), float(s[0])


def verify_pair(pair: FeshbachPair, tol: float = INVERTIBLE_TOL) -> PairReport:
    """Invertibility of T and H_Pbar on ran Pbar and the three sufficient-criterion norms."""
    U = pair.U_bar
    msgs = []
    t_min, t_max = _restricted_min_sv(pair.T, U)
    t_ok = t_min > tol * max(t_max, 1e-300)
    h_min, h_max = _restricted_min_sv(pair.H_bar, U)
    h_ok = h_min > tol * max(h_max, 1e-300)
    if not t_ok:
        msgs.append("T not invertible on ran Pbar")
    if not h_ok:
        msgs.append("H_Pbar not invertible on ran Pbar")
    n1 = n2 = n3 = np.inf
    if t_ok:
        Tinv = U @ np.linalg.inv(U.conj().T @ pair.T @ U) @ U.conj().T
        Pb, W = pair.Pbar, pair.W
        n1 = float(np.linalg.norm(Tinv @ Pb @ W @ Pb, 2))
        n2 = float(np.linalg.norm(Pb @ W @ Tinv @ Pb, 2))
        n3 = float(np.linalg.norm(Tinv @ Pb @ W @ pair.P, 2))
    passed = t_ok and h_ok
    return PairReport(passed, t_ok, h_ok, t_min, h_min, n1, n2, n3, msgs)


def _hbar_solve(pair: FeshbachPair, rhs: np.ndarray) -> np.ndarray:
    """Pbar-range solution X of H_Pbar X = rhs, with rhs in ran Pbar; returns U @ y."""
    U = pair.U_bar
    Hr = U.conj().T @ pair.H_bar @ U
    s = np.linalg.svd(Hr, compute_uv=False)
    if len(s) and s[-1] <= INVERTIBLE_TOL * s[0]:
        cond = s[0] / s[-1] if s[-1] > 0 else np.inf
        raise np.linalg.LinAlgError(f"H_Pbar numerically singular on ran Pbar (condition {cond:.3e})")
    return U @ np.linalg.solve(Hr, U.conj().T @ rhs)


def feshbach_map(pair: FeshbachPair, check_neumann: bool = True) -> np.ndarray:
    """F_P(H, T) as a matrix on the full space (it is supported on ran P)."""
    P, Pb, W, T = pair.P, pair.Pbar, pair.W, pair.T
    F = T + P @ W @ P
    if pair.U_bar.shape[1] == 0:
        return F
    X = _hbar_solve(pair, Pb @ W @ P)
    corr = P @ W @ Pb @ X
    F = F - corr
    if check_neumann:
        pair._neumann_residual = _neumann_residual(pair, corr)
    return F


def _neumann_residual(pair: FeshbachPair, corr: np.ndarray, max_terms: int = 200) -> float | None:
    """Difference between the direct correction and its Neumann series, when the series converges."""
    U = pair.U_bar
    Tr = U.conj().T @ pair.T @ U
    Tinv = U @ np.linalg.inv(Tr) @ U.conj().T
    K = Tinv @ pair.Pbar @ pair.W @ pair.Pbar
    q = np.linalg.norm(K, 2)
    if not q < 1:
        return None
    P, Pb, W = pair.P, pair.Pbar, pair.W
    term = Tinv @ Pb @ W @ P
    acc = np.zeros_like(term)
    for _ in range(max_terms):
        acc += term
        term = -K @ term
        if np.linalg.norm(term) < 1e-16 * max(1.0, np.linalg.norm(acc)):
            break
    return float(np.linalg.norm(P @ W @ Pb @ acc - corr))


def q_operator(pair: FeshbachPair) -> np.ndarray:
    """Q_P(H, T) = P - Pbar H_Pbar^{-1} Pbar W P."""
    P, Pb = pair.P, pair.Pbar
    if pair.U_bar.shape[1] == 0:
        return P.copy()
    return P - Pb @ _hbar_solve(pair, Pb @ pair.W @ P)


def restrict_to_range(F: np.ndarray, pair: FeshbachPair) -> np.ndarray:
    U = pair.U_p
    return U.conj().T @ F @ U


def schur_complement(H: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Classical Schur complement of H onto the index set ``keep``."""
    H = _dense(H)
    keep = np.asarray(keep)
    drop = np.setdiff1d(np.arange(len(H)), keep)
    A = H[np.ix_(keep, keep)]
    if len(drop) == 0:
        return A
    return A - H[np.ix_(keep, drop)] @ np.linalg.solve(H[np.ix_(drop, drop)], H[np.ix_(drop, keep)])


@dataclass
class IsoReport:
    z: np.ndarray
    sv_h: np.ndarray  # relative smallest singular value of H - z
    sv_f: np.ndarray  # relative smallest singular value of F on ran P
    valid: np.ndarray  # pair condition satisfied at z
    tol: float

    @property
    def singular_h(self) -> np.ndarray:
        return self.sv_h < self.tol

    @property
    def singular_f(self) -> np.ndarray:
        return self.sv_f < self.tol

    @property
    def mismatches(self) -> int:
        v = self.valid
        return int(np.sum(self.singular_h[v] != self.singular_f[v]))

    @property
    def agree(self) -> bool:
        return self.mismatches == 0


def _rel_min_sv(A: np.ndarray) -> float:
    s = np.linalg.svd(A, compute_uv=False)
    return float(s[-1] / max(s[0], 1e-300))


def isospectrality_check(pair: FeshbachPair, z_grid, tol: float = 1e-9) -> IsoReport:
    """Compare near-singularity of H - z and of F_P(H - z, T - z) on ran P over a z grid."""
    z_grid = np.asarray(z_grid, complex).ravel()
    sv_h = np.full(len(z_grid), np.nan)
    sv_f = np.full(len(z_grid), np.nan)
    valid = np.zeros(len(z_grid), bool)
    for i, z in enumerate(z_grid):
        try:
            pz = pair.shifted(z)
            if not verify_pair(pz).passed:
                continue
            F = restrict_to_range(feshbach_map(pz, check_neumann=False), pz)
        except (ValueError, np.linalg.LinAlgError):
            continue
        valid[i] = True
        sv_h[i] = _rel_min_sv(pz.H)
        sv_f[i] = _rel_min_sv(F)
    return IsoReport(z_grid, sv_h, sv_f, valid, tol)
