"""Geometric algebra kernel for Cl(K,0), K in {2, 3}.

Multivectors are plain ``numpy`` arrays whose last axis holds the 2^K blade
coefficients, so a single multivector has shape ``(2**K,)`` and a node state
with ``d`` channels has shape ``(d, 2**K)``. Every operation broadcasts over
leading axes and acts channel-wise.

Blades are ordered graded-lexicographically::

    K=2: 1, e1, e2, e12
    K=3: 1, e1, e2, e3, e12, e13, e23, e123
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations

import numpy as np

from .errors import ArgumentError, ConfigurationError, DimensionError, InvariantViolation

SUPPORTED_K = (2, 3)
ROTOR_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class BladeTable:
    """Multiplication table of Cl(K,0).

    ``index[i, j]`` is the blade produced by ``blade_i * blade_j`` and
    ``sign[i, j]`` its sign. ``cayley`` is the same data as a dense
    ``(n, n, n)`` tensor, used for vectorised products.
    """

    K: int
    blades: tuple[tuple[int, ...], ...]
    grades: np.ndarray
    index: np.ndarray
    sign: np.ndarray
    cayley: np.ndarray

    @property
    def n(self) -> int:
        return len(self.blades)

    def grade_mask(self, g: int) -> np.ndarray:
        return self.grades == g

    def blade_name(self, i: int) -> str:
        b = self.blades[i]
        return "1" if not b else "e" + "".join(str(k) for k in b)

    def basis(self, i: int) -> np.ndarray:
        out = np.zeros(self.n)
        out[i] = 1.0
        return out

    def vector(self, k: int) -> np.ndarray:
        """Generator e_k (1-based)."""
        return self.basis(self.blades.index((k,)))


def _bitmask(blade: tuple[int, ...]) -> int:
    m = 0
    for k in blade:
        m |= 1 << (k - 1)
    return m


def _reorder_sign(a: int, b: int) -> int:
    # number of transpositions needed to bring the generators of a*b into canonical order
    a >>= 1
    swaps = 0
    while a:
        swaps += bin(a & b).count("1")
        a >>= 1
    return -1 if swaps & 1 else 1


@lru_cache(maxsize=None)
def build_blade_table(K: int) -> BladeTable:
    if K not in SUPPORTED_K:
        raise ConfigurationError(f"unsupported modality count K={K}; expected one of {SUPPORTED_K}")
    blades = tuple(b for g in range(K + 1) for b in combinations(range(1, K + 1), g))
    masks = [_bitmask(b) for b in blades]
    position = {m: i for i, m in enumerate(masks)}
    n = len(blades)
    index = np.empty((n, n), dtype=np.int64)
    sign = np.empty((n, n), dtype=np.int64)
    cayley = np.zeros((n, n, n))
    for i, a in enumerate(masks):
        for j, b in enumerate(masks):
            k = position[a ^ b]
            s = _reorder_sign(a, b)
            index[i, j] = k
            sign[i, j] = s
            cayley[i, j, k] = s
    grades = np.array([len(b) for b in blades])
    for arr in (grades, index, sign, cayley):
        arr.setflags(write=False)
    return BladeTable(K, blades, grades, index, sign, cayley)


def _check(a: np.ndarray, t: BladeTable, name: str = "operand") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 0 or a.shape[-1] != t.n:
        raise DimensionError(f"{name} has trailing size {a.shape[-1:] or ()} but Cl({t.K},0) needs {t.n}")
    return a


def geometric_product(a: np.ndarray, b: np.ndarray, t: BladeTable) -> np.ndarray:
    a = _check(a, t, "a")
    b = _check(b, t, "b")
    return np.einsum("...i,...j,ijk->...k", a, b, t.cayley)


def grade_project(a: np.ndarray, g: int, t: BladeTable) -> np.ndarray:
    a = _check(a, t)
    if not 0 <= g <= t.K:
        raise ArgumentError(f"grade {g} outside 0..{t.K}")
    return np.where(t.grade_mask(g), a, 0.0)


def clifford_norm(a: np.ndarray) -> float:
    """Euclidean norm over all blade coefficients (and all channels of a batch)."""
    a = np.asarray(a, dtype=float)
    return float(np.sqrt(np.sum(a * a)))


def node_norms(H: np.ndarray) -> np.ndarray:
    """Per-node Clifford norms of states shaped ``(N, d, n)``."""
    return np.sqrt(np.einsum("udk,udk->u", H, H))


def reversion_signs(t: BladeTable) -> np.ndarray:
    g = t.grades
    return np.where((g * (g - 1) // 2) % 2 == 0, 1.0, -1.0)


def reverse(a: np.ndarray, t: BladeTable) -> np.ndarray:
    return _check(a, t) * reversion_signs(t)


def bivector_exp(B: np.ndarray, t: BladeTable) -> np.ndarray:
    """exp(B) for a pure bivector, closed form ``cos|B| + B/|B| sin|B|``.

    Valid for K <= 3 where every bivector is simple and squares to ``-|B|^2``.
    Broadcasts over leading axes.
    """
    B = _check(B, t, "B")
    off = B[..., ~t.grade_mask(2)]
    if np.any(off != 0.0):
        raise ArgumentError("bivector_exp expects a pure grade-2 multivector")
    theta = np.sqrt(np.sum(B * B, axis=-1))
    safe = np.where(theta > 0.0, theta, 1.0)
    R = B * (np.sin(theta) / safe)[..., None]
    R[..., 0] = np.cos(theta)
    return R


def _check_unit(R: np.ndarray) -> None:
    norms = np.sqrt(np.sum(R * R, axis=-1))
    if np.any(np.abs(norms - 1.0) > ROTOR_TOL):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise InvariantViolation(f"rotor is not unit (|norm - 1| = {worst:.3g})")


def sandwich_matrix(R: np.ndarray, t: BladeTable, check: bool = True) -> np.ndarray:
    """Matrix ``M`` with ``M @ a == R a reverse(R)``; shape ``(..., n, n)``."""
    R = _check(R, t, "R")
    if check:
        _check_unit(R)
    Rrev = R * reversion_signs(t)
    # (R a)_p = R_i a_j C[i,j,p];  ((R a) R~)_k = (R a)_p R~_m C[p,m,k]
    left = np.einsum("...i,ijp->...pj", R, t.cayley)
    right = np.einsum("...m,pmk->...kp", Rrev, t.cayley)
    return right @ left


def sandwich(R: np.ndarray, a: np.ndarray, t: BladeTable) -> np.ndarray:
    """Apply ``R a reverse(R)`` channel-wise; ``a`` may be a single multivector or a batch."""
    a = _check(a, t)
    M = sandwich_matrix(R, t)
    return a @ M.T
