"""Training-free propagation of lifted node states along potential-gated rotor transports.

Pipeline: ``lift`` -> ``edge_geometry`` -> ``propagate``. Rotors and potentials
are computed once from the lifted states and reused at every layer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .algebra import BladeTable, bivector_exp, build_blade_table, node_norms, reversion_signs, sandwich_matrix
from .data import MAGDataset, dataset_hash
from .errors import ArgumentError, ConfigurationError, FormatError, NumericError, SizeError, StaleCacheError

LAYOUTS = ("block", "paired")
ROTOR_MODES = ("squared", "linear")
DEFAULT_EPS = 1e-6
DELTA_ROT = 1e-8
SPECTRUM_CAP = 4096


@dataclass(frozen=True, eq=False)
class LiftedState:
    """Node states ``H`` of shape ``(N, d, 2**K)`` and the channel partition into modality blocks."""

    H: np.ndarray
    blocks: tuple[int, ...]
    layout: str = "block"

    @property
    def K(self) -> int:
        return len(self.blocks)

    @property
    def table(self) -> BladeTable:
        return build_blade_table(self.K)


def even_blocks(d: int, K: int) -> tuple[int, ...]:
    base, extra = divmod(d, K)
    return tuple(base + (m < extra) for m in range(K))


def lift(ds: MAGDataset, layout: str = "block") -> LiftedState:
    """Place modality features on grade-1 blades and scale every node to unit Clifford norm.

    ``block``: channels ``[off_m, off_m + d_m)`` carry modality m on ``e_m``,
    so ``d = sum(d_m)``.
    ``paired``: every channel j carries ``sum_m x_m[j] e_m`` (needs equal d_m),
    so ``d = d_m`` and neighbouring channels can form bivectors.
    Nodes with all-zero input stay zero.
    """
    if layout not in LAYOUTS:
        raise ConfigurationError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    t = build_blade_table(ds.K)
    N = ds.n_nodes
    if layout == "block":
        d = ds.d
        H = np.zeros((N, d, t.n))
        off = 0
        for m, x in enumerate(ds.features):
            H[:, off : off + x.shape[1], m + 1] = x
            off += x.shape[1]
        blocks = ds.dims
    else:
        if len(set(ds.dims)) != 1:
            raise ConfigurationError(f"paired layout needs equal modality widths, got {ds.dims}")
        d = ds.dims[0]
        H = np.zeros((N, d, t.n))
        for m, x in enumerate(ds.features):
            H[:, :, m + 1] = x
        blocks = even_blocks(d, ds.K)
    norms = node_norms(H)
    nz = norms > 0
    H[nz] /= norms[nz, None, None]
    return LiftedState(H, tuple(blocks), layout)


@dataclass(frozen=True, eq=False)
class EdgeGeometry:
    """Per directed edge (CSR order): bivector, rotor, raw and row-normalised potential.

    ``transport[e]`` is the matrix of ``a -> R_e a reverse(R_e)``.
    """

    indptr: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    bivector: np.ndarray
    rotor: np.ndarray
    potential: np.ndarray
    normalized: np.ndarray
    transport: np.ndarray
    eps: float = DEFAULT_EPS
    rotor_mode: str = "squared"
    K: int = 2

    @property
    def n_nodes(self) -> int:
        return len(self.indptr) - 1

    @property
    def table(self) -> BladeTable:
        return build_blade_table(self.K)


def reverse_edge_index(indptr: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """For each directed CSR edge (u, v), the position of (v, u)."""
    N = len(indptr) - 1
    rows = np.repeat(np.arange(N), np.diff(indptr))
    keys = rows * N + indices
    return np.searchsorted(keys, indices * N + rows)


def segment_sum(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    """Sum consecutive CSR segments; empty rows give zeros. Fixed summation order."""
    N = len(indptr) - 1
    out = np.zeros((N,) + values.shape[1:], dtype=values.dtype)
    nonempty = np.diff(indptr) > 0
    if values.shape[0]:
        out[nonempty] = np.add.reduceat(values, indptr[:-1][nonempty], axis=0)
    return out


def _pair_terms(Hu: np.ndarray, Hv: np.ndarray, t: BladeTable) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scalar energy, squared bivector energy and channel-summed bivector for a chunk of edges."""
    P = np.einsum("eja,ejb,abk->ejk", Hu, Hv, t.cayley, optimize=True)
    g2 = t.grade_mask(2)
    s = np.sqrt(np.sum(P[:, :, 0] ** 2, axis=1))
    bsq = np.sum(P[:, :, g2] ** 2, axis=(1, 2))
    B = np.zeros((P.shape[0], t.n))
    B[:, g2] = P[:, :, g2].sum(axis=1)
    return s, bsq, B


def rotor_from_bivector(B: np.ndarray, t: BladeTable, mode: str = "squared", delta: float = DELTA_ROT) -> np.ndarray:
    """``exp(-B / (2|B|^2))`` (``squared``) or ``exp(-B / (2|B|))`` (``linear``); identity below ``delta``."""
    if mode not in ROTOR_MODES:
        raise ConfigurationError(f"unknown rotor mode {mode!r}; expected one of {ROTOR_MODES}")
    bn = np.sqrt(np.sum(B * B, axis=-1))
    live = bn > delta
    scale = np.zeros_like(bn)
    denom = 2.0 * (bn[live] ** 2 if mode == "squared" else bn[live])
    scale[live] = -1.0 / denom
    R = bivector_exp(B * scale[..., None], t)
    R[~live] = t.basis(0)
    return R


def edge_geometry(
    H0: LiftedState | np.ndarray,
    ds: MAGDataset,
    eps: float = DEFAULT_EPS,
    rotor_mode: str = "squared",
    use_rotor: bool = True,
    use_potential: bool = True,
    chunk: int = 8192,
) -> EdgeGeometry:
    """Potentials and rotors for every edge of ``ds`` from the states ``H0``.

    Terms are evaluated on the ``u < v`` orientation; the reverse edge gets the
    same potential, the negated bivector and the reversed rotor, so transports
    along (u, v) and (v, u) are exact inverses.
    """
    if eps <= 0:
        raise ArgumentError("eps must be positive")
    H = H0.H if isinstance(H0, LiftedState) else np.asarray(H0, dtype=float)
    K = int(np.log2(H.shape[-1]))
    t = build_blade_table(K)
    if H.shape[0] != ds.n_nodes:
        raise ConfigurationError(f"states cover {H.shape[0]} nodes, graph has {ds.n_nodes}")
    src = ds.rows()
    dst = ds.indices
    E = len(dst)
    fwd = np.flatnonzero(src < dst)
    rev = reverse_edge_index(ds.indptr, dst)

    potential = np.ones(E)
    bivector = np.zeros((E, t.n))
    for start in range(0, len(fwd), chunk):
        e = fwd[start : start + chunk]
        with np.errstate(over="ignore", invalid="ignore"):
            s, bsq, B = _pair_terms(H[src[e]], H[dst[e]], t)
            phi = np.exp(-bsq / (s + eps))
        bad = ~(np.isfinite(phi) & np.all(np.isfinite(B), axis=1))
        if np.any(bad):
            k = e[np.argmax(bad)]
            raise NumericError(f"non-finite geometry on edge ({src[k]}, {dst[k]})")
        potential[e] = phi
        bivector[e] = B
    back = np.flatnonzero(src > dst)
    potential[back] = potential[rev[back]]
    bivector[back] = -bivector[rev[back]]

    if not use_potential:
        potential = np.ones(E)
    if use_rotor:
        rotor = np.empty((E, t.n))
        rotor[fwd] = rotor_from_bivector(bivector[fwd], t, rotor_mode)
        rotor[back] = rotor[rev[back]] * reversion_signs(t)
    else:
        rotor = np.tile(t.basis(0), (E, 1))
    transport = sandwich_matrix(rotor, t) if E else np.zeros((0, t.n, t.n))
    geo = EdgeGeometry(ds.indptr, src, dst, bivector, rotor, potential, np.zeros(E), transport, eps, rotor_mode, K)
    return normalize_potentials(geo)


def normalize_potentials(geo: EdgeGeometry) -> EdgeGeometry:
    row = segment_sum(geo.potential, geo.indptr)
    return replace(geo, normalized=geo.potential / row[geo.src])


def transport_matrix(geo: EdgeGeometry, weights: np.ndarray | None = None) -> sp.bsr_matrix:
    """Block-sparse operator ``(N*n, N*n)`` with blocks ``w_e * transport[e]`` at (src, dst)."""
    n = geo.table.n
    N = geo.n_nodes
    w = geo.normalized if weights is None else weights
    data = geo.transport * w[:, None, None]
    return sp.bsr_matrix((data, geo.dst, geo.indptr), shape=(N * n, N * n), blocksize=(n, n))


def _to_rows(H: np.ndarray) -> np.ndarray:
    N, d, n = H.shape
    return np.ascontiguousarray(H.transpose(0, 2, 1)).reshape(N * n, d)


def _from_rows(X: np.ndarray, N: int, n: int) -> np.ndarray:
    return X.reshape(N, n, -1).transpose(0, 2, 1).copy()


@dataclass(frozen=True, eq=False)
class PropagationStack:
    """All propagated layers ``H^(0..L)``, shape ``(L+1, N, d, 2**K)``."""

    layers: np.ndarray
    alpha: float
    eps: float = DEFAULT_EPS
    blocks: tuple[int, ...] = ()
    settings: dict = field(default_factory=dict)
    graph_hash: str = ""

    @property
    def L(self) -> int:
        return self.layers.shape[0] - 1

    @property
    def K(self) -> int:
        return int(np.log2(self.layers.shape[-1]))

    @property
    def d(self) -> int:
        return self.layers.shape[2]

    @property
    def n_nodes(self) -> int:
        return self.layers.shape[1]


def propagate(
    H0: LiftedState | np.ndarray,
    geo: EdgeGeometry,
    L: int,
    alpha: float = 0.5,
    literal: bool = False,
) -> PropagationStack:
    """``H^l = (1 - alpha) H^(l-1) + alpha * sum_v phi~_uv T_uv(H_v^(l-1))``.

    ``literal=True`` uses ``H^(l-1) + sum_v ...`` instead (no damping).
    Isolated nodes keep their previous state.
    """
    if L < 0:
        raise ArgumentError("depth L must be non-negative")
    if not literal and not 0.0 < alpha <= 1.0:
        raise ArgumentError("damping alpha must lie in (0, 1]")
    H = H0.H if isinstance(H0, LiftedState) else np.asarray(H0, dtype=float)
    blocks = H0.blocks if isinstance(H0, LiftedState) else ()
    N, d, n = H.shape
    A = transport_matrix(geo)
    has_nb = np.diff(geo.indptr) > 0
    layers = np.empty((L + 1, N, d, n))
    layers[0] = H
    for l in range(1, L + 1):
        prev = layers[l - 1]
        agg = _from_rows(A @ _to_rows(prev), N, n)
        cur = prev.copy()
        with np.errstate(over="ignore", invalid="ignore"):
            if literal:
                cur[has_nb] = prev[has_nb] + agg[has_nb]
            else:
                cur[has_nb] = (1.0 - alpha) * prev[has_nb] + alpha * agg[has_nb]
        if not np.all(np.isfinite(cur)):
            raise NumericError(f"non-finite node state at layer {l}")
        layers[l] = cur
    return PropagationStack(layers, alpha, geo.eps, tuple(blocks))


def dirichlet_energy(H: np.ndarray, geo: EdgeGeometry, chunk: int = 8192) -> float:
    """``1/2 * sum over directed edges of phi_uv * ||H_u - T_uv(H_v)||^2`` using raw potentials."""
    total = 0.0
    for start in range(0, len(geo.dst), chunk):
        sl = slice(start, start + chunk)
        moved = np.einsum("ekl,ejl->ejk", geo.transport[sl], H[geo.dst[sl]])
        diff = H[geo.src[sl]] - moved
        total += float(np.dot(geo.potential[sl], np.sum(diff * diff, axis=(1, 2))))
    return 0.5 * total


def energy_trace(stack: PropagationStack, geo: EdgeGeometry) -> np.ndarray:
    return np.array([dirichlet_energy(H, geo) for H in stack.layers])


def normalized_laplacian(geo: EdgeGeometry) -> np.ndarray:
    """Dense symmetric ``I - D^-1/2 A_T D^-1/2`` on one channel, shape ``(N*n, N*n)``.

    Rows of isolated nodes are zero. The full operator on ``(N, d, n)`` states is
    this matrix repeated on every channel.
    """
    n = geo.table.n
    N = geo.n_nodes
    deg = segment_sum(geo.potential, geo.indptr)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    w = geo.potential * inv_sqrt[geo.src] * inv_sqrt[geo.dst]
    A = transport_matrix(geo, w).toarray()
    active = np.repeat(deg > 0, n).astype(float)
    Lm = np.diag(active) - A
    return 0.5 * (Lm + Lm.T)


def geometric_laplacian_spectrum(geo: EdgeGeometry, d: int = 1) -> np.ndarray:
    """Sorted eigenvalues of the potential-induced Laplacian on flattened ``(N, d, n)`` states."""
    n = geo.table.n
    size = geo.n_nodes * d * n
    if size > SPECTRUM_CAP:
        raise SizeError(f"dense spectrum needs N*d*2^K <= {SPECTRUM_CAP}, got {size}")
    per_channel = np.linalg.eigvalsh(normalized_laplacian(geo))
    return np.sort(np.repeat(per_channel, d))


def manifold_divergence(Ha: np.ndarray, geo_a: EdgeGeometry, Hb: np.ndarray, geo_b: EdgeGeometry) -> float:
    """State deviation plus summed edge-wise potential and rotor deviations."""
    state = float(np.sqrt(np.sum((Ha - Hb) ** 2)))
    pot = float(np.sum(np.abs(geo_a.potential - geo_b.potential)))
    rot = float(np.sum(np.sqrt(np.sum((geo_a.rotor - geo_b.rotor) ** 2, axis=1))))
    return state + pot + rot


# ---------------------------------------------------------------------------
# CGP1 stack cache
#
#   magic "CGP1" | u32 version | u32 K | u64 N | u64 d | u32 L | f64 alpha | f64 eps
#   32-byte graph hash | u32 json length | json settings (utf-8)
#   layer-major little-endian float64 payload, (L+1) x N x d x 2^K
# ---------------------------------------------------------------------------

CGP_MAGIC = b"CGP1"
CGP_VERSION = 1
_CGP_HEAD = "<IIQQIdd32sI"


def stack_to_bytes(stack: PropagationStack) -> bytes:
    meta = json.dumps({"blocks": list(stack.blocks), **stack.settings}, sort_keys=True).encode()
    digest = bytes.fromhex(stack.graph_hash) if stack.graph_hash else b"\0" * 32
    head = CGP_MAGIC + struct.pack(
        _CGP_HEAD, CGP_VERSION, stack.K, stack.n_nodes, stack.d, stack.L, stack.alpha, stack.eps, digest, len(meta)
    )
    return head + meta + np.ascontiguousarray(stack.layers, dtype="<f8").tobytes()


def stack_from_bytes(buf: bytes) -> PropagationStack:
    if buf[:4] != CGP_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", "magic")
    hsize = struct.calcsize(_CGP_HEAD)
    if len(buf) < 4 + hsize:
        raise FormatError("file truncated inside header", "header")
    version, K, N, d, L, alpha, eps, digest, mlen = struct.unpack_from(_CGP_HEAD, buf, 4)
    if version != CGP_VERSION:
        raise FormatError(f"unsupported version {version}", "version")
    pos = 4 + hsize
    try:
        meta = json.loads(buf[pos : pos + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable settings block ({exc})", "settings") from None
    pos += mlen
    n = 2**K
    count = (L + 1) * N * d * n
    if len(buf) - pos != 8 * count:
        raise FormatError(f"expected {8 * count} payload bytes, found {len(buf) - pos}", "layers")
    layers = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(L + 1, N, d, n).astype(float)
    blocks = tuple(meta.pop("blocks", ()))
    graph_hash = digest.hex() if any(digest) else ""
    return PropagationStack(layers, alpha, eps, blocks, meta, graph_hash)


def save_stack(stack: PropagationStack, path) -> None:
    Path(path).write_bytes(stack_to_bytes(stack))


def load_stack(path, expect_hash: str | None = None, expect_settings: dict | None = None) -> PropagationStack:
    stack = stack_from_bytes(Path(path).read_bytes())
    if expect_hash is not None and stack.graph_hash != expect_hash:
        raise StaleCacheError(f"cache {path} was built from a different dataset; rerun precompute")
    if expect_settings is not None:
        diff = {k: (stack.settings.get(k), v) for k, v in expect_settings.items() if stack.settings.get(k) != v}
        if diff:
            raise StaleCacheError(f"cache {path} settings differ {diff}; rerun precompute")
    return stack


@dataclass(frozen=True)
class CGPSettings:
    L: int = 2
    alpha: float = 0.5
    eps: float = DEFAULT_EPS
    rotor_mode: str = "squared"
    layout: str = "block"
    literal: bool = False
    use_rotor: bool = True
    use_potential: bool = True

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def precompute(ds: MAGDataset, settings: CGPSettings = CGPSettings()) -> tuple[PropagationStack, EdgeGeometry]:
    """Lift, build edge geometry and propagate; the stack records settings and dataset hash."""
    if settings.rotor_mode not in ROTOR_MODES:
        raise ConfigurationError(f"unknown rotor mode {settings.rotor_mode!r}; expected one of {ROTOR_MODES}")
    H0 = lift(ds, settings.layout)
    geo = edge_geometry(
        H0, ds, settings.eps, settings.rotor_mode, use_rotor=settings.use_rotor, use_potential=settings.use_potential
    )
    stack = propagate(H0, geo, settings.L, settings.alpha, settings.literal)
    stack = replace(stack, settings=settings.as_dict(), graph_hash=dataset_hash(ds))
    return stack, geo
