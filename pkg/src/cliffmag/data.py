"""Multimodal-attributed graph datasets: model, synthetic generator, corruption, file IO."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ArgumentError, ConfigurationError, FormatError, GenerationError

SPLIT_NAMES = ("train", "val", "test")


def csr_from_edges(n_nodes: int, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric, loop-free, de-duplicated CSR arrays from an edge list of shape (m, 2)."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n_nodes):
        raise ArgumentError("edge endpoint out of range")
    edges = edges[edges[:, 0] != edges[:, 1]]
    both = np.concatenate([edges, edges[:, ::-1]])
    keys = np.unique(both[:, 0] * n_nodes + both[:, 1])
    rows, cols = np.divmod(keys, n_nodes)
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_nodes), out=indptr[1:])
    return indptr, cols.astype(np.int64)


@dataclass(frozen=True, eq=False)
class MAGDataset:
    """Graph topology in CSR form plus one feature matrix per modality.

    ``edge_splits`` (optional) holds undirected positive edges ``(u < v)``
    reserved for link prediction.
    """

    indptr: np.ndarray
    indices: np.ndarray
    features: tuple[np.ndarray, ...]
    labels: Optional[np.ndarray] = None
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    edge_splits: Optional[dict[str, np.ndarray]] = None

    @property
    def n_nodes(self) -> int:
        return len(self.indptr) - 1

    @property
    def K(self) -> int:
        return len(self.features)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(int(x.shape[1]) for x in self.features)

    @property
    def d(self) -> int:
        return sum(self.dims)

    @property
    def n_edges(self) -> int:
        """Number of undirected edges."""
        return len(self.indices) // 2

    def rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_nodes), np.diff(self.indptr))

    def edges(self) -> np.ndarray:
        """Undirected edge list with ``u < v``, shape (m, 2)."""
        rows = self.rows()
        keep = rows < self.indices
        return np.stack([rows[keep], self.indices[keep]], axis=1)

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def concat_features(self) -> np.ndarray:
        return np.concatenate(self.features, axis=1)

    def with_edges(self, edges: np.ndarray) -> "MAGDataset":
        indptr, indices = csr_from_edges(self.n_nodes, edges)
        return replace(self, indptr=indptr, indices=indices)

    def train_graph(self) -> "MAGDataset":
        """Topology restricted to the link-prediction training edges (all edges if none)."""
        if not self.edge_splits:
            return self
        return self.with_edges(self.edge_splits["train"])

    def validate(self) -> None:
        n = self.n_nodes
        if self.indptr[0] != 0 or np.any(np.diff(self.indptr) < 0) or self.indptr[-1] != len(self.indices):
            raise FormatError("row pointers are not a valid CSR prefix sum", "indptr")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= n):
            raise FormatError("column index out of range", "indices")
        rows = self.rows()
        if np.any(rows == self.indices):
            raise FormatError("self-loops are not stored", "indices")
        fwd = rows * n + self.indices
        if np.any(np.diff(fwd) <= 0):
            raise FormatError("rows must be sorted without duplicates", "indices")
        back = np.sort(self.indices * n + rows)
        if not np.array_equal(fwd, back):
            raise FormatError("adjacency is not symmetric", "indices")
        for m, x in enumerate(self.features):
            if x.ndim != 2 or x.shape[0] != n:
                raise FormatError(f"expected {n} rows, got shape {x.shape}", f"features[{m}]")
        if self.labels is not None and len(self.labels) != n:
            raise FormatError(f"expected {n} labels, got {len(self.labels)}", "labels")
        seen = np.zeros(n, dtype=bool)
        for name, idx in self.splits.items():
            if len(idx) and (idx.min() < 0 or idx.max() >= n):
                raise FormatError("node index out of range", f"splits.{name}")
            if np.any(seen[idx]) or len(np.unique(idx)) != len(idx):
                raise FormatError("splits overlap", f"splits.{name}")
            seen[idx] = True

    def equals(self, other: "MAGDataset") -> bool:
        return to_bytes(self) == to_bytes(other)


@dataclass(frozen=True)
class SynthConfig:
    n_nodes: int = 600
    n_classes: int = 4
    K: int = 2
    dims: tuple[int, ...] = (16, 16)
    p_in: float = 0.03
    p_out: float = 0.02
    signal_split: tuple[float, ...] = (0.5, 0.5)
    rho: float = 0.3
    signal: float = 2.0
    noise: float = 1.0
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    edge_split_fractions: tuple[float, float, float] = (0.85, 0.05, 0.10)
    seed: int = 0

    def check(self) -> None:
        if self.K not in (2, 3):
            raise ConfigurationError(f"K={self.K} unsupported")
        if len(self.dims) != self.K or len(self.signal_split) != self.K:
            raise ConfigurationError("dims and signal_split need one entry per modality")
        for name in ("p_in", "p_out", "rho"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name}={v} outside [0, 1]")
        if self.n_classes < 1 or self.n_nodes < self.n_classes:
            raise ConfigurationError("every class needs at least one node")
        if any(s < 0 for s in self.signal_split) or any(d < 1 for d in self.dims):
            raise ConfigurationError("signal split must be non-negative and dims positive")


def class_sizes(n_nodes: int, n_classes: int) -> np.ndarray:
    base, extra = divmod(n_nodes, n_classes)
    return np.array([base + (c < extra) for c in range(n_classes)], dtype=np.int64)


def _sample_pairs(rng: np.random.Generator, n_pairs: int, p: float) -> np.ndarray:
    m = rng.binomial(n_pairs, p) if n_pairs else 0
    if m == 0:
        return np.empty(0, dtype=np.int64)
    if m == n_pairs:
        return np.arange(n_pairs, dtype=np.int64)
    return np.sort(rng.choice(n_pairs, size=m, replace=False)).astype(np.int64)


def _sbm_edges(rng: np.random.Generator, sizes: np.ndarray, p_in: float, p_out: float) -> np.ndarray:
    starts = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for a in range(len(sizes)):
        na = int(sizes[a])
        # pairs i < j inside block a, enumerated row by row
        row_start = np.arange(na, dtype=np.int64) * na - np.arange(na, dtype=np.int64) * (np.arange(na) + 1) // 2
        k = _sample_pairs(rng, na * (na - 1) // 2, p_in)
        i = np.searchsorted(row_start, k, side="right") - 1
        j = i + 1 + (k - row_start[i])
        out.append(np.stack([i + starts[a], j + starts[a]], axis=1))
        for b in range(a + 1, len(sizes)):
            nb = int(sizes[b])
            k = _sample_pairs(rng, na * nb, p_out)
            i, j = np.divmod(k, nb)
            out.append(np.stack([i + starts[a], j + starts[b]], axis=1))
    return np.concatenate(out) if out else np.empty((0, 2), dtype=np.int64)


def _split(rng: np.random.Generator, n: int, fractions: Sequence[float]) -> list[np.ndarray]:
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return [np.sort(perm[:n_train]), np.sort(perm[n_train : n_train + n_val]), np.sort(perm[n_train + n_val :])]


def generate_synthetic(cfg: SynthConfig) -> MAGDataset:
    cfg.check()
    sizes = class_sizes(cfg.n_nodes, cfg.n_classes)
    pairs_in = int(np.sum(sizes * (sizes - 1) // 2))
    pairs_out = (cfg.n_nodes * (cfg.n_nodes - 1)) // 2 - pairs_in
    if cfg.p_in * pairs_in + cfg.p_out * pairs_out == 0:
        raise GenerationError("expected degree is zero; raise p_in or p_out")

    rng = np.random.default_rng(cfg.seed)
    labels = np.repeat(np.arange(cfg.n_classes), sizes)
    edges = _sbm_edges(rng, sizes, cfg.p_in, cfg.p_out)
    indptr, indices = csr_from_edges(cfg.n_nodes, edges)

    base_noise = rng.normal(size=(cfg.n_nodes, max(cfg.dims)))
    features = []
    for m, dm in enumerate(cfg.dims):
        means = rng.normal(size=(cfg.n_classes, dm)) / np.sqrt(dm)
        own = rng.normal(size=(cfg.n_nodes, dm))
        if m == 0:
            eps = base_noise[:, :dm]
        else:
            shared = min(dm, cfg.dims[0])
            eps = own.copy()
            eps[:, :shared] = cfg.rho * base_noise[:, :shared] + np.sqrt(1.0 - cfg.rho**2) * own[:, :shared]
        x = np.sqrt(cfg.signal_split[m]) * cfg.signal * means[labels] + cfg.noise * eps
        features.append(x)

    train, val, test = _split(rng, cfg.n_nodes, cfg.split_fractions)
    ds = MAGDataset(indptr, indices, tuple(features), labels.astype(np.int64), dict(zip(SPLIT_NAMES, (train, val, test))))
    und = ds.edges()
    if len(und):
        parts = _split(rng, len(und), cfg.edge_split_fractions)
        ds = replace(ds, edge_splits={name: und[idx] for name, idx in zip(SPLIT_NAMES, parts)})
    return ds


def homophily(ds: MAGDataset) -> float:
    """Fraction of undirected edges joining same-label nodes."""
    e = ds.edges()
    if len(e) == 0:
        return float("nan")
    return float(np.mean(ds.labels[e[:, 0]] == ds.labels[e[:, 1]]))


@dataclass(frozen=True)
class CorruptionSpec:
    feature_drop_rate: tuple[float, ...] = (0.0, 0.0)
    edge_drop_rate: float = 0.0
    seed: int = 0

    def check(self, K: int) -> None:
        if len(self.feature_drop_rate) != K:
            raise ArgumentError(f"need {K} feature drop rates, got {len(self.feature_drop_rate)}")
        for r in (*self.feature_drop_rate, self.edge_drop_rate):
            if not 0.0 <= r <= 1.0:
                raise ArgumentError(f"rate {r} outside [0, 1]")


def apply_corruption(ds: MAGDataset, spec: CorruptionSpec) -> MAGDataset:
    """Zero whole feature rows per (node, modality) and drop undirected edges, i.i.d."""
    spec.check(ds.K)
    rng = np.random.default_rng(spec.seed)
    features = []
    for x, rate in zip(ds.features, spec.feature_drop_rate):
        drop = rng.random(ds.n_nodes) < rate
        y = x.copy()
        y[drop] = 0.0
        features.append(y)
    edges = ds.edges()
    keep = rng.random(len(edges)) >= spec.edge_drop_rate
    indptr, indices = csr_from_edges(ds.n_nodes, edges[keep])
    return replace(ds, indptr=indptr, indices=indices, features=tuple(features))


# ---------------------------------------------------------------------------
# MAG1 binary container
#
#   magic "MAG1" | u32 version | u32 K | u64 n_nodes | K x u64 d_m | u32 n_sections
#   n_sections x (8-byte ascii name, u64 offset, u64 nbytes)
#   section payloads: little-endian int64 / float64, row-major
# ---------------------------------------------------------------------------

MAG_MAGIC = b"MAG1"
MAG_VERSION = 1
_I8 = np.dtype("<i8")
_F8 = np.dtype("<f8")


def _sections(ds: MAGDataset) -> list[tuple[str, np.ndarray]]:
    secs = [("indptr", ds.indptr.astype(_I8)), ("indices", ds.indices.astype(_I8))]
    secs += [(f"feat{m}", np.ascontiguousarray(x, dtype=_F8)) for m, x in enumerate(ds.features)]
    if ds.labels is not None:
        secs.append(("labels", ds.labels.astype(_I8)))
    for name in SPLIT_NAMES:
        if name in ds.splits:
            secs.append((name, np.asarray(ds.splits[name]).astype(_I8)))
    if ds.edge_splits:
        for name in SPLIT_NAMES:
            secs.append(("e" + name, np.asarray(ds.edge_splits[name]).astype(_I8).reshape(-1)))
    return secs


def to_bytes(ds: MAGDataset) -> bytes:
    secs = _sections(ds)
    header = MAG_MAGIC + struct.pack("<IIQ", MAG_VERSION, ds.K, ds.n_nodes)
    header += struct.pack(f"<{ds.K}Q", *ds.dims) + struct.pack("<I", len(secs))
    offset = len(header) + 24 * len(secs)
    table = b""
    for name, arr in secs:
        table += name.encode("ascii").ljust(8, b"\0") + struct.pack("<QQ", offset, arr.nbytes)
        offset += arr.nbytes
    return header + table + b"".join(arr.tobytes() for _, arr in secs)


def dataset_hash(ds: MAGDataset) -> str:
    return hashlib.sha256(to_bytes(ds)).hexdigest()


def save_mag(ds: MAGDataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def _unpack(fmt: str, buf: bytes, pos: int, what: str):
    size = struct.calcsize(fmt)
    if pos + size > len(buf):
        raise FormatError("file truncated inside header", what)
    return struct.unpack_from(fmt, buf, pos), pos + size


def from_bytes(buf: bytes) -> MAGDataset:
    if buf[:4] != MAG_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", "magic")
    (version, K, n), pos = _unpack("<IIQ", buf, 4, "version/K/n_nodes")
    if version != MAG_VERSION:
        raise FormatError(f"unsupported version {version}", "version")
    if K not in (2, 3):
        raise FormatError(f"unsupported K={K}", "K")
    dims, pos = _unpack(f"<{K}Q", buf, pos, "dims")
    (n_sec,), pos = _unpack("<I", buf, pos, "n_sections")
    sections = {}
    for _ in range(n_sec):
        (raw, off, nbytes), pos = _unpack("<8sQQ", buf, pos, "section table")
        name = raw.rstrip(b"\0").decode("ascii", errors="replace")
        if off + nbytes > len(buf):
            raise FormatError(f"section extends past end of file ({off + nbytes} > {len(buf)})", name)
        sections[name] = (off, nbytes)

    def take(name: str, dtype: np.dtype, count: int | None = None) -> np.ndarray:
        if name not in sections:
            raise FormatError("missing section", name)
        off, nbytes = sections[name]
        if nbytes % dtype.itemsize or (count is not None and nbytes != count * dtype.itemsize):
            raise FormatError(f"size {nbytes} bytes inconsistent with header", name)
        return np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=off).astype(dtype.newbyteorder("="))

    indptr = take("indptr", _I8, n + 1)
    indices = take("indices", _I8, int(indptr[-1]) if len(indptr) else None)
    features = tuple(take(f"feat{m}", _F8, n * dims[m]).reshape(n, dims[m]) for m in range(K))
    labels = take("labels", _I8, n) if "labels" in sections else None
    splits = {s: take(s, _I8) for s in SPLIT_NAMES if s in sections}
    edge_splits = None
    if all("e" + s in sections for s in SPLIT_NAMES):
        edge_splits = {s: take("e" + s, _I8).reshape(-1, 2) for s in SPLIT_NAMES}
    ds = MAGDataset(indptr, indices, features, labels, splits, edge_splits)
    ds.validate()
    return ds


def load_mag(path) -> MAGDataset:
    return from_bytes(Path(path).read_bytes())


def load_text_mag(
    feature_paths: Sequence[str | Path],
    edge_path: str | Path,
    labels_path: str | Path | None = None,
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> MAGDataset:
    """Build a dataset from whitespace-separated text matrices (one per modality) and an edge list."""
    features = tuple(np.atleast_2d(np.loadtxt(p, dtype=float)) for p in feature_paths)
    n = features[0].shape[0]
    if any(x.shape[0] != n for x in features):
        raise FormatError("feature files disagree on the number of nodes", "features")
    edges = np.loadtxt(edge_path, dtype=np.int64, ndmin=2)
    indptr, indices = csr_from_edges(n, edges)
    labels = np.loadtxt(labels_path, dtype=np.int64) if labels_path is not None else None
    splits = dict(zip(SPLIT_NAMES, _split(np.random.default_rng(seed), n, split_fractions)))
    ds = MAGDataset(indptr, indices, features, labels, splits)
    ds.validate()
    return ds
