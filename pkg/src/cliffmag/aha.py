"""Learnable fusion head over a precomputed propagation stack.

For every node and layer: grade energies -> sigmoid energy gate -> gated
states; a normalised consensus profile over layers; resonance attention over
layers against that profile; attention-weighted sum projected to ``d_f``.
Gradients are derived by hand (no autodiff).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .algebra import build_blade_table
from .errors import ArgumentError, ContractViolation, FormatError, NumericError

EPS_E = 1e-12
ABLATIONS = ("rotor", "potential", "energy", "consensus", "scale")


@dataclass(frozen=True)
class InteractionLayout:
    """Coefficient masks ``(G, d, 2**K)`` for every (grade, modality block) interaction channel.

    K=2 gives four channels in the order (g0,b1), (g0,b2), (g2,b1), (g2,b2).
    Grade-1 coefficients belong to no channel and are never gated.
    """

    K: int
    blocks: tuple[int, ...]
    masks: np.ndarray
    names: tuple[str, ...]

    @property
    def n_gates(self) -> int:
        return self.masks.shape[0]

    @property
    def d(self) -> int:
        return sum(self.blocks)


def interaction_layout(K: int, blocks: tuple[int, ...]) -> InteractionLayout:
    t = build_blade_table(K)
    if len(blocks) != K:
        raise ArgumentError(f"need {K} modality blocks, got {blocks}")
    d = sum(blocks)
    grades = (0, 2) if K == 2 else (0, 2, 3)
    masks, names = [], []
    starts = np.concatenate([[0], np.cumsum(blocks)])
    for g in grades:
        for m in range(K):
            mask = np.zeros((d, t.n))
            mask[starts[m] : starts[m + 1], t.grade_mask(g)] = 1.0
            masks.append(mask)
            names.append(f"g{g}_b{m + 1}")
    masks = np.array(masks)
    masks.setflags(write=False)
    return InteractionLayout(K, tuple(blocks), masks, tuple(names))


@dataclass(frozen=True)
class AHADims:
    K: int
    d: int
    L: int
    d_f: int = 64
    h: int = 64
    n_gates: int = 4

    @property
    def n(self) -> int:
        return 2**self.K

    @property
    def D(self) -> int:
        return self.d * self.n


@dataclass
class AHAParams:
    W_G: np.ndarray
    b_G: np.ndarray
    W_tau: np.ndarray
    b_tau: np.ndarray
    W_S: np.ndarray
    a_S: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def items(self):
        return [(name, getattr(self, name)) for name in self.names()]

    def copy(self) -> "AHAParams":
        return AHAParams(*(np.array(v, copy=True) for _, v in self.items()))

    def zeros_like(self) -> "AHAParams":
        return AHAParams(*(np.zeros_like(v) for _, v in self.items()))

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for _, v in self.items():
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def dims(self) -> AHADims:
        L1, d = self.W_tau.shape
        D = self.W_out.shape[1]
        n = D // d
        return AHADims(int(np.log2(n)), d, L1 - 1, self.W_out.shape[0], self.W_S.shape[0], self.W_G.shape[0])


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_params(seed: int, dims: AHADims) -> AHAParams:
    """Glorot-uniform matrices; consensus weights one; biases and attention vector zero."""
    if min(dims.d, dims.d_f, dims.h, dims.n_gates) < 1 or dims.L < 0:
        raise ArgumentError(f"invalid dimensions {dims}")
    rng = np.random.default_rng(seed)
    G, D, L1 = dims.n_gates, dims.D, dims.L + 1
    return AHAParams(
        W_G=glorot(rng, G, G),
        b_G=np.zeros(G),
        W_tau=np.ones((L1, dims.d)),
        b_tau=np.zeros((L1, dims.d)),
        W_S=glorot(rng, dims.h, 2 * D),
        a_S=np.zeros(dims.h),
        W_out=glorot(rng, dims.d_f, D),
        b_out=np.zeros(dims.d_f),
    )


# ---------------------------------------------------------------- building blocks


def grade_energy(H: np.ndarray, layout: InteractionLayout) -> np.ndarray:
    """Squared norm of every interaction channel; ``H`` is ``(..., d, n)``, result ``(..., G)``."""
    return np.einsum("...dk,gdk->...g", H * H, layout.masks, optimize=True)


def energy_gate(E: np.ndarray, W_G: np.ndarray, b_G: np.ndarray) -> np.ndarray:
    En = E / (E.sum(axis=-1, keepdims=True) + EPS_E)
    return expit(En @ W_G.T + b_G)


def gate_factors(alpha: np.ndarray, layout: InteractionLayout) -> np.ndarray:
    return 1.0 + np.einsum("...g,gdk->...dk", alpha - 1.0, layout.masks, optimize=True)


def apply_gate(H: np.ndarray, alpha: np.ndarray, layout: InteractionLayout) -> np.ndarray:
    return H * gate_factors(alpha, layout)


def consensus_profile(Ht: np.ndarray, W_tau: np.ndarray, b_tau: np.ndarray) -> np.ndarray:
    """Unit-norm ``sum_l (W_tau[l] * Ht[l] + b_tau[l])`` per node; ``Ht`` is ``(N, L+1, d, n)``."""
    S = np.einsum("ld,nldk->ndk", W_tau, Ht, optimize=True) + b_tau.sum(axis=0)[None, :, None]
    ns = np.sqrt(np.sum(S * S, axis=(1, 2)))
    return S / np.where(ns > 0, ns, 1.0)[:, None, None]


def softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(s - s.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def resonance_scores(ctx: np.ndarray, Ht: np.ndarray, W_S: np.ndarray, a_S: np.ndarray) -> np.ndarray:
    N, L1, d, n = Ht.shape
    D = d * n
    U = (ctx.reshape(N, D) @ W_S[:, :D].T)[:, None, :] + Ht.reshape(N, L1, D) @ W_S[:, D:].T
    return softmax(np.tanh(U) @ a_S)


def fuse(Ht: np.ndarray, beta: np.ndarray, W_out: np.ndarray, b_out: np.ndarray) -> np.ndarray:
    agg = np.einsum("nl,nldk->ndk", beta, Ht, optimize=True)
    return agg.reshape(len(agg), -1) @ W_out.T + b_out


# ---------------------------------------------------------------- forward / backward


@dataclass(eq=False)
class ForwardTape:
    H: np.ndarray
    E: np.ndarray
    En: np.ndarray
    Esum: np.ndarray
    alpha: np.ndarray
    F: np.ndarray
    Ht: np.ndarray
    S: np.ndarray | None
    ns: np.ndarray | None
    ctx: np.ndarray
    T: np.ndarray | None
    scores: np.ndarray | None
    beta: np.ndarray
    agg: np.ndarray
    ablation: frozenset
    params_digest: str


def _check_ablation(ablation) -> frozenset:
    ablation = frozenset(ablation)
    unknown = ablation - set(ABLATIONS)
    if unknown:
        raise ArgumentError(f"unknown ablation(s) {sorted(unknown)}; expected subset of {ABLATIONS}")
    return ablation


def node_states(layers: np.ndarray, nodes: np.ndarray | None = None) -> np.ndarray:
    """``(L+1, N, d, n)`` stack -> ``(N', L+1, d, n)`` for the selected nodes."""
    sel = layers if nodes is None else layers[:, nodes]
    return np.ascontiguousarray(sel.transpose(1, 0, 2, 3))


def forward(
    H: np.ndarray,
    params: AHAParams,
    layout: InteractionLayout,
    ablation=frozenset(),
) -> tuple[np.ndarray, ForwardTape]:
    """Fused outputs ``Z`` of shape ``(N, d_f)`` for node states ``H`` shaped ``(N, L+1, d, n)``."""
    ablation = _check_ablation(ablation)
    N, L1, d, n = H.shape
    if params.W_tau.shape != (L1, d) or params.W_out.shape[1] != d * n:
        raise ArgumentError(f"parameters {params.dims()} do not match states of shape {H.shape}")
    D = d * n

    E = grade_energy(H, layout)
    Esum = E.sum(axis=-1, keepdims=True) + EPS_E
    En = E / Esum
    if "energy" in ablation:
        alpha = np.ones_like(E)
        Ht = H
        F = np.ones_like(H)
    else:
        alpha = expit(En @ params.W_G.T + params.b_G)
        F = gate_factors(alpha, layout)
        Ht = H * F

    S = ns = None
    if "consensus" in ablation:
        ctx = Ht.mean(axis=1)
    else:
        S = np.einsum("ld,nldk->ndk", params.W_tau, Ht, optimize=True) + params.b_tau.sum(axis=0)[None, :, None]
        ns = np.sqrt(np.sum(S * S, axis=(1, 2)))
        ctx = S / np.where(ns > 0, ns, 1.0)[:, None, None]

    T = scores = None
    if "scale" in ablation:
        beta = np.full((N, L1), 1.0 / L1)
        agg = Ht.mean(axis=1)
    else:
        U = (ctx.reshape(N, D) @ params.W_S[:, :D].T)[:, None, :] + Ht.reshape(N, L1, D) @ params.W_S[:, D:].T
        T = np.tanh(U)
        scores = T @ params.a_S
        beta = softmax(scores)
        agg = np.einsum("nl,nldk->ndk", beta, Ht, optimize=True)

    Z = agg.reshape(N, D) @ params.W_out.T + params.b_out
    if not np.all(np.isfinite(Z)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(Z), axis=1))[0])
        raise NumericError(f"non-finite output at node {bad}")
    tape = ForwardTape(H, E, En, Esum, alpha, F, Ht, S, ns, ctx, T, scores, beta, agg, ablation, params.digest())
    return Z, tape


def backward(
    tape: ForwardTape,
    params: AHAParams,
    layout: InteractionLayout,
    dZ: np.ndarray,
    state_grad: bool = False,
) -> AHAParams | tuple[AHAParams, np.ndarray]:
    """Gradients of ``sum(dZ * Z)`` with respect to every parameter (and optionally the states)."""
    if tape.params_digest != params.digest():
        raise ContractViolation("tape was recorded with different parameters; rerun forward")
    H, Ht, beta = tape.H, tape.Ht, tape.beta
    N, L1, d, n = H.shape
    D = d * n
    if dZ.shape != (N, params.W_out.shape[0]):
        raise ArgumentError(f"upstream gradient has shape {dZ.shape}, expected {(N, params.W_out.shape[0])}")
    g = params.zeros_like()

    g.b_out = dZ.sum(axis=0)
    g.W_out = dZ.T @ tape.agg.reshape(N, D)
    dagg = (dZ @ params.W_out).reshape(N, d, n)

    if "scale" in tape.ablation:
        dHt = np.broadcast_to(dagg[:, None] / L1, Ht.shape).copy()
        dctx = np.zeros_like(tape.ctx)
    else:
        dHt = beta[:, :, None, None] * dagg[:, None]
        dbeta = np.einsum("ndk,nldk->nl", dagg, Ht, optimize=True)
        ds = beta * (dbeta - np.sum(beta * dbeta, axis=1, keepdims=True))
        g.a_S = np.einsum("nl,nlh->h", ds, tape.T, optimize=True)
        dU = ds[:, :, None] * params.a_S * (1.0 - tape.T**2)
        dUc = dU.sum(axis=1)
        ctx_flat = tape.ctx.reshape(N, D)
        g.W_S[:, :D] = dUc.T @ ctx_flat
        g.W_S[:, D:] = np.einsum("nlh,nlk->hk", dU, Ht.reshape(N, L1, D), optimize=True)
        dctx = (dUc @ params.W_S[:, :D]).reshape(N, d, n)
        dHt += (dU @ params.W_S[:, D:]).reshape(N, L1, d, n)

    if "consensus" in tape.ablation:
        dHt += dctx[:, None] / L1
    else:
        ns = tape.ns
        live = ns > 0
        safe = np.where(live, ns, 1.0)
        proj = np.sum(tape.ctx * dctx, axis=(1, 2))
        dS = (dctx - tape.ctx * proj[:, None, None]) / safe[:, None, None]
        dS[~live] = dctx[~live]
        g.W_tau = np.einsum("ndk,nldk->ld", dS, Ht, optimize=True)
        g.b_tau = np.broadcast_to(dS.sum(axis=(0, 2)), (L1, d)).copy()
        dHt += params.W_tau[None, :, :, None] * dS[:, None]

    dH = dHt * tape.F
    if "energy" not in tape.ablation:
        dalpha = np.einsum("nldk,gdk->nlg", dHt * H, layout.masks, optimize=True)
        dpre = dalpha * tape.alpha * (1.0 - tape.alpha)
        g.W_G = np.einsum("nlg,nlh->gh", dpre, tape.En, optimize=True)
        g.b_G = dpre.sum(axis=(0, 1))
        if state_grad:
            dEn = dpre @ params.W_G
            dE = (dEn - np.sum(dEn * tape.En, axis=-1, keepdims=True)) / tape.Esum
            dH = dH + 2.0 * H * np.einsum("nlg,gdk->nldk", dE, layout.masks, optimize=True)
    return (g, dH) if state_grad else g


# ---------------------------------------------------------------------------
# AHA1 checkpoint
#
#   magic "AHA1" | u32 version | u32 K | u64 d | u32 L | u32 d_f | u32 h | u32 n_gates
#   u32 n_blocks, then per block: u16 name length, name, u8 ndim, ndim x u64 shape,
#   little-endian float64 payload. Blocks follow AHAParams field order, then any
#   extra (e.g. task head) blocks.
# ---------------------------------------------------------------------------

AHA_MAGIC = b"AHA1"
AHA_VERSION = 1
_AHA_HEAD = "<IIQIIII"


def checkpoint_to_bytes(params: AHAParams, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> bytes:
    dims = params.dims()
    blocks = params.items() + list((extra or {}).items())
    out = [AHA_MAGIC, struct.pack(_AHA_HEAD, AHA_VERSION, dims.K, dims.d, dims.L, dims.d_f, dims.h, dims.n_gates)]
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode()
    out.append(struct.pack("<I", len(meta_raw)) + meta_raw)
    out.append(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def checkpoint_from_bytes(buf: bytes) -> tuple[AHAParams, dict[str, np.ndarray], dict]:
    if buf[:4] != AHA_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", "magic")
    pos = 4

    def read(fmt: str, what: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError("file truncated", what)
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, K, d, L, d_f, h, G = read(_AHA_HEAD, "header")
    if version != AHA_VERSION:
        raise FormatError(f"unsupported version {version}", "version")
    (mlen,) = read("<I", "meta")
    if pos + mlen > len(buf):
        raise FormatError("file truncated", "meta")
    meta = json.loads(buf[pos : pos + mlen].decode())
    pos += mlen
    (count,) = read("<I", "n_blocks")
    blocks = {}
    for _ in range(count):
        (nlen,) = read("<H", "block name")
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = read("<B", name)
        shape = read(f"<{ndim}Q", name)
        size = int(np.prod(shape)) * 8
        if pos + size > len(buf):
            raise FormatError("file truncated", name)
        blocks[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(float)
        pos += size
    missing = [nm for nm in AHAParams.names() if nm not in blocks]
    if missing:
        raise FormatError(f"missing parameter blocks {missing}", missing[0])
    params = AHAParams(*(blocks.pop(nm) for nm in AHAParams.names()))
    expected = AHADims(K, d, L, d_f, h, G)
    if params.dims() != expected:
        raise FormatError(f"block shapes {params.dims()} disagree with header {expected}", "dims")
    return params, blocks, meta


def save_checkpoint(path, params: AHAParams, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(params, extra, meta))


def load_checkpoint(path) -> tuple[AHAParams, dict[str, np.ndarray], dict]:
    return checkpoint_from_bytes(Path(path).read_bytes())
