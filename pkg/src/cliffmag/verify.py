"""Self-contained verification suite: algebra, transport, propagation and head checks on generated instances."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .aha import AHADims, AHAParams, backward, forward, init_params, interaction_layout, node_states
from .algebra import (
    bivector_exp,
    build_blade_table,
    clifford_norm,
    geometric_product,
    grade_project,
    reverse,
    sandwich_matrix,
)
from .data import MAGDataset, SynthConfig, csr_from_edges, generate_synthetic
from .propagation import (
    LAYOUTS,
    ROTOR_MODES,
    PropagationStack,
    edge_geometry,
    energy_trace,
    geometric_laplacian_spectrum,
    lift,
    manifold_divergence,
    propagate,
    segment_sum,
)
from .train import TrainConfig, fit_classification

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["passed", "total_seconds", "checks"],
    "additionalProperties": False,
    "properties": {
        "passed": {"type": "boolean"},
        "total_seconds": {"type": "number", "minimum": 0},
        "checks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "passed", "value", "tolerance", "seconds", "detail"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string"},
                    "passed": {"type": "boolean"},
                    "value": {"type": ["number", "null"]},
                    "tolerance": {"type": ["number", "null"]},
                    "seconds": {"type": "number", "minimum": 0},
                    "detail": {"type": "string"},
                },
            },
        },
    },
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float | None
    tolerance: float | None
    seconds: float = 0.0
    detail: str = ""


@dataclass
class VerifyReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "total_seconds": float(sum(c.seconds for c in self.checks)),
            "checks": [asdict(c) for c in self.checks],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        rows = [f"{'check':<34} {'result':<6} {'value':>12} {'tolerance':>12} {'sec':>7}"]
        for c in self.checks:
            val = "-" if c.value is None else f"{c.value:.3g}"
            tol = "-" if c.tolerance is None else f"{c.tolerance:.3g}"
            rows.append(f"{c.name:<34} {'PASS' if c.passed else 'FAIL':<6} {val:>12} {tol:>12} {c.seconds:>7.2f}")
        rows.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(rows)


def _timed(fn, *args, **kwargs) -> CheckResult:
    t0 = time.perf_counter()
    try:
        res = fn(*args, **kwargs)
    except Exception as exc:  # a crashing check is reported, not fatal
        res = CheckResult(getattr(fn, "__name__", "check"), False, None, None, detail=f"{type(exc).__name__}: {exc}")
    res.seconds = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------- algebra


def sorted_blade_product(a: str, b: str) -> tuple[int, str]:
    """Product of basis blades written as generator strings ("13" = e1e3) by bubble sorting.

    Each adjacent swap of distinct generators flips the sign; equal neighbours cancel (e_i^2 = +1).
    """
    word = list(a + b)
    sign = 1
    changed = True
    while changed:
        changed = False
        i = 0
        while i < len(word) - 1:
            if word[i] > word[i + 1]:
                word[i], word[i + 1] = word[i + 1], word[i]
                sign = -sign
                changed = True
            elif word[i] == word[i + 1]:
                del word[i : i + 2]
                changed = True
                continue
            i += 1
    return sign, "".join(word)


def check_algebra(n_triples: int = 10_000, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for K in (2, 3):
        t = build_blade_table(K)
        names = ["".join(str(k) for k in blade) for blade in t.blades]
        for i, a in enumerate(names):
            for j, b in enumerate(names):
                sign, word = sorted_blade_product(a, b)
                k = names.index(word)
                if t.cayley[i, j, k] != sign or np.count_nonzero(t.cayley[i, j]) != 1:
                    return CheckResult("algebra_axioms", False, None, tol, detail=f"K={K}: e{a}*e{b} disagrees with sorting oracle")
        a, b, c = (rng.standard_normal((n_triples, t.n)) for _ in range(3))
        x, y = rng.standard_normal((2, n_triples, 1))
        assoc = geometric_product(geometric_product(a, b, t), c, t) - geometric_product(a, geometric_product(b, c, t), t)
        left = geometric_product(x * a + y * b, c, t) - (x * geometric_product(a, c, t) + y * geometric_product(b, c, t))
        right = geometric_product(c, x * a + y * b, t) - (x * geometric_product(c, a, t) + y * geometric_product(c, b, t))
        parts = [grade_project(a, g, t) for g in range(K + 1)]
        decomp = sum(parts) - a
        idem = max(float(np.abs(grade_project(p, g, t) - p).max()) for g, p in enumerate(parts))
        worst = max(worst, *(float(np.abs(e).max()) for e in (assoc, left, right, decomp)), idem)
    return CheckResult("algebra_axioms", worst <= tol, worst, tol, detail="sign tables match sorting oracle for K=2,3")


def check_rotor_isometry(n_pairs: int = 10_000, seed: int = 1, tol: float = 1e-9) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for K in (2, 3):
        t = build_blade_table(K)
        B = np.zeros((n_pairs, t.n))
        B[:, t.grade_mask(2)] = rng.normal(scale=2.0, size=(n_pairs, int(t.grade_mask(2).sum())))
        R = bivector_exp(B, t)
        M = sandwich_matrix(R, t)
        a = rng.standard_normal((n_pairs, t.n))
        moved = np.einsum("eij,ej->ei", M, a)
        norm_err = np.abs(clifford_norm_rows(moved) - clifford_norm_rows(a)) / clifford_norm_rows(a)
        gram = np.einsum("eki,ekj->eij", M, M) - np.eye(t.n)
        unit = np.abs(geometric_product(R, reverse(R, t), t) - t.basis(0))
        worst = max(worst, float(norm_err.max()), float(np.abs(gram).max()), float(unit.max()))
    return CheckResult("rotor_isometry", worst <= tol, worst, tol, detail="norm preservation, blade orthonormality, R~R = 1")


def clifford_norm_rows(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(a * a, axis=-1))


# ---------------------------------------------------------------- propagation


def random_graphs(n_graphs: int, n_nodes: int = 50, seed: int = 0, dims=(4, 4)) -> list[MAGDataset]:
    return [
        generate_synthetic(SynthConfig(n_nodes=n_nodes, n_classes=3, dims=dims, p_in=0.2, p_out=0.1, seed=seed + i))
        for i in range(n_graphs)
    ]


def check_lifting(seed: int = 2, tol: float = 1e-12) -> CheckResult:
    ds = generate_synthetic(SynthConfig(seed=seed))
    worst, even = 0.0, 0.0
    for layout in LAYOUTS:
        st = lift(ds, layout)
        t = st.table
        norms = np.sqrt(np.sum(st.H**2, axis=(1, 2)))
        worst = max(worst, float(np.abs(norms[norms > 0] - 1.0).max()))
        mask = t.grade_mask(0) | t.grade_mask(2)
        even = max(even, float(np.abs(st.H[:, :, mask]).max()))
    return CheckResult("lifting_norm", worst <= tol and even == 0.0, worst, tol, detail=f"max even-grade coefficient {even}")


def check_potentials(rotor_mode: str, seed: int = 3, tol: float = 1e-12) -> CheckResult:
    worst = 0.0
    for ds in random_graphs(3, seed=seed):
        for layout in LAYOUTS:
            geo = edge_geometry(lift(ds, layout), ds, rotor_mode=rotor_mode)
            phi = geo.potential
            if not (np.all(phi > 0) and np.all(phi <= 1)):
                return CheckResult(f"potentials[{rotor_mode}]", False, None, tol, detail="potential outside (0, 1]")
            flat = np.sum(geo.bivector**2, axis=1) == 0
            if not np.array_equal(phi[flat] == 1.0, np.ones(flat.sum(), dtype=bool)) or np.any(phi[~flat] == 1.0):
                return CheckResult(f"potentials[{rotor_mode}]", False, None, tol, detail="potential is 1 off zero-curvature edges")
            rows = segment_sum(geo.normalized, geo.indptr)
            has = np.diff(geo.indptr) > 0
            worst = max(worst, float(np.abs(rows[has] - 1.0).max()))
    return CheckResult(f"potentials[{rotor_mode}]", worst <= tol, worst, tol, detail="range, flat-edge identity, row sums")


def check_energy_monotonicity(rotor_mode: str, n_graphs: int = 5, L: int = 10, alpha: float = 0.5, slack: float = 1e-9) -> CheckResult:
    worst = -np.inf
    for ds in random_graphs(n_graphs, seed=10):
        for layout in LAYOUTS:
            st = lift(ds, layout)
            geo = edge_geometry(st, ds, rotor_mode=rotor_mode)
            e = energy_trace(propagate(st, geo, L, alpha), geo)
            worst = max(worst, float(np.max(np.diff(e))))
    return CheckResult(
        f"energy_monotone[{rotor_mode}]", worst <= slack, worst, slack, detail=f"max layer-to-layer increase, L={L}, alpha={alpha}"
    )


def small_instance(seed: int = 5) -> MAGDataset:
    """8 nodes, dense and non-bipartite, two-dimensional modalities."""
    return generate_synthetic(SynthConfig(n_nodes=8, n_classes=2, dims=(2, 2), p_in=0.9, p_out=0.7, seed=seed))


def contraction_ratios(ds: MAGDataset, layout: str, rotor_mode: str, alpha: float, L: int = 10):
    st = lift(ds, layout)
    geo = edge_geometry(st, ds, rotor_mode=rotor_mode)
    lam = geometric_laplacian_spectrum(geo, d=1)
    nz = lam[lam > 1e-9]
    e = energy_trace(propagate(st, geo, L, alpha), geo)
    live = e[:-1] > 1e-20
    return e[1:][live] / e[:-1][live], nz


def check_spectral_decay(rotor_mode: str, alpha: float = 0.5, slack: float = 0.1) -> CheckResult:
    """Per-layer energy ratio against ``(1 - lambda_min)^2 + slack`` with lambda from the L_G spectrum."""
    worst = -np.inf
    for layout in LAYOUTS:
        ratios, nz = contraction_ratios(small_instance(), layout, rotor_mode, alpha)
        worst = max(worst, float(ratios.max() - (1.0 - nz.min()) ** 2))
    return CheckResult(
        f"spectral_decay[{rotor_mode}]", worst <= slack, worst, slack, detail=f"max(ratio - (1 - lambda_min)^2), alpha={alpha}, 8 nodes"
    )


def check_damped_spectral_decay(rotor_mode: str, alpha: float = 0.5, slack: float = 1e-9) -> CheckResult:
    """Same ratio against the spectrum of the step's own Laplacian ``alpha * L_G``: every mode shrinks by (1 - alpha*lambda)^2."""
    worst = -np.inf
    for layout in LAYOUTS:
        ratios, nz = contraction_ratios(small_instance(), layout, rotor_mode, alpha)
        bound = max((1 - alpha * nz.min()) ** 2, (1 - alpha * nz.max()) ** 2)
        worst = max(worst, float(ratios.max() - bound))
    return CheckResult(
        f"spectral_decay_effective[{rotor_mode}]", worst <= slack, worst, slack, detail=f"max(ratio - max(1 - a*lambda)^2), a={alpha}"
    )


def check_stability(trials: int = 20, seed: int = 6, layout: str = "block", L: int = 2, lo: float = 1.0, hi: float = 2.5) -> CheckResult:
    rng = np.random.default_rng(seed)
    ds = random_graphs(1, seed=seed)[0]
    base = lift(ds, layout)
    base_geo = edge_geometry(base, ds)
    base_out = propagate(base, base_geo, L).layers[-1]
    ratios = []
    for _ in range(trials):
        dirs = [rng.normal(size=x.shape) for x in ds.features]
        norm = np.sqrt(sum(np.sum(x**2) for x in dirs))
        divs = []
        for mag in (1e-3, 2e-3):
            pert = replace(ds, features=tuple(x + mag * dx / norm for x, dx in zip(ds.features, dirs)))
            st = lift(pert, layout)
            geo = edge_geometry(st, pert)
            divs.append(manifold_divergence(base_out, base_geo, propagate(st, geo, L).layers[-1], geo))
        ratios.append(divs[1] / divs[0])
    ratios = np.array(ratios)
    ok = bool(np.all((ratios >= lo) & (ratios <= hi)))
    return CheckResult("stability_ratio", ok, float(ratios.max()), hi, detail=f"ratios in [{ratios.min():.4f}, {ratios.max():.4f}], {trials} trials")


# ---------------------------------------------------------------- head


def fd_gradient_errors(n_nodes: int = 10, seed: int = 7, step: float = 1e-5) -> dict:
    """Relative error of every analytic parameter gradient against central differences."""
    rng = np.random.default_rng(seed)
    layout = interaction_layout(2, (2, 2))
    dims = AHADims(K=2, d=4, L=2, d_f=3, h=5)
    base = init_params(seed, dims)
    params = AHAParams(*(v + 0.5 * rng.standard_normal(v.shape) for _, v in base.items()))
    H = rng.standard_normal((n_nodes, dims.L + 1, dims.d, dims.n))
    C = rng.standard_normal((n_nodes, dims.d_f))

    def f() -> float:
        return float(np.sum(C * forward(H, params, layout)[0]))

    _, tape = forward(H, params, layout)
    grads = backward(tape, params, layout, C)
    errors = {}
    for name, arr in params.items():
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            fp = f()
            arr[idx] = old - step
            fm = f()
            arr[idx] = old
            num[idx] = (fp - fm) / (2 * step)
        errors[name] = float(np.abs(getattr(grads, name) - num).max() / max(np.abs(num).max(), 1e-12))
    return errors


def check_gradients(tol: float = 1e-4) -> CheckResult:
    errors = fd_gradient_errors()
    worst = max(errors.values())
    detail = ", ".join(f"{k}={v:.1e}" for k, v in errors.items())
    return CheckResult("aha_gradients", worst < tol, worst, tol, detail=detail)


NOISE_CHANNEL = 2  # (grade-2, block 1) in the K=2 interaction layout


def injected_noise_stack(seed: int, n_nodes: int = 400, n_classes: int = 3, L: int = 1, spread: float = 1.0):
    """States whose grade-0 channels and (grade-2, block 2) carry class signal plus unit noise,
    while (grade-2, block 1) carries pure noise with a log-normal per-node amplitude.
    Grade-1 coefficients are zero. No edges are needed: the stack is injected directly.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(n_classes, size=n_nodes)
    means = rng.normal(size=(n_classes, 3, 4))
    amp = np.exp(spread * rng.normal(size=n_nodes))
    layers = np.zeros((L + 1, n_nodes, 8, 4))
    for l in range(L + 1):
        noise = rng.normal(size=(4, n_nodes, 4))
        layers[l, :, 0:4, 0] = means[labels, 0] + noise[0]
        layers[l, :, 4:8, 0] = means[labels, 1] + noise[1]
        layers[l, :, 4:8, 3] = means[labels, 2] + noise[2]
        layers[l, :, 0:4, 3] = amp[:, None] * noise[3]
    perm = rng.permutation(n_nodes)
    n_tr, n_va = int(0.6 * n_nodes), int(0.2 * n_nodes)
    splits = {"train": np.sort(perm[:n_tr]), "val": np.sort(perm[n_tr : n_tr + n_va]), "test": np.sort(perm[n_tr + n_va :])}
    indptr, indices = csr_from_edges(n_nodes, np.empty((0, 2), dtype=np.int64))
    ds = MAGDataset(indptr, indices, (np.zeros((n_nodes, 4)), np.zeros((n_nodes, 4))), labels, splits)
    return PropagationStack(layers, 0.5, 1e-6, (4, 4)), ds


NOISE_TRAIN = dict(epochs=300, batch_size=32, checkpoint="last")


def noise_suppression_trial(seed: int) -> dict:
    stack, ds = injected_noise_stack(seed)
    res = fit_classification(stack, ds, TrainConfig(seed=seed, **NOISE_TRAIN))
    H = node_states(stack.layers)
    alpha = forward(H, res.model.params, res.model.layout)[1].alpha.mean(axis=(0, 1))
    alpha0 = forward(H, init_params(seed, res.model.params.dims()), res.model.layout)[1].alpha.mean(axis=(0, 1))
    signal = [c for c in range(len(alpha)) if c != NOISE_CHANNEL]
    return {
        "alpha": alpha,
        "alpha_init": alpha0,
        "suppressed": bool(alpha[NOISE_CHANNEL] < alpha[signal].min()),
        "relative_drop": bool((alpha - alpha0)[NOISE_CHANNEL] < (alpha - alpha0)[signal].min()),
        "test_acc": res.metrics["test_acc"],
    }


def check_noise_suppression(seeds=range(5), need: int = 4) -> CheckResult:
    trials = [noise_suppression_trial(s) for s in seeds]
    wins = sum(t["suppressed"] for t in trials)
    rel = sum(t["relative_drop"] for t in trials)
    detail = f"noise gate lowest in {wins}/{len(trials)} seeds; lowest change from init in {rel}/{len(trials)}"
    return CheckResult("noise_suppression", wins >= need, float(wins), float(need), detail=detail)


# ---------------------------------------------------------------- driver


def run_verify(rotor_modes=ROTOR_MODES, include_training: bool = True, progress=None) -> VerifyReport:
    """Run every check in order; failures are recorded and the run continues."""
    plan = [(check_algebra, ()), (check_rotor_isometry, ()), (check_lifting, ())]
    for mode in rotor_modes:
        plan += [(check_potentials, (mode,)), (check_energy_monotonicity, (mode,))]
        plan += [(check_spectral_decay, (mode,)), (check_damped_spectral_decay, (mode,))]
    plan += [(check_stability, ()), (check_gradients, ())]
    if include_training:
        plan.append((check_noise_suppression, ()))
    report = VerifyReport()
    for fn, args in plan:
        res = _timed(fn, *args)
        report.checks.append(res)
        if progress is not None:
            progress(res)
    return report
