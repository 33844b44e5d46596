"""Acceptance criteria 1-12, each at its stated tolerance.

Every test records one PASS/FAIL line through the ``criterion`` fixture; the lines are
printed together at the end of the pytest run.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from cliffmag.aha import ABLATIONS
from cliffmag.data import SynthConfig, generate_synthetic
from cliffmag.propagation import ROTOR_MODES, CGPSettings, precompute
from cliffmag.train import TrainConfig, apply_ablation, fit_baseline_classification, fit_classification
from cliffmag.verify import (
    check_algebra,
    check_damped_spectral_decay,
    check_energy_monotonicity,
    check_gradients,
    check_lifting,
    check_noise_suppression,
    check_potentials,
    check_rotor_isometry,
    check_spectral_decay,
    check_stability,
    run_verify,
)

SEEDS = range(5)


@pytest.fixture(scope="module")
def default_runs():
    """Full model and scalar baseline on the default synthetic dataset for five seeds."""
    runs = []
    for seed in SEEDS:
        ds = generate_synthetic(SynthConfig(seed=seed))
        stack, _ = precompute(ds)
        cfg = TrainConfig(seed=seed)
        runs.append((ds, cfg, fit_classification(stack, ds, cfg), fit_baseline_classification(ds, 2, cfg)))
    return runs


def test_c01_algebra(criterion):
    t0 = time.perf_counter()
    res = check_algebra(n_triples=10_000)
    seconds = time.perf_counter() - t0
    criterion(1, res.passed and seconds < 5.0, f"max error {res.value:.2e} (tol 1e-10), sign tables exact, {seconds:.2f} s (< 5 s)")


def test_c02_rotor_isometry(criterion):
    res = check_rotor_isometry(n_pairs=10_000)
    criterion(2, res.passed, f"max deviation {res.value:.2e} (tol 1e-9) over 10k pairs per K")


def test_c03_lifting(criterion):
    res = check_lifting()
    criterion(3, res.passed, f"max |norm - 1| {res.value:.2e} (tol 1e-12); {res.detail}")


def test_c04_potentials(criterion):
    results = [check_potentials(mode) for mode in ROTOR_MODES]
    ok = all(r.passed for r in results)
    detail = "; ".join(f"{r.name}: {'ok' if r.passed else r.detail}, row-sum error {r.value}" for r in results)
    criterion(4, ok, detail + " (tol 1e-12)")


def test_c05_energy_decay(criterion):
    t0 = time.perf_counter()
    mono = [check_energy_monotonicity(mode) for mode in ROTOR_MODES]
    spectral = [check_spectral_decay(mode) for mode in ROTOR_MODES]
    effective = [check_damped_spectral_decay(mode) for mode in ROTOR_MODES]
    seconds = time.perf_counter() - t0
    ok = all(r.passed for r in mono + spectral) and seconds < 30.0
    detail = (
        f"max energy increase {max(r.value for r in mono):.2e} (slack 1e-9); "
        f"ratio - (1-lambda_min)^2 = {max(r.value for r in spectral):.3f} (slack 0.1); "
        f"against the step's own spectrum max(1-a*lambda)^2: {max(r.value for r in effective):.2e} "
        f"({'holds' if all(r.passed for r in effective) else 'violated'}); {seconds:.1f} s"
    )
    criterion(5, ok, detail)


def test_c06_stability(criterion):
    res = check_stability(trials=20)
    criterion(6, res.passed, res.detail + " (bounds [1.0, 2.5])")


def test_c07_gradients(criterion):
    res = check_gradients(tol=1e-4)
    criterion(7, res.passed, f"worst relative error {res.value:.2e} (tol 1e-4)")


def test_c08_learning_power(default_runs, criterion):
    wins, parts = 0, []
    for ds, _, model, base in default_runs:
        acc, major, b = model.metrics["test_acc"], model.metrics["majority_rate"], base.metrics["test_acc"]
        wins += acc >= major + 0.30 and acc >= b
        parts.append(f"{acc:.3f}/{major:.3f}/{b:.3f}")
    criterion(8, wins >= 4, f"{wins}/5 seeds pass; test acc/majority/baseline per seed: {', '.join(parts)}")


def test_c09_ablation_ordering(default_runs, criterion):
    drops = {a: [] for a in ABLATIONS}
    for ds, cfg, model, _ in default_runs:
        full = model.metrics["val_acc"]
        for a in ABLATIONS:
            ablation = frozenset({a})
            stack, _ = precompute(ds, apply_ablation(CGPSettings(), ablation))
            res = fit_classification(stack, ds, replace(cfg, ablation=ablation))
            drops[a].append(full - res.metrics["val_acc"])
    wins = {a: int(np.sum(np.array(d) >= 0)) for a, d in drops.items()}
    medians = {a: float(np.median(d)) for a, d in drops.items()}
    scale_top = medians["scale"] >= max(medians.values())
    ok = all(w >= 4 for w in wins.values()) and scale_top
    detail = "full >= variant in " + ", ".join(f"{a} {wins[a]}/5" for a in ABLATIONS)
    detail += "; median val drops " + ", ".join(f"{a} {medians[a]:+.3f}" for a in ABLATIONS)
    criterion(9, ok, detail)


def test_c10_noise_suppression(criterion):
    res = check_noise_suppression(seeds=SEEDS, need=4)
    criterion(10, res.passed, res.detail)


def _median_precompute(ds, repeats=5):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        precompute(ds)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def test_c11_decoupled_efficiency(criterion):
    small = generate_synthetic(SynthConfig(n_nodes=3000, p_in=0.006, p_out=0.004, seed=0))
    large = generate_synthetic(SynthConfig(n_nodes=3000, p_in=0.012, p_out=0.008, seed=0))
    _median_precompute(small, 1)  # warm-up
    t_small, t_large = _median_precompute(small), _median_precompute(large)
    growth = (t_large / t_small) / (large.n_edges / small.n_edges) * 2.0  # normalised to an exact doubling

    ds = generate_synthetic(SynthConfig(seed=0))
    epoch = {}
    for L in (2, 8):
        stack, _ = precompute(ds, CGPSettings(L=L))
        hist = fit_classification(stack, ds, TrainConfig(epochs=30)).history
        epoch[L] = float(np.median([h["seconds"] for h in hist[1:]]))
    ratio = epoch[8] / epoch[2]
    detail = (
        f"precompute {t_small:.3f} s -> {t_large:.3f} s for {small.n_edges} -> {large.n_edges} edges "
        f"(x{growth:.2f} per doubling, limit 2.5); epoch L=8/L=2 = {ratio:.2f} (limit 3)"
    )
    criterion(11, growth <= 2.5 and ratio < 3.0, detail)


def test_c12_runtime(criterion):
    t0 = time.perf_counter()
    report = run_verify()
    t_verify = time.perf_counter() - t0
    t0 = time.perf_counter()
    ds = generate_synthetic(SynthConfig())
    stack, _ = precompute(ds)
    fit_classification(stack, ds, TrainConfig())
    t_train = time.perf_counter() - t0
    detail = f"verify {t_verify:.1f} s (< 300, {'all checks pass' if report.passed else 'some checks fail'}); default train/eval {t_train:.1f} s (< 120)"
    criterion(12, t_verify < 300 and t_train < 120, detail)
