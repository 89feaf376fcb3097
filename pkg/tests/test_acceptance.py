"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed together at the end of the
pytest run.  End-to-end criteria read cached runs from ``runs/`` (see
``_runs.py``); a missing or stale run is trained on the spot.
"""
import json
import time

import numpy as np
import pytest

from auglaplace import cli
from auglaplace.augment import AugmentationParams, sample_eps
from auglaplace.curvature import (
    FullGgnState,
    KfacState,
    KfacTangentState,
    accumulate_full_ggn,
    accumulate_kfac,
    accumulate_kfac_tangents,
    finalize_kfac,
)
from auglaplace.hypergrad import grad_eta_logdet, grad_eta_total, laplace_pass
from auglaplace.laplace import Prior, log_marglik
from auglaplace.linalg import kron_damped_bilinear_trace, kron_damped_logdet, logdet_spd, rotated_diag
from auglaplace.model import MlpModel, load_checkpoint

from _fixtures import write_image_fixture
from _runs import CONFIGS, cached_run, run_dir
from test_laplace import _grid_log_evidence, _map_fit, loglik_of

SEEDS = (0, 1, 2)
SUMMARY = []


def record(criterion, ok, detail):
    SUMMARY.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    print(SUMMARY[-1])
    return ok


def toy_runs(name):
    return [cached_run(name, s) for s in SEEDS]


# --- 1: toy invariance recovery -----------------------------------------------

def test_criterion_1_toy_rotation_recovery():
    recs = toy_runs("toy_marglik_kfac")
    degrees = [np.degrees(r["final_abs_eta"][0]) for r in recs]
    in_band = [45.0 <= d <= 75.0 for d in degrees]
    fast = all(r["wallclock_seconds"] <= 300 for r in recs)
    ok = sum(in_band) >= 2 and fast
    record(
        1, ok,
        f"|eta_rot| = {', '.join(f'{d:.1f}' for d in degrees)} deg (band 45-75, need 2 of 3); "
        f"max wallclock {max(r['wallclock_seconds'] for r in recs):.0f} s (limit 300)",
    )
    assert ok


# --- 2: marginal-likelihood ordering ------------------------------------------

def test_criterion_2_marglik_ordering():
    # the learned-width model is claimed to win with either curvature driving the hyper-steps
    base, aug = toy_runs("toy_baseline"), toy_runs("toy_data_aug")
    lines, ok = [], True
    for name in ("toy_marglik_kfac", "toy_marglik_full"):
        learned = toy_runs(name)
        for runs in (learned, base, aug):
            assert all(r["train_config"]["final_curvature"] == "full" for r in runs)
        ordered = [a["marglik_total"] > b["marglik_total"] > c["marglik_total"] for a, b, c in zip(learned, base, aug)]
        ok &= sum(ordered) >= 2
        per_seed = ", ".join(
            f"{a['marglik_total']:.3f} / {b['marglik_total']:.3f} / {c['marglik_total']:.3f}" for a, b, c in zip(learned, base, aug)
        )
        lines.append(f"{name.removeprefix('toy_marglik_')}-driven {sum(ordered)} of 3 ordered ({per_seed})")
    record(2, ok, "learned / baseline / data_aug: " + "; ".join(lines))
    assert ok


# --- 3: KFAC fidelity ---------------------------------------------------------

def _final_logdet_terms(name, seed, rec):
    cfg = cli.load_config(CONFIGS / f"{name}.json", seed)
    train, _ = cli.build_datasets(cfg)
    model = load_checkpoint(run_dir(name, seed) / "model")
    aug = AugmentationParams("PointRotation", rec["final_eta"])
    prior = Prior(np.log(rec["final_prior_precision"]))
    eps = sample_eps(np.random.default_rng([seed, 3]), 100, 1, antithetic=True, batch=(len(train),))
    out = {}
    for curvature in ("kfac", "full"):
        _, rep = laplace_pass(model, train.inputs, train.labels, aug, prior, eps, curvature)
        out[curvature] = rep.logdet_term
    return out


def test_criterion_3_kfac_fidelity():
    kfac_runs, full_runs = toy_runs("toy_marglik_kfac"), toy_runs("toy_marglik_full")
    rel_errs, eta_gaps = [], []
    for seed, rk, rf in zip(SEEDS, kfac_runs, full_runs):
        terms = _final_logdet_terms("toy_marglik_kfac", seed, rk)
        rel_errs.append(abs(terms["kfac"] - terms["full"]) / abs(terms["full"]))
        eta_gaps.append(abs(np.degrees(rk["final_abs_eta"][0]) - np.degrees(rf["final_abs_eta"][0])))
    ok = max(rel_errs) <= 0.15 and max(eta_gaps) <= 10.0
    record(
        3, ok,
        f"logdet rel. error {', '.join(f'{e:.3f}' for e in rel_errs)} (limit 0.15); "
        f"|eta_kfac - eta_full| {', '.join(f'{g:.2f}' for g in eta_gaps)} deg (limit 10)",
    )
    assert ok


# --- 4: gradient correctness --------------------------------------------------

def test_criterion_4_gradcheck(tmp_path):
    start = time.perf_counter()
    worst = {}
    for label, path in (
        ("toy k=1", CONFIGS / "gradcheck_toy.json"),
        ("8x8 images k=6", write_image_fixture(tmp_path / "images")),
        ("two-layer P~300", CONFIGS / "gradcheck_two_layer.json"),
    ):
        rows = cli.gradcheck_rows(cli.load_config(path))
        assert len(rows) > 0
        worst[label] = max(cli._rel_err(a, f) for _, a, f in rows)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < cli.GRADCHECK_TOL and elapsed <= 60
    record(
        4, ok,
        "max rel. error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (limit 1e-3); {elapsed:.1f} s (limit 60)",
    )
    assert ok


# --- 5: oracle equivalences ---------------------------------------------------

def _perturbed(sizes, seed):
    rng = np.random.default_rng(seed)
    model = MlpModel.init(list(sizes), "tanh", seed)
    return model.with_params(model.flat_params() + 0.5 * rng.normal(size=model.n_params)), rng


def _spd(rng, n):
    m = rng.normal(size=(n, n))
    return m @ m.T + 0.1 * np.eye(n)


def test_criterion_5_oracle_equivalences():
    errs = {}
    # (a) one datum at eta = 0: each KFAC block is the dense GGN block
    model, rng = _perturbed((2, 5, 3), 0)
    x = rng.normal(size=(1, 2))
    aug0 = AugmentationParams("PointRotation")
    eps = sample_eps(rng, 6, 1, antithetic=True, batch=(1,))
    H = accumulate_full_ggn(FullGgnState.empty(model), model, x, aug0, eps).H
    curv = finalize_kfac(accumulate_kfac(KfacState.empty(model), model, x, aug0, eps))
    errs["a"] = max(np.max(np.abs(curv.dense_block(l) - H[sl, sl])) for l, sl in enumerate(model.layer_slices()))
    # (b) Kronecker damped log-determinant and trace against dense matrices
    a, g, xa, yg = _spd(rng, 3), _spd(rng, 4), _spd(rng, 3), _spd(rng, 4)
    scale, gamma = 0.3, 0.7
    dense = scale * np.kron(a, g) + gamma * np.eye(12)
    la, va = np.linalg.eigh(a)
    lg, vg = np.linalg.eigh(g)
    errs["b"] = max(
        abs(kron_damped_logdet(la, lg, scale, gamma) - logdet_spd(dense)),
        abs(
            kron_damped_bilinear_trace(rotated_diag(va, xa), rotated_diag(vg, yg), la, lg, scale, gamma)
            - np.trace(np.linalg.solve(dense, np.kron(xa, yg)))
        ),
    )
    # (c) preconditioner identity on a single-layer net against the dense sum
    model, rng = _perturbed((2, 3), 1)
    x = rng.normal(size=(8, 2))
    aug = AugmentationParams("PointRotation", [0.7])
    eps = sample_eps(rng, 4, 1, batch=(8,))
    prior = Prior([0.3])
    st = accumulate_kfac(KfacState.empty(model), model, x, aug, eps)
    t = accumulate_kfac_tangents(KfacTangentState.empty(model, 1), model, x, aug, eps)
    got = grad_eta_logdet(finalize_kfac(st), t, prior)[0]
    hbar = np.kron(st.A[0], st.G[0]) / 8 + prior.prec[0] * np.eye(model.n_params)
    dH = (np.kron(t.dA[0][0], st.G[0]) + np.kron(st.A[0], t.dG[0][0])) / 8
    errs["c"] = abs(got - np.sum(np.linalg.inv(hbar) * dH))
    # (d) Laplace evidence against grid quadrature on a 2-parameter model
    model = MlpModel([np.zeros((2, 1))], ["identity"])
    xq, yq = np.zeros((1, 0)), np.array([0])
    qprior = Prior.constant(model, 1.0)
    fit = _map_fit(model, xq, yq, qprior)
    lap = log_marglik(accumulate_full_ggn(FullGgnState.empty(fit), fit, xq), fit, qprior, loglik_of(fit, xq, yq)).total
    exact = _grid_log_evidence(model, xq, yq, qprior)
    errs["d"] = abs(lap - exact) / abs(exact)
    limits = {"a": 1e-9, "b": 1e-8, "c": 1e-8, "d": 0.15}
    ok = all(errs[k] < limits[k] for k in limits)
    record(5, ok, "; ".join(f"({k}) {errs[k]:.1e} < {limits[k]:g}" for k in limits))
    assert ok


# --- 6: MNIST subset ----------------------------------------------------------

def test_criterion_6_mnist_subset():
    if not (CONFIGS.parent / "data" / "mnist").is_dir():
        record(6, False, "MNIST files not found under data/mnist")
        pytest.fail("MNIST files not found under data/mnist")
    base = [cached_run("mnist_partialrot_baseline", s) for s in SEEDS]
    learned = [cached_run("mnist_partialrot_marglik", s) for s in SEEDS]
    full = [cached_run("mnist_fullrot_marglik", s) for s in SEEDS]
    gap = 100 * (np.mean([r["test_acc"] for r in learned]) - np.mean([r["test_acc"] for r in base]))
    mean_abs_eta = np.mean([r["final_abs_eta"] for r in full], axis=0)
    rot_wins = [int(np.argmax(r["final_abs_eta"])) == 2 for r in full]
    slowest = max(r["wallclock_seconds"] for r in base + learned + full) / 60
    ok = gap >= 2.0 and int(np.argmax(mean_abs_eta)) == 2 and slowest <= 45
    record(
        6, ok,
        f"PartialRot accuracy gap {gap:+.2f} pp (need >= 2); FullRot mean |eta| "
        f"{np.round(mean_abs_eta, 3).tolist()} (rotation largest in {sum(rot_wins)} of 3 seeds); "
        f"slowest run {slowest:.1f} min on 1 core (limit 45)",
    )
    assert ok


# --- 7: exact structural invariants -------------------------------------------

def test_criterion_7_structural_invariants(tmp_path):
    checks = {}
    model, rng = _perturbed((2, 6, 2), 2)
    x, y = rng.normal(size=(10, 2)), rng.integers(0, 2, 10)
    zero = []
    for curvature in ("kfac", "full"):
        hp = grad_eta_total(model, x, y, AugmentationParams("PointRotation"), Prior([0.0, 0.0]), 8,
                            curvature=curvature, rng=rng, antithetic=True)
        zero.append(hp.gradient.total)
    img_model, rng = _perturbed((64, 4, 10), 3)
    imgs = rng.uniform(0, 1, (3, 8, 8))
    hp = grad_eta_total(img_model, imgs, rng.integers(0, 10, 3), AugmentationParams("ImageAffine"), Prior([0.0, 0.0]), 4,
                        rng=rng, antithetic=True)
    zero.append(hp.gradient.total)
    checks["zero hypergradient"] = all(np.all(z == 0.0) for z in zero)

    cfg = json.loads((CONFIGS / "toy_marglik_kfac.json").read_text())
    cfg["dataset"]["n"] = 40
    cfg["model"]["hidden_sizes"] = [10]
    cfg["train"].update(epochs=8, burnin_epochs=4, S_train=8, S_test=8, S_hyper=8, eta_init=0.3, lr_hyper=0.05)
    path = tmp_path / "small.json"
    path.write_text(json.dumps(cfg))
    trajs = []
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(path), "--seed", "0", "--out", str(tmp_path / name)]) == 0
        trajs.append((tmp_path / name / "trajectory.csv").read_text())
    eta = [line.split(",")[1] for line in trajs[0].splitlines()[1:]]
    checks["burn-in keeps eta"] = len(set(eta[:4])) == 1 and float(eta[0]) == 0.3 and eta[4] != eta[0]
    checks["identical trajectories"] = trajs[0] == trajs[1]
    ok = all(checks.values())
    record(7, ok, "; ".join(f"{k}: {'yes' if v else 'no'}" for k, v in checks.items()))
    assert ok
