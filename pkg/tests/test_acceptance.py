"""Behavioural acceptance suite.

Each test carries ``@pytest.mark.acceptance(N)`` and records its measured
quantities; the terminal summary prints one PASS/FAIL line per criterion.
The training-based criteria (6-8) share one set of runs per seed, built once
per session.
"""
import dataclasses
import json
import math
import shutil
import statistics
import time

import numpy as np
import pytest

from ediy import data, evaluation as ev, losses, matching, model, nn, training
from ediy.losses import LossWeights
from ediy.training import OptimizerConfig, SamplingConfig, TrainConfig

from oracles import random_region_rows, scan_most_dissimilar, scan_most_similar
from test_losses import loss_gradient_errors
from test_nn import LAYER_CASES, gradient_check

SEEDS = (0, 1, 2)

# Shared recipe for every arm of the training comparisons (BYOL, R-IEM only, E-DIY).
RECIPE = dict(batch_size=32, epochs=1000, tau=0.9, optimizer=OptimizerConfig(lr=0.2))
TEACHER_STEPS = 500
COLLAPSE_STEPS = 500
DIVERSITY_STEPS = 2000
DIAG_SAMPLES = 256


def _timed(record_property, start, limit):
    elapsed = time.perf_counter() - start
    record_property("runtime_s", f"{elapsed:.1f} (limit {limit})")
    return elapsed


# --------------------------------------------------------------------------- 1


@pytest.mark.acceptance(1)
def test_loss_bounds(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    lo = {"byol": math.inf, "rdem": math.inf, "riem": math.inf}
    hi = {k: -math.inf for k in lo}
    for _ in range(1000):
        n, dim, b = int(rng.integers(2, 17)), int(rng.integers(1, 9)), int(rng.integers(1, 4))
        scale = 10.0 ** rng.uniform(-3, 3)
        f_a, g_b, g_a, f_b = (scale * rng.normal(size=(b, dim)) for _ in range(4))
        la, lb, ga, gb, ta, tb = (scale * rng.normal(size=(b, n, dim)) for _ in range(6))
        values = {
            "byol": losses.byol_loss(f_a, g_b, g_a, f_b),
            "rdem": losses.rdem_loss(la, matching.find_most_dissimilar(ta), lb, matching.find_most_dissimilar(tb)),
            "riem": losses.riem_loss(la, gb, matching.find_most_similar(ta, tb), lb, ga,
                                     matching.find_most_similar(tb, ta)),
        }
        for k, v in values.items():
            lo[k], hi[k] = min(lo[k], v), max(hi[k], v)
    ranges_ok = (lo["byol"] >= 0 and hi["byol"] <= 8 and lo["riem"] >= 0 and hi["riem"] <= 4
                 and lo["rdem"] >= -2 and hi["rdem"] <= 2)

    f = rng.normal(size=(1, 8))
    e1, e2 = np.eye(8)[:1], np.eye(8)[1:2]
    ident = matching.MatchAssignment(np.arange(4), matching.MOST_SIMILAR, within_view=False)
    loc = rng.normal(size=(4, 8))
    e_rows, o_rows = np.tile(e1, (4, 1)), np.tile(e2, (4, 1))
    const = np.tile([0.5, 1.0, -2.0], (6, 1))
    rand6 = matching.sample_random_regions(6, 6, matching.WITHIN_VIEW, seed=0)
    rows3 = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    eye2 = np.eye(2)
    endpoints = [
        (losses.byol_loss(f, f, f, f), 0.0), (losses.byol_loss(e1, e2, e2, e1), 4.0),
        (losses.byol_loss(f, -f, -f, f), 8.0),
        (losses.riem_loss(loc, loc, ident, loc, loc, ident), 0.0),
        (losses.riem_loss(e_rows, o_rows, ident, e_rows, o_rows, ident), 2.0),
        (losses.riem_loss(loc, -loc, ident, loc, -loc, ident), 4.0),
        (losses.rdem_loss(const, rand6, const, rand6), 2.0),
        (losses.rdem_loss(eye2, matching.find_most_dissimilar(eye2), eye2, matching.find_most_dissimilar(eye2)),
         0.0),
        (losses.rdem_loss(rows3, matching.find_most_dissimilar(rows3), rows3,
                          matching.find_most_dissimilar(rows3)), -4 / 3),
    ]
    worst_endpoint = max(abs(got - want) for got, want in endpoints)
    elapsed = _timed(record_property, start, 10)
    record_property("ranges", {k: (round(lo[k], 4), round(hi[k], 4)) for k in lo})
    record_property("worst_endpoint_error", f"{worst_endpoint:.1e}")
    assert ranges_ok and worst_endpoint <= 1e-6 and elapsed < 10


# --------------------------------------------------------------------------- 2


@pytest.mark.acceptance(2)
def test_matching_oracle_equivalence(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    kinds = ("generic", "ties", "duplicates")
    mismatches, checked = 0, 0
    for h in range(1, 9):
        for w in range(1, 9):
            n = h * w
            for draw in range(100):
                kind = kinds[draw % 3]
                a = random_region_rows(rng, n, 4, kind)
                b = random_region_rows(rng, n, 4, kind)
                if n >= 2:
                    mismatches += matching.find_most_dissimilar(a).indices.tolist() != scan_most_dissimilar(a)
                mismatches += matching.find_most_similar(a, b).indices.tolist() != scan_most_similar(a, b)
                checked += 1
    elapsed = _timed(record_property, start, 10)
    record_property("draws", checked)
    record_property("mismatches", mismatches)
    assert mismatches == 0 and elapsed < 10


# --------------------------------------------------------------------------- 3


@pytest.mark.acceptance(3)
def test_gradient_correctness(record_property):
    start = time.perf_counter()
    worst = {}
    for name, (layers, shape) in LAYER_CASES.items():
        worst[name] = max(gradient_check(layers, shape, seed) for seed in range(20))
    for seed in range(20):
        for name, err in loss_gradient_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = _timed(record_property, start, 120)
    record_property("worst_relative_error", f"{max(worst.values()):.1e} ({max(worst, key=worst.get)})")
    assert {"byol", "rdem", "riem", "rdem_instance_variant", "composite"} <= set(worst)
    assert max(worst.values()) < 1e-4 and elapsed < 120


# --------------------------------------------------------------------------- 4

SMALL = model.EncoderSpec(stages=((4, 2), (6, 2), (8, 1)), input_size=16, hidden_dim=12, global_dim=6,
                          local_dim=6)


def _small_cfg(**kw):
    base = dict(model=SMALL, aug=data.AugConfig(output_size=16), batch_size=8, epochs=1000,
                weights=LossWeights(1.0, 1.0, 1.0))
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.acceptance(4)
def test_stop_gradient_routing(record_property, monkeypatch):
    start = time.perf_counter()
    images = data.generate_synthetic(0, 8, 4, size=16)
    state = model.init_model_state(SMALL, 0, dtype=np.float64)
    teacher = model.init_model_state(SMALL, 1, dtype=np.float64)
    model.attach_teacher(state, teacher.online, teacher.online_stats)
    seeds = np.random.default_rng(0).integers(0, 2**63 - 1, size=8, dtype=np.int64)
    key_violations = []
    for rdem_mode in (training.TG, training.R, training.R_INS):
        for riem_mode in (training.TG, training.R):
            cfg = _small_cfg(sampling=SamplingConfig(rdem_mode, riem_mode))
            _, grads = training._micro_batch(state, images, seeds, cfg, dict(state.online_stats))
            if set(grads) != set(state.online):
                key_violations.append((rdem_mode, riem_mode))
    # online keys are the only ones; predictor keys exist only on the online side
    assert not any(k.startswith(model.PREDICTOR_PREFIX) for k in state.target)

    cfg = _small_cfg(sampling=SamplingConfig())
    captured = {}
    real = training._region_assignments

    def pinned(*args):
        if "value" not in captured:
            captured["value"] = real(*args)
        return captured["value"]

    monkeypatch.setattr(training, "_region_assignments", pinned)
    _, grads_before = training._micro_batch(state, images, seeds, cfg, dict(state.online_stats))
    rng = np.random.default_rng(3)
    perturbed = {k: v + rng.normal(0, 0.5, v.shape) for k, v in state.teacher.items()}
    model.attach_teacher(state, perturbed, state.teacher_stats)
    _, grads_after = training._micro_batch(state, images, seeds, cfg, dict(state.online_stats))
    max_diff = max(float(np.abs(grads_before[k] - grads_after[k]).max()) for k in grads_before)
    # control: letting the perturbed teacher re-match must change the gradients
    monkeypatch.setattr(training, "_region_assignments", real)
    _, grads_free = training._micro_batch(state, images, seeds, cfg, dict(state.online_stats))
    free_diff = max(float(np.abs(grads_before[k] - grads_free[k]).max()) for k in grads_before)
    elapsed = _timed(record_property, start, 30)
    record_property("grad_key_violations", len(key_violations))
    record_property("max_grad_change_with_pinned_assignments", max_diff)
    record_property("max_grad_change_when_rematched", f"{free_diff:.1e}")
    assert not key_violations and max_diff == 0.0 and free_diff > 0 and elapsed < 30


# --------------------------------------------------------------------------- 5


@pytest.mark.acceptance(5)
def test_ema_contraction(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for tau in (0.0, 0.5, 0.99, 1.0):
        # a frozen online network at the origin keeps every gap resolvable in float64
        online = {"w": np.zeros((8, 4)), "b": np.zeros(8)}
        target = {k: rng.normal(size=v.shape) for k, v in online.items()}
        d0 = math.sqrt(sum(float(np.sum(v**2)) for v in target.values()))
        for k in range(1, 51):
            target, _ = nn.ema_update(online, target, tau)
            gap = math.sqrt(sum(float(np.sum((target[n] - online[n]) ** 2)) for n in online))
            expected = tau**k * d0
            err = 0.0 if gap == expected else abs(gap - expected) / max(abs(expected), 1e-300)
            worst = max(worst, err)
    elapsed = _timed(record_property, start, 10)
    record_property("worst_relative_error", f"{worst:.1e}")
    assert worst <= 1e-5 and elapsed < 10


# --------------------------------------------------------------------------- 6-8: shared runs


def _arm_config(seed, stage, weights, max_steps):
    return TrainConfig(stage=stage, weights=weights, sampling=SamplingConfig(), seed=seed,
                       max_steps=max_steps, **RECIPE)


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    """Per seed: BYOL teacher, R-IEM-only and E-DIY runs, then 2000-step BYOL and E-DIY checkpoints."""
    root = tmp_path_factory.mktemp("acceptance")
    out = {}
    for seed in SEEDS:
        t0 = time.perf_counter()
        images = data.generate_synthetic(seed, 2000, 4, 32)
        base = root / f"seed{seed}"

        byol_cfg = _arm_config(seed, training.BOOTSTRAP, LossWeights(0, 0, 1), TEACHER_STEPS)
        training.bootstrap_teacher(byol_cfg, base / "byol", images=images)
        shutil.copytree(base / "byol" / "final", base / "teacher")
        teacher = training.load_checkpoint(base / "teacher")

        init = model.init_model_state(byol_cfg.model, seed, byol_cfg.tau)
        rec = {"init": ev.diversity_report(init, images, DIAG_SAMPLES, seed)}
        t_collapse = time.perf_counter()
        riem_cfg = _arm_config(seed, training.EDIY, LossWeights(0, 1, 0), COLLAPSE_STEPS)
        riem = training.run_pretraining(riem_cfg, base / "riem", images=images, teacher=teacher)
        rec["riem"] = ev.diversity_report(riem, images, DIAG_SAMPLES, seed)
        ediy_cfg = _arm_config(seed, training.EDIY, LossWeights(1, 1, 1), COLLAPSE_STEPS)
        ediy = training.run_pretraining(ediy_cfg, base / "ediy", images=images, teacher=teacher)
        rec["ediy"] = ev.diversity_report(ediy, images, DIAG_SAMPLES, seed)
        rec["collapse_s"] = time.perf_counter() - t_collapse + (t_collapse - t0)

        t_div = time.perf_counter()
        byol_long = training.bootstrap_teacher(
            dataclasses.replace(byol_cfg, max_steps=DIVERSITY_STEPS), base / "byol", images=images,
            resume=base / "byol" / "final")
        ediy_long = training.run_pretraining(
            dataclasses.replace(ediy_cfg, max_steps=DIVERSITY_STEPS), base / "ediy", images=images,
            teacher=teacher, resume=base / "ediy" / "final")
        assert byol_long.state.step == ediy_long.state.step == DIVERSITY_STEPS
        rec["byol_long"] = ev.diversity_report(byol_long, images, DIAG_SAMPLES, seed)
        rec["ediy_long"] = ev.diversity_report(ediy_long, images, DIAG_SAMPLES, seed)
        rec["diversity_s"] = time.perf_counter() - t_div

        t_probe = time.perf_counter()
        rec["probe"] = {
            "ediy": ev.linear_probe(ediy_long, images, seed).test_accuracy,
            "byol": ev.linear_probe(byol_long, images, seed).test_accuracy,
            "random": ev.linear_probe(ev.random_init_state(byol_cfg.model, seed), images, seed).test_accuracy,
        }
        rec["probe_s"] = time.perf_counter() - t_probe
        out[seed] = rec
    return out


@pytest.mark.acceptance(6)
def test_collapse_reproduction(runs, record_property):
    riem_ratio = statistics.median(r["riem"].region_feature_std / r["init"].region_feature_std
                                   for r in runs.values())
    ediy_ratio = statistics.median(r["ediy"].region_feature_std / r["init"].region_feature_std
                                   for r in runs.values())
    minutes = sum(r["collapse_s"] for r in runs.values()) / 60
    record_property("riem_only_std_ratio", round(riem_ratio, 4))
    record_property("ediy_std_ratio", round(ediy_ratio, 4))
    record_property("runtime_min", f"{minutes:.1f} (limit 10)")
    assert riem_ratio < 0.10 and ediy_ratio > 0.50 and minutes < 10


@pytest.mark.acceptance(7)
def test_diversity_effect(runs, record_property):
    gaps = [r["byol_long"].mean_pairwise_region_cosine - r["ediy_long"].mean_pairwise_region_cosine
            for r in runs.values()]
    gap = statistics.median(gaps)
    minutes = sum(r["diversity_s"] for r in runs.values()) / 60
    record_property("byol_minus_ediy_cosine", round(gap, 4))
    record_property("per_seed", [round(g, 4) for g in gaps])
    record_property("runtime_min", f"{minutes:.1f} (limit 20)")
    assert gap >= 0.05 and minutes < 20


@pytest.mark.acceptance(8)
def test_probe_sanity(runs, record_property):
    probes = [r["probe"] for r in runs.values()]
    ediy = statistics.median(p["ediy"] for p in probes)
    byol = statistics.median(p["byol"] for p in probes)
    rand = statistics.median(p["random"] for p in probes)
    minutes = sum(r["probe_s"] for r in runs.values()) / 60
    record_property("probe_ediy", ediy)
    record_property("probe_byol", byol)
    record_property("probe_random_init", rand)
    record_property("runtime_min", f"{minutes:.1f} (limit 10)")
    assert ediy - rand >= 0.15 and abs(ediy - byol) <= 0.05 and minutes < 10


# --------------------------------------------------------------------------- 9


@pytest.fixture(scope="module")
def small_teacher(tmp_path_factory):
    root = tmp_path_factory.mktemp("teacher")
    images = data.generate_synthetic(11, 64, 4, size=16)
    training.bootstrap_teacher(_small_cfg(stage=training.BOOTSTRAP, max_steps=20), root, images=images)
    return root / "final", images


@pytest.mark.acceptance(9)
def test_determinism_and_persistence(record_property, small_teacher, tmp_path):
    start = time.perf_counter()
    teacher, images = small_teacher
    cfg = _small_cfg(max_steps=10)
    a = training.run_pretraining(cfg, tmp_path / "a", images=images, teacher=teacher)
    b = training.run_pretraining(cfg, tmp_path / "b", images=images, teacher=teacher)
    same_logs = (tmp_path / "a" / training.LOG_FILE).read_bytes() == (tmp_path / "b" / training.LOG_FILE).read_bytes()
    same_logs &= len(training.read_log(tmp_path / "a")) == 10

    first = training.save_checkpoint(a.state, a.config, tmp_path / "s1")
    loaded = training.load_checkpoint(first)
    second = training.save_checkpoint(loaded.state, loaded.config, tmp_path / "s2")
    byte_identical = sorted(p.name for p in first.iterdir()) == sorted(p.name for p in second.iterdir()) and all(
        (first / p.name).read_bytes() == (second / p.name).read_bytes() for p in first.iterdir())

    k = 6
    training.run_pretraining(dataclasses.replace(cfg, max_steps=k), tmp_path / "r", images=images, teacher=teacher)
    training.run_pretraining(dataclasses.replace(cfg, max_steps=k + 1), tmp_path / "r", images=images,
                             teacher=teacher, resume=tmp_path / "r" / "final")
    resumed_next = training.read_log(tmp_path / "r")[k]
    straight_next = training.read_log(tmp_path / "a")[k]
    resume_ok = json.dumps(resumed_next) == json.dumps(straight_next)
    elapsed = _timed(record_property, start, 60)
    record_property("loss_sequences_bitwise", same_logs)
    record_property("save_load_save_bytes", byte_identical)
    record_property("resume_step_k_plus_1", resume_ok)
    assert same_logs and byte_identical and resume_ok and elapsed < 60


# --------------------------------------------------------------------------- 10


@pytest.mark.acceptance(10)
def test_weight_ablation_plumbing(record_property, tmp_path):
    start = time.perf_counter()
    images = data.generate_synthetic(5, 512, 4, 32)
    recipe = dict(RECIPE, epochs=1000)
    teacher = training.bootstrap_teacher(
        TrainConfig(stage=training.BOOTSTRAP, seed=5, max_steps=50, **recipe), tmp_path / "teacher", images=images)
    worst, finite, steps = 0.0, True, []
    for weights in ((1, 1, 1), (0.1, 1, 1), (1, 0.1, 1), (1, 1, 0.1)):
        w = LossWeights(*map(float, weights))
        cfg = TrainConfig(stage=training.EDIY, weights=w, seed=5, max_steps=200, **recipe)
        run_dir = tmp_path / "_".join(map(str, weights))
        training.run_pretraining(cfg, run_dir, images=images, teacher=teacher)
        rows = training.read_log(run_dir)
        steps.append(len(rows))
        for r in rows:
            finite &= all(math.isfinite(r[k]) for k in ("byol", "rdem", "riem", "total"))
            identity = w.lambda1 * r["rdem"] + w.lambda2 * r["riem"] + w.lambda3 * r["byol"]
            worst = max(worst, abs(r["total"] - identity))
    elapsed = _timed(record_property, start, 600)
    record_property("steps_per_setting", steps)
    record_property("worst_identity_error", f"{worst:.1e}")
    assert steps == [200] * 4 and finite and worst <= 1e-6 and elapsed < 600
