"""Acceptance criteria 1-10.

Each criterion is one test. Results are collected in ``RESULTS`` and printed
as one PASS/FAIL line per criterion in the pytest terminal summary (see
conftest.py), or directly when this file is run as a script.
"""

import functools
import json
import math
import random
import subprocess
import sys
import time
import warnings

import pytest
import torch
import torch.nn as nn

from atsc import (
    DatasetSpec,
    DivergenceError,
    Encoder,
    EncoderSpec,
    OptimConfig,
    PretrainConfig,
    RunConfig,
    SharedClassifier,
    SweepSpec,
    TeacherRef,
    build_projector,
    count_params,
    lr_at,
    mt_step1_loss,
    pretrain_teacher,
    snapshot_params,
    step1_loss,
    step2_loss_student,
    step2_loss_teacher,
    step_batch,
    train,
)
from atsc.checkpoint import load_checkpoint
from atsc.cli import run_sweep
from atsc.models import num_trainable

from conftest import tiny_cnn_models, tiny_models
from oracles import analytic_gradients, central_differences, max_relative_error, projector_count_oracle
from states import GROUPS, make_state, named_modules, random_batch, run_isolation_check

RESULTS = {}

TITLES = {
    1: "gradient correctness (64-bit, finite differences)",
    2: "step isolation, 20 batches x every mode",
    3: "SimKD reduction",
    4: "multi-teacher degeneracy",
    5: "projector and parameter accounting",
    6: "learning-rate schedule",
    7: "desk-scale distillation: ATSC >= standalone student",
    8: "alpha controls teacher drift",
    9: "deterministic reruns give byte-identical metrics.csv",
    10: "divergence handling",
}

# Desk-scale task for criteria 7 and 8: the default synthetic dataset, a
# wide teacher and a narrow student trained under one shared optimizer.
DESK_DATA = DatasetSpec()
DESK_TEACHER = EncoderSpec("mlp", DESK_DATA.dims, (256, 256), 64)
DESK_STUDENT = EncoderSpec("mlp", DESK_DATA.dims, (16,), 16)
DESK_TEACHER_OPTIM = OptimConfig(base_lr=0.1, epochs=40, milestones=(20, 30))
DESK_OPTIM = OptimConfig(base_lr=0.3, epochs=40, milestones=(20, 30))
DESK_SEEDS = (0, 1, 2, 3, 4)


def criterion(n):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                RESULTS[n] = (False, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
                raise
            RESULTS[n] = (True, f"{detail or 'ok'} [{time.perf_counter() - t0:.1f}s]")
        return run
    return wrap


def summary_lines():
    lines = []
    for n in sorted(TITLES):
        if n not in RESULTS:
            lines.append(f"criterion {n:2d} NOT RUN  {TITLES[n]}")
            continue
        ok, detail = RESULTS[n]
        lines.append(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {TITLES[n]}: {detail}")
    return lines


# --------------------------------------------------------------------------- #
# 1


def _perturb(module, seed, scale=0.05):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


def _fd_error(fn, params):
    assert sum(p.numel() for p in params) < 1000
    return max_relative_error(analytic_gradients(fn, params), central_differences(fn, params))


@criterion(1)
def test_criterion_1_gradients():
    t0 = time.perf_counter()
    errors = {}
    for make, shape in ((tiny_models, (8, 6)), (tiny_cnn_models, (8, 2, 4, 4))):
        for seed in (0, 1):
            t, s, p, c = make(seed=seed)
            snap = snapshot_params(t)
            _perturb(t, seed + 10)
            x = torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
            y = torch.arange(shape[0]) % 3
            for m in (t, s, p):
                m.train()
            errors[f"step1/{make.__name__}/{seed}"] = _fd_error(
                lambda: step1_loss(t(x), p(s(x)), snap, t, 1.5).total, [*t.parameters(), *s.parameters(), *p.parameters()]
            )
            for m in (t, s, p):
                m.eval()
            errors[f"step2_teacher/{make.__name__}/{seed}"] = _fd_error(
                lambda: step2_loss_teacher(y, t, c, x).total, list(c.parameters())
            )
            errors[f"step2_student/{make.__name__}/{seed}"] = _fd_error(
                lambda: step2_loss_student(y, s, p, c, x).total, list(c.parameters())
            )
            # two teachers sharing one student
            t2, _, p2, _ = make(seed=seed + 5)
            snap2 = snapshot_params(t2)
            _perturb(t2, seed + 20)
            for m in (t, s, p, t2, p2):
                m.train()
            errors[f"mt_step1/{make.__name__}/{seed}"] = _fd_error(
                lambda: mt_step1_loss(
                    [t(x), t2(x)], [p(s(x)), p2(s(x))], [snap, snap2], [t, t2], 0.8
                ).total,
                [*t.parameters(), *t2.parameters(), *s.parameters(), *p.parameters(), *p2.parameters()],
            )
    worst = max(errors, key=errors.get)
    elapsed = time.perf_counter() - t0
    assert errors[worst] < 1e-6, f"{worst}: {errors[worst]:.2e}"
    assert elapsed < 60
    return f"max relative error {errors[worst]:.1e} ({worst}) over {len(errors)} checks < 1e-6"


# --------------------------------------------------------------------------- #
# 2


@criterion(2)
def test_criterion_2_step_isolation():
    t0 = time.perf_counter()
    for mode in GROUPS:
        run_isolation_check(mode, n_batches=20)
    elapsed = time.perf_counter() - t0
    assert elapsed < 60
    return f"{len(GROUPS)} modes x 20 batches, parameters and BN statistics outside each step bitwise unchanged"


# --------------------------------------------------------------------------- #
# 3


@criterion(3)
def test_criterion_3_simkd_reduction():
    worst_loss, worst_param = 0.0, 0.0
    for seed in range(5):
        atsc = make_state("ATSC", seed=seed, teacher_in_step1=False, alpha=7.0)
        simkd = make_state("SIMKD", seed=seed)
        # teacher sits exactly at its anchor
        assert atsc.snapshots[0].values.tolist() == simkd.snapshots[0].values.tolist()
        batch = random_batch(100 + seed)
        la = step_batch(atsc, batch, run_step2=False).step1
        ls = step_batch(simkd, batch).step1
        worst_loss = max(worst_loss, abs(la.item() - ls.item()) / abs(ls.item()))
        for ma, ms in ((atsc.student, simkd.student), (atsc.projectors[0], simkd.projectors[0])):
            for pa, ps in zip(ma.parameters(), ms.parameters()):
                worst_param = max(worst_param, (pa - ps).abs().max().item())
    assert worst_loss <= 1e-12 and worst_param <= 1e-12
    return f"loss rel diff {worst_loss:.1e}, max param diff after one step {worst_param:.1e} (<= 1e-12)"


# --------------------------------------------------------------------------- #
# 4


@criterion(4)
def test_criterion_4_multi_teacher_degeneracy():
    atsc = make_state("ATSC", alpha=0.9)
    multi = make_state("MULTI_ATSC", alpha=0.9)
    worst_loss, worst_param = 0.0, 0.0
    for b in range(10):
        batch = random_batch(b)
        la, lm = step_batch(atsc, batch), step_batch(multi, batch)
        for a, m in ((la.step1, lm.step1), (la.step2, lm.step2)):
            worst_loss = max(worst_loss, abs(a.item() - m.item()) / max(abs(a.item()), 1e-300))
        for ma, mm in zip(named_modules(atsc).values(), named_modules(multi).values()):
            for pa, pm in zip(ma.parameters(), mm.parameters()):
                worst_param = max(worst_param, (pa - pm).abs().max().item())
    t, s, p, _ = tiny_models()
    snap = snapshot_params(t)
    _perturb(t, 3)
    x = random_batch(50).x
    for m in (t, s, p):
        m.eval()
    single = step1_loss(t(x), p(s(x)), snap, t, 2.0).item()
    worst_sum = 0.0
    for n in (1, 2, 3, 4, 7):
        got = mt_step1_loss([t(x)] * n, [p(s(x))] * n, [snap] * n, [t] * n, 2.0).item()
        worst_sum = max(worst_sum, abs(got - n * single) / (n * single))
    assert worst_loss <= 1e-12 and worst_param <= 1e-12 and worst_sum <= 1e-12
    return (
        f"10 batches: loss rel diff {worst_loss:.1e}, param diff {worst_param:.1e}; "
        f"N identical pairs vs N x single {worst_sum:.1e}"
    )


# --------------------------------------------------------------------------- #
# 5


def _layer_enumeration(module):
    """Count parameters by walking leaf layers and their weight shapes."""
    total = 0
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            total += math.prod(m.weight.shape) + (0 if m.bias is None else m.bias.numel())
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            total += 2 * m.num_features
    return total


# student parameter counts with and without projector, teacher count (millions)
# and reported increase (%), for the ten single-teacher scenarios
PARAM_TABLE = [
    (7.4, 4.0, 4.2, 3.66), (7.4, 1.4, 1.7, 4.55), (7.4, 0.9, 1.3, 4.44), (7.4, 0.7, 0.9, 3.00),
    (2.3, 0.8, 1.0, 6.23), (7.4, 2.4, 2.7, 4.99), (1.7, 0.3, 0.3, 2.99), (7.4, 1.2, 1.5, 3.22),
    (9.5, 0.8, 1.9, 11.65), (23.7, 4.0, 7.8, 16.37),
]


def _consistent(increase, numerator_bounds, denominator_bounds):
    ratios = [100 * n / d for n in numerator_bounds for d in denominator_bounds]
    lo, hi = min(ratios), max(ratios)
    return lo - 0.005 <= increase <= hi + 0.005


@criterion(5)
def test_criterion_5_parameter_accounting():
    rng = random.Random(0)
    triples = 0
    while triples < 50:
        ch_s, ch_t = rng.randint(1, 96), rng.randint(1, 256)
        r = rng.randint(1, 8)
        if r > ch_t:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            proj = build_projector(ch_s, ch_t, r)
        h = ch_t // r
        assert proj.channel_plan == [(ch_s, h, 1), (h, h, 3), (h, ch_t, 1)]
        expected = projector_count_oracle(ch_s, ch_t, r)
        assert _layer_enumeration(proj) == expected
        assert count_params(projector=proj).counts["projector"] == expected
        triples += 1

    # full accounting on built modules
    teacher = Encoder(EncoderSpec("mlp", 32, (256, 256), 64), role="teacher")
    student = Encoder(EncoderSpec("mlp", 32, (16,), 16))
    proj = build_projector(16, 64, 2)
    clf = SharedClassifier(64, 10)
    head = SharedClassifier(16, 10)
    rep = count_params(teacher, student, proj, clf, student_head=head)
    t_total = _layer_enumeration(teacher) + _layer_enumeration(clf)
    with_proj = _layer_enumeration(student) + _layer_enumeration(proj) + _layer_enumeration(clf)
    without = _layer_enumeration(student) + _layer_enumeration(head)
    assert rep.increase_percent == 100 * (with_proj - without) / t_total

    # The increase is relative to the teacher: the published counts (rounded
    # to 0.1M) bracket every reported value under that definition, while a
    # student-relative definition is contradicted by at least one column.
    half = 0.05
    teacher_ok = all(
        _consistent(inc, (w - wo - 2 * half, w - wo + 2 * half), (t - half, t + half))
        for t, wo, w, inc in PARAM_TABLE
    )
    student_ok = all(
        _consistent(inc, (w - wo - 2 * half, w - wo + 2 * half), (wo - half, wo + half))
        for t, wo, w, inc in PARAM_TABLE
    )
    assert teacher_ok and not student_ok
    return f"50 random (Ch_S, Ch_T, r) plans and counts exact; increase {rep.increase_percent:.2f}% on desk models; table definition consistent"


# --------------------------------------------------------------------------- #
# 6


@criterion(6)
def test_criterion_6_lr_schedule():
    cfg = OptimConfig(base_lr=0.05, milestones=(150, 180, 210), decay_factor=0.1, epochs=240)
    got = [lr_at(e, cfg) for e in (0, 150, 180, 210)]
    expected = [0.05, 0.005, 0.0005, 0.00005]
    # exact up to the float representation of repeated multiplication by 0.1
    assert all(g == 0.05 * 0.1**k for k, g in enumerate(got))
    assert all(abs(g - e) <= 1e-15 * e for g, e in zip(got, expected))
    assert lr_at(149, cfg) == 0.05 and lr_at(239, cfg) == got[-1]
    return " -> ".join(f"{g:g}" for g in got)


# --------------------------------------------------------------------------- #
# 7 and 8


@pytest.fixture(scope="module")
def desk_teachers(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    out = {}
    for seed in DESK_SEEDS:
        manifest, enc, _ = pretrain_teacher(
            PretrainConfig(DESK_DATA, DESK_TEACHER, DESK_TEACHER_OPTIM, seed=seed), out_dir=root / f"teacher{seed}"
        )
        out[seed] = (root / f"teacher{seed}", manifest["test_top1"], num_trainable(enc))
    return out


def desk_alpha(n_teacher):
    # alpha scaled so the mean-reduced anchor matches a per-parameter sum at 1
    return float(n_teacher)


@pytest.mark.slow
@criterion(7)
def test_criterion_7_desk_distillation(desk_teachers):
    t0 = time.perf_counter()
    pairs = []
    for seed in DESK_SEEDS:
        path, _, n_teacher = desk_teachers[seed]
        standalone = train(RunConfig("STANDALONE_STUDENT", DESK_DATA, DESK_STUDENT, optim=DESK_OPTIM, seed=seed))
        atsc = train(RunConfig(
            "ATSC", DESK_DATA, DESK_STUDENT, [TeacherRef(str(path))],
            alpha=desk_alpha(n_teacher), optim=DESK_OPTIM, seed=seed,
        ))
        pairs.append((atsc.student_top1, standalone.student_top1))
    wins = sum(a >= s for a, s in pairs)
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{a:.1f} vs {s:.1f}" for a, s in pairs)
    assert wins >= 4, f"ATSC >= standalone in {wins}/5 seeds ({detail})"
    assert elapsed < 600
    return f"ATSC >= standalone in {wins}/5 seeds ({detail})"


@pytest.mark.slow
@criterion(8)
def test_criterion_8_alpha_drift(desk_teachers):
    t0 = time.perf_counter()
    alphas = (0.1, 1.0, 10.0)
    ordered, table = 0, []
    for seed in DESK_SEEDS:
        path = desk_teachers[seed][0]
        drift = []
        for alpha in alphas:
            rec = train(RunConfig(
                "ATSC", DESK_DATA, DESK_STUDENT, [TeacherRef(str(path))], alpha=alpha, optim=DESK_OPTIM, seed=seed,
            ))
            drift.append(rec.drift[-1])
        ordered += all(b < a for a, b in zip(drift, drift[1:]))
        table.append("/".join(f"{d:.4f}" for d in drift))
    elapsed = time.perf_counter() - t0
    assert ordered >= 4, f"strictly decreasing in {ordered}/5 seeds ({'; '.join(table)})"
    assert elapsed < 900
    return f"drift strictly decreasing over alpha 0.1/1/10 in {ordered}/5 seeds ({'; '.join(table)})"


# --------------------------------------------------------------------------- #
# 9 and 10: small end-to-end runs through the command line

SMALL_DATA = {"num_classes": 3, "dims": 6, "n_train": 128, "n_test": 64, "separation": 5.0, "seed": 0}
SMALL_OPTIM = {"base_lr": 0.1, "epochs": 3, "milestones": [2], "batch_size": 32}


@pytest.fixture(scope="module")
def small_teacher(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    cfg = {"dataset": SMALL_DATA, "encoder": {"kind": "mlp", "in_channels": 6, "widths": [16], "out_channels": 8}, "optim": SMALL_OPTIM}
    (root / "pretrain.json").write_text(json.dumps(cfg))
    _cli("pretrain", "--config", str(root / "pretrain.json"), "--out", str(root / "teacher"))
    return root / "teacher"


def _cli(*args, check=True):
    proc = subprocess.run([sys.executable, "-m", "atsc", *args], capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise AssertionError(f"atsc {args[0]} exited {proc.returncode}: {proc.stderr.strip()[-300:]}")
    return proc


def _run_cfg(teacher, **kw):
    cfg = {
        "mode": "ATSC", "dataset": SMALL_DATA, "optim": SMALL_OPTIM,
        "student": {"kind": "mlp", "in_channels": 6, "widths": [4], "out_channels": 4},
        "teachers": [{"checkpoint": str(teacher)}],
    }
    cfg.update(kw)
    return cfg


@criterion(9)
def test_criterion_9_determinism(tmp_path, small_teacher):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps(_run_cfg(small_teacher)))
    for name in ("first", "second"):
        _cli("train", "--config", str(cfg), "--seed", "11", "--out", str(tmp_path / name), "--deterministic")
    a = (tmp_path / "first" / "metrics.csv").read_bytes()
    b = (tmp_path / "second" / "metrics.csv").read_bytes()
    assert a == b
    return f"two processes, metrics.csv identical ({len(a)} bytes)"


@criterion(10)
def test_criterion_10_divergence(tmp_path, small_teacher):
    big = 1e12
    cfg = tmp_path / "diverge.json"
    cfg.write_text(json.dumps(_run_cfg(small_teacher, alpha=big)))
    out = tmp_path / "run"
    proc = _cli("train", "--config", str(cfg), "--out", str(out), check=False)
    assert proc.returncode == 3, proc.stderr
    assert "diverged" in proc.stderr
    manifest, parts = load_checkpoint(out / "last_good")  # fingerprints verified on load
    summary = json.loads((out / "summary.json").read_text())
    assert summary["diverged"] is not None and manifest["epoch"] <= summary["diverged"]["epoch"]
    with pytest.raises(DivergenceError):
        train(RunConfig.from_dict(_run_cfg(small_teacher, alpha=big)))

    spec = SweepSpec(RunConfig.from_dict(_run_cfg(small_teacher)), "alpha", [1.0, big, 0.5], seeds=[0, 1])
    rows = run_sweep(spec, tmp_path / "sweep")
    assert [r["status"] for r in rows] == ["ok", "diverged", "ok"]
    assert rows[1]["top1_mean"] is None and rows[2]["top1_mean"] is not None
    return (
        f"alpha={big:g}: exit 3 at epoch {summary['diverged']['epoch']} batch {summary['diverged']['batch']}, "
        f"last-good checkpoint intact; sweep finished cells after the diverged one"
    )


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
