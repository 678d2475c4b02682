"""Per-batch alternating training for every distillation mode.

One minibatch drives up to three ordered updates, each with its own SGD
instance so momentum buffers never mix across parameter groups:

=================  ======================  =====================  ==============
mode               teacher self-update     step 1                 step 2
=================  ======================  =====================  ==============
ATSC               -                       E_T, E_S, P            C (on E_T)
SIMKD              -                       E_S, P                 -
O_SIMKD            E_T, C (CE)             E_S, P                 -
O_ATSC             E_T, C (CE)             E_T, E_S, P            C (on E_T)
ATSC_STUDENT_FT    -                       E_T, E_S, P            C (on P(E_S))
STANDALONE         -                       E_S, head (CE)         -
MULTI_ATSC         -                       all E_Ti, E_S, all Pi  all Ci
=================  ======================  =====================  ==============

A module outside the active group runs in eval mode under ``no_grad``, so
neither its parameters nor its batch-norm statistics move.
"""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import DEFAULT_ALPHA, OptimConfig, PretrainConfig, RunConfig, TrainMode
from .data import Split, iterate_batches, make_dataset
from .errors import ConfigurationError, ContractViolation, DivergenceError
from .losses import (
    LossValue,
    cross_entropy,
    mt_step1_loss,
    mt_step2_loss,
    mt_student_logits,
    simkd_loss,
    step1_loss,
    step2_loss_student,
    step2_loss_teacher,
)
from .metrics import MetricRow, evaluate, evaluate_teacher, teacher_drift, write_metrics
from .models import (
    Encoder,
    SharedClassifier,
    build_projector,
    count_params,
    seeded,
    snapshot_params,
    student_logits,
)

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1e6


def lr_at(epoch: int, cfg: OptimConfig) -> float:
    """Step schedule: ``base_lr * decay_factor ** (milestones passed)``."""
    if not 0 <= epoch < cfg.epochs:
        raise ContractViolation(f"epoch {epoch} outside [0, {cfg.epochs})")
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.base_lr * cfg.decay_factor**passed


def make_sgd(modules, cfg: OptimConfig) -> Optional[torch.optim.SGD]:
    """Nesterov SGD; weight decay on conv/linear weights only."""
    decay, no_decay = [], []
    for m in modules:
        for p in m.parameters():
            if p.requires_grad:
                (decay if p.dim() > 1 else no_decay).append(p)
    if not decay and not no_decay:
        return None
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.SGD(
        [g for g in groups if g["params"]],
        lr=cfg.base_lr,
        momentum=cfg.momentum,
        nesterov=cfg.nesterov and cfg.momentum > 0,
    )


@dataclass
class TrainState:
    mode: TrainMode
    student: Encoder
    teachers: list
    classifiers: list
    projectors: list
    snapshots: list
    student_head: Optional[SharedClassifier]
    optim: OptimConfig
    alpha: float
    teacher_in_step1: bool = True
    divergence_threshold: float = DIVERGENCE_THRESHOLD
    epoch: int = 0
    opt_step1: Optional[torch.optim.SGD] = None
    opt_step2: Optional[torch.optim.SGD] = None
    opt_teacher: Optional[torch.optim.SGD] = None

    def step1_modules(self) -> list:
        if self.mode == TrainMode.STANDALONE_STUDENT:
            return [self.student, self.student_head]
        mods = []
        if self.mode.adaptive and self.teacher_in_step1:
            mods += self.teachers
        return mods + [self.student, *self.projectors]

    def step2_modules(self) -> list:
        return list(self.classifiers) if self.mode.adaptive else []

    def teacher_self_modules(self) -> list:
        return [*self.teachers, *self.classifiers] if self.mode.online else []

    def all_modules(self) -> list:
        mods = [*self.teachers, *self.classifiers, self.student, *self.projectors]
        if self.student_head is not None:
            mods.append(self.student_head)
        return mods

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_step1, self.opt_step2, self.opt_teacher):
            if opt is not None:
                for g in opt.param_groups:
                    g["lr"] = lr

    def student_logits(self, x):
        if self.mode == TrainMode.STANDALONE_STUDENT:
            return self.student_head(self.student(x))
        if self.mode == TrainMode.MULTI_ATSC:
            return mt_student_logits(x, self.student, self.projectors, self.classifiers)
        return student_logits(x, self.student, self.projectors[0], self.classifiers[0])

    def student_modules(self) -> list:
        if self.mode == TrainMode.STANDALONE_STUDENT:
            return [self.student, self.student_head]
        return [self.student, *self.projectors, *self.classifiers]

    def drift(self) -> Optional[float]:
        if not self.snapshots:
            return None
        with torch.no_grad():
            sq = sum(teacher_drift(s, t) ** 2 * s.n for s, t in zip(self.snapshots, self.teachers))
            n = sum(s.n for s in self.snapshots)
        return math.sqrt(sq / n)


def build_state(
    mode,
    student: Encoder,
    optim: OptimConfig,
    teachers=(),
    classifiers=(),
    projectors=(),
    student_head: Optional[SharedClassifier] = None,
    alpha: float = 1.0,
    teacher_in_step1: bool = True,
    divergence_threshold: float = DIVERGENCE_THRESHOLD,
) -> TrainState:
    """Assemble a :class:`TrainState`, snapshot the teachers and create the
    optimizers. Snapshots are taken here, once, before any update."""
    mode = TrainMode(mode)
    teachers, classifiers, projectors = list(teachers), list(classifiers), list(projectors)
    if mode == TrainMode.STANDALONE_STUDENT:
        if student_head is None or teachers:
            raise ConfigurationError("STANDALONE_STUDENT needs a student head and no teachers")
    else:
        n = len(teachers)
        if n < 1 or len(classifiers) != n or len(projectors) != n:
            raise ConfigurationError("need one classifier and one projector per teacher")
        if n > 1 and mode != TrainMode.MULTI_ATSC:
            raise ConfigurationError(f"{mode.value} takes a single teacher")
    if alpha < 0:
        raise ConfigurationError("alpha must be >= 0")
    state = TrainState(
        mode=mode,
        student=student,
        teachers=teachers,
        classifiers=classifiers,
        projectors=projectors,
        snapshots=[snapshot_params(t) for t in teachers],
        student_head=student_head,
        optim=optim,
        alpha=alpha,
        teacher_in_step1=teacher_in_step1,
        divergence_threshold=divergence_threshold,
    )
    state.opt_step1 = make_sgd(state.step1_modules(), optim)
    state.opt_step2 = make_sgd(state.step2_modules(), optim)
    state.opt_teacher = make_sgd(state.teacher_self_modules(), optim)
    return state


@dataclass
class StepLosses:
    teacher: Optional[LossValue] = None
    step1: Optional[LossValue] = None
    step2: Optional[LossValue] = None


def _check_finite(loss: LossValue, threshold: float, stage: str) -> None:
    for name, value in loss.floats().items():
        if not math.isfinite(value):
            raise DivergenceError(f"{stage}.{name}", value)
    if loss.item() > threshold:
        raise DivergenceError(f"{stage}.total", loss.item())


def _zero_grads(state: TrainState) -> None:
    for m in state.all_modules():
        m.zero_grad(set_to_none=True)


def _update(state: TrainState, opt, loss: LossValue, stage: str) -> None:
    _check_finite(loss, state.divergence_threshold, stage)
    _zero_grads(state)
    loss.backward()
    opt.step()
    _zero_grads(state)


def _set_modes(train: list, frozen: list) -> None:
    for m in frozen:
        m.eval()
    for m in train:
        m.train()


def step_batch(state: TrainState, batch, mode=None, alpha=None, run_step2: bool = True) -> StepLosses:
    """Apply one minibatch to ``state`` in place and return the losses.

    Every stage reuses the same minibatch. Losses are checked before their
    update is applied, so a :class:`DivergenceError` leaves the parameters
    as they were after the last successful stage.
    """
    if mode is not None and TrainMode(mode) != state.mode:
        raise ConfigurationError(
            f"state was built for {state.mode.value}, step requested {TrainMode(mode).value}"
        )
    alpha = state.alpha if alpha is None else alpha
    x, y = batch.x, batch.y
    out = StepLosses()
    mode = state.mode
    everything = state.all_modules()

    if mode.online:
        teacher, clf = state.teachers[0], state.classifiers[0]
        _set_modes([teacher, clf], everything)
        out.teacher = cross_entropy(y, clf(teacher(x)))
        _update(state, state.opt_teacher, out.teacher, "teacher")

    if mode == TrainMode.STANDALONE_STUDENT:
        _set_modes([state.student, state.student_head], everything)
        out.step1 = cross_entropy(y, state.student_head(state.student(x)))
        _update(state, state.opt_step1, out.step1, "step1")
        return out

    # step 1: representation matching
    active = state.step1_modules()
    _set_modes(active, everything)
    s_feat = state.student(x)
    s_proj = [p(s_feat) for p in state.projectors]
    if mode.adaptive and state.teacher_in_step1:
        t_feats = [t(x) for t in state.teachers]
    else:
        with torch.no_grad():
            t_feats = [t(x) for t in state.teachers]
    if mode == TrainMode.MULTI_ATSC:
        out.step1 = mt_step1_loss(t_feats, s_proj, state.snapshots, state.teachers, alpha)
    elif mode.adaptive:
        out.step1 = step1_loss(t_feats[0], s_proj[0], state.snapshots[0], state.teachers[0], alpha)
    else:
        out.step1 = simkd_loss(t_feats[0], s_proj[0])
    _update(state, state.opt_step1, out.step1, "step1")

    # step 2: shared-classifier fine-tune
    if mode.adaptive and run_step2:
        _set_modes(state.classifiers, everything)
        if mode == TrainMode.MULTI_ATSC:
            out.step2 = mt_step2_loss(y, state.teachers, state.classifiers, x)
        elif mode == TrainMode.ATSC_STUDENT_FT:
            out.step2 = step2_loss_student(y, state.student, state.projectors[0], state.classifiers[0], x)
        else:
            out.step2 = step2_loss_teacher(y, state.teachers[0], state.classifiers[0], x)
        _update(state, state.opt_step2, out.step2, "step2")
    return out


# --------------------------------------------------------------------------- #
# Runs
# --------------------------------------------------------------------------- #


def set_deterministic(flag: bool) -> None:
    torch.use_deterministic_algorithms(flag)


def _dtype(name: str):
    return getattr(torch, name)


def _check_encoder_fits(spec, split: Split, where: str) -> None:
    x = split.x
    if spec.kind == "mlp":
        if int(np.prod(x.shape[1:])) != spec.in_channels:
            raise ConfigurationError(
                f"{where}.in_channels={spec.in_channels} but inputs have {int(np.prod(x.shape[1:]))} features"
            )
    elif x.dim() != 4 or x.shape[1] != spec.in_channels or tuple(x.shape[2:]) != spec.input_size:
        raise ConfigurationError(f"{where}: cnn spec does not match input shape {tuple(x.shape[1:])}")


def _accumulate(acc: dict, losses: StepLosses) -> None:
    if losses.step1 is not None:
        for k, v in losses.step1.floats().items():
            acc.setdefault(k, []).append(v)
    extra = losses.step2 or losses.teacher
    if extra is not None:
        acc.setdefault("ce", []).append(extra.item())


def _mean(acc: dict, key: str) -> Optional[float]:
    v = acc.get(key)
    return float(np.mean(v)) if v else None


@dataclass
class RunRecord:
    config: dict
    rows: list = field(default_factory=list)
    student_top1: Optional[float] = None
    teacher_top1_before: Optional[float] = None
    teacher_top1_after: Optional[float] = None
    drift: list = field(default_factory=list)
    params: Optional[dict] = None
    diverged: Optional[dict] = None
    out_dir: Optional[str] = None
    state: Optional[TrainState] = field(default=None, repr=False)

    def summary(self) -> dict:
        cfg = self.config
        return {
            "mode": cfg["mode"],
            "seed": cfg["seed"],
            "alpha": cfg["alpha"] if cfg["alpha"] is not None else DEFAULT_ALPHA,
            "reduction_factor": cfg["reduction_factor"],
            "scenario": scenario_key(cfg),
            "student_top1": self.student_top1,
            "teacher_top1_before": self.teacher_top1_before,
            "teacher_top1_after": self.teacher_top1_after,
            "teacher_drift_rms": self.drift,
            "params": self.params,
            "diverged": self.diverged,
            "config": cfg,
        }


def scenario_key(cfg: dict) -> str:
    """Teacher / student / dataset description used to group runs in reports."""
    ds = cfg["dataset"]
    data = ds["kind"] if ds["kind"] == "synthetic" else f"image_folder:{ds['path']}"
    s = cfg["student"]
    student = f"{s['kind']}{s['widths']}->{s['out_channels']}"
    teachers = ",".join(Path(t["checkpoint"]).name if t.get("checkpoint") else "init" for t in cfg["teachers"])
    return f"{data}|T[{teachers}]|S[{student}]"


def _load_teacher(path, dtype):
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise ConfigurationError(f"teacher checkpoint not found: {path}")
    manifest, parts = load_checkpoint(path)
    if "encoder" not in parts or "classifier" not in parts:
        raise ConfigurationError(f"{path}: not a teacher checkpoint")
    enc, clf = parts["encoder"].to(dtype), parts["classifier"].to(dtype)
    enc.role = "teacher"
    return manifest, enc, clf


def _warn_data_mismatch(manifest: dict, spec, data_seed: int, i: int) -> None:
    # synthetic clusters are regenerated from the seed, so a teacher only
    # knows the task it was pretrained on
    pre = manifest.get("dataset")
    if spec.kind != "synthetic" or not pre or pre.get("kind") != "synthetic":
        return
    pre_seed = pre["seed"] if pre.get("seed") is not None else manifest.get("seed")
    if pre_seed is not None and pre_seed != data_seed:
        warnings.warn(
            f"teachers[{i}] was pretrained on synthetic data seed {pre_seed} but this run generates "
            f"seed {data_seed}; set dataset.seed to keep the task fixed across run seeds"
        )


def _checkpoint_parts(state: TrainState) -> dict:
    parts = {"student": state.student}
    for i, (t, c, p) in enumerate(zip(state.teachers, state.classifiers, state.projectors)):
        parts[f"teacher_{i}"] = t
        parts[f"classifier_{i}"] = c
        parts[f"projector_{i}"] = p
    if state.student_head is not None:
        parts["student_head"] = state.student_head
    return parts


def train(config: RunConfig, out_dir=None) -> RunRecord:
    """Run ``config.optim.epochs`` epochs of :func:`step_batch`.

    With an output directory, writes ``metrics.csv``, ``summary.json``, the
    final checkpoint under ``checkpoint/`` and, after every completed epoch,
    ``last_good/``. On divergence the partial metrics and summary are still
    written and :class:`DivergenceError` is re-raised.
    """
    out_dir = Path(out_dir or config.out_dir) if (out_dir or config.out_dir) else None
    mode, seed, cfg = config.mode, config.seed, config.optim
    dtype = _dtype(config.dtype)
    set_deterministic(config.deterministic)

    data_seed = config.dataset.seed if config.dataset.seed is not None else seed
    train_split, test_split = make_dataset(config.dataset, seed=data_seed)
    train_split, test_split = train_split.to(dtype), test_split.to(dtype)
    k = train_split.num_classes
    _check_encoder_fits(config.student, train_split, "student")

    teachers, classifiers, manifests = [], [], []
    for i, ref in enumerate(config.teachers):
        if ref.checkpoint:
            manifest, enc, clf = _load_teacher(ref.checkpoint, dtype)
            if clf.num_classes != k:
                raise ConfigurationError(f"teachers[{i}]: classifier has {clf.num_classes} classes, data has {k}")
            _warn_data_mismatch(manifest, config.dataset, data_seed, i)
            manifests.append(manifest)
            teachers.append(enc)
            classifiers.append(clf)

    with seeded(seed):
        for i, ref in enumerate(config.teachers):
            if not ref.checkpoint:
                _check_encoder_fits(ref.encoder, train_split, f"teachers[{i}].encoder")
                teachers.append(Encoder(ref.encoder, role="teacher").to(dtype))
                classifiers.append(SharedClassifier(ref.encoder.out_channels, k).to(dtype))
        student = Encoder(config.student, role="student").to(dtype)
        projectors = [
            build_projector(config.student.out_channels, t.out_channels, config.reduction_factor).to(dtype)
            for t in teachers
        ]
        head = None
        if mode == TrainMode.STANDALONE_STUDENT:
            head = SharedClassifier(config.student.out_channels, k).to(dtype)

    state = build_state(
        mode, student, cfg, teachers, classifiers, projectors, head,
        alpha=config.alpha_value, divergence_threshold=config.divergence_threshold,
    )
    record = RunRecord(config=config.to_dict(), out_dir=str(out_dir) if out_dir else None)
    if teachers:
        record.teacher_top1_before = evaluate_teacher(teachers[0], classifiers[0], test_split)
        record.params = count_params(teachers[0], student, projectors[0], classifiers[0]).to_dict()
    else:
        record.params = count_params(student=student, student_head=head).to_dict()

    manifest_base = {
        "mode": mode.value, "seed": seed, "alpha": config.alpha_value, "r": config.reduction_factor,
        "dataset": config.dataset.to_dict(),
        "anchor_fingerprints": [s.fingerprint for s in state.snapshots],
    }

    def save(name, epoch):
        if out_dir is not None:
            save_checkpoint(out_dir / name, _checkpoint_parts(state), epoch=epoch, **manifest_base)

    def finish():
        if out_dir is None:
            return
        write_metrics(out_dir / "metrics.csv", record.rows)
        (out_dir / "summary.json").write_text(json.dumps(record.summary(), indent=2) + "\n")

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    save("last_good", 0)

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        lr = lr_at(epoch, cfg)
        state.set_lr(lr)
        t0 = time.perf_counter()
        acc: dict = {}
        for b, batch in enumerate(iterate_batches(train_split, cfg.batch_size, seed, epoch)):
            try:
                losses = step_batch(state, batch)
            except DivergenceError as err:
                err.epoch, err.batch = epoch, b
                err.args = (f"training diverged at epoch {epoch}, batch {b}: {err.component}={err.value!r}",)
                record.diverged = {"epoch": epoch, "batch": b, "component": err.component, "value": err.value}
                finish()
                raise
            _accumulate(acc, losses)
        wall = 0.0 if config.deterministic else time.perf_counter() - t0
        drift = state.drift()
        record.drift.append(drift)
        mods = state.student_modules()
        train_acc = evaluate(state.student_logits, train_split, mods)
        test_acc = evaluate(state.student_logits, test_split, mods)
        with torch.no_grad():
            test_ce = cross_entropy(
                test_split.y, torch.cat([state.student_logits(test_split.x[i:i + 512]) for i in range(0, len(test_split), 512)])
            ).item()
        record.rows.append(MetricRow(
            epoch, "train", train_acc, _mean(acc, "feat_mse"), _mean(acc, "anchor"),
            _mean(acc, "ce"), _mean(acc, "total"), drift, lr, wall,
        ))
        record.rows.append(MetricRow(epoch, "test", test_acc, ce=test_ce, teacher_drift_rms=drift, lr=lr))
        record.student_top1 = test_acc
        save("last_good", epoch + 1)

    if teachers:
        record.teacher_top1_after = evaluate_teacher(teachers[0], classifiers[0], test_split)
    save("checkpoint", cfg.epochs)
    finish()
    record.state = state
    return record


def pretrain_teacher(config: PretrainConfig, out_dir=None):
    """Cross-entropy training of a teacher encoder and classifier.

    Returns ``(manifest, encoder, classifier)``; with an output directory the
    checkpoint (``encoder`` and ``classifier`` parts) is written there and the
    manifest records the test accuracy.
    """
    out_dir = out_dir or config.out_dir
    dtype = _dtype(config.dtype)
    set_deterministic(config.deterministic)
    seed, cfg = config.seed, config.optim
    train_split, test_split = make_dataset(config.dataset, seed=config.dataset.seed if config.dataset.seed is not None else seed)
    train_split, test_split = train_split.to(dtype), test_split.to(dtype)
    _check_encoder_fits(config.encoder, train_split, "encoder")
    with seeded(seed):
        enc = Encoder(config.encoder, role="teacher").to(dtype)
        clf = SharedClassifier(config.encoder.out_channels, train_split.num_classes).to(dtype)
    opt = make_sgd([enc, clf], cfg)
    for epoch in range(cfg.epochs):
        for g in opt.param_groups:
            g["lr"] = lr_at(epoch, cfg)
        enc.train(), clf.train()
        for b, batch in enumerate(iterate_batches(train_split, cfg.batch_size, seed, epoch)):
            loss = cross_entropy(batch.y, clf(enc(batch.x)))
            try:
                _check_finite(loss, DIVERGENCE_THRESHOLD, "pretrain")
            except DivergenceError as err:
                err.epoch, err.batch = epoch, b
                raise
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    test_acc = evaluate_teacher(enc, clf, test_split)
    manifest = {
        "mode": "PRETRAIN", "seed": seed, "epoch": cfg.epochs, "alpha": None, "r": None,
        "dataset": config.dataset.to_dict(), "test_top1": test_acc,
    }
    if out_dir is not None:
        manifest = save_checkpoint(out_dir, {"encoder": enc, "classifier": clf}, **manifest)
    return manifest, enc, clf
