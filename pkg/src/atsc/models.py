"""Encoders, the channel-matching projector, the shared classifier and
parameter snapshots.

Feature maps use torch's channels-first layout, ``(batch, Ch, H, W)``,
everywhere in the package. MLP encoders emit ``(batch, Ch, 1, 1)`` so the
projector and classifier see a single layout.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractViolation, UnsupportedShapeError


# --------------------------------------------------------------------------- #
# Encoders
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture of a small encoder.

    ``kind="mlp"`` treats ``in_channels`` as the input vector length and
    ignores ``input_size``. ``kind="cnn"`` stacks 3x3 conv blocks, one per
    entry in ``widths`` plus a final block producing ``out_channels``;
    ``strides`` (same length as ``widths``) downsamples between blocks.
    Width multipliers such as "x4" are expressed by scaling ``widths``.
    """

    kind: str
    in_channels: int
    widths: tuple = ()
    out_channels: int = 16
    input_size: Optional[tuple] = None
    strides: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.input_size is not None:
            object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if self.strides is not None:
            object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.kind not in ("mlp", "cnn"):
            raise ConfigurationError(f"encoder kind must be 'mlp' or 'cnn', got {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1 or any(w < 1 for w in self.widths):
            raise ConfigurationError("encoder channel counts must be positive")
        if self.kind == "cnn":
            if self.input_size is None or len(self.input_size) != 2:
                raise ConfigurationError("cnn encoder needs input_size=(H, W)")
            if self.strides is not None and len(self.strides) != len(self.widths):
                raise ConfigurationError("strides must have one entry per width")

    @property
    def output_hw(self) -> tuple:
        if self.kind == "mlp":
            return (1, 1)
        h, w = self.input_size
        for s in self.strides or ():
            h = (h - 1) // s + 1
            w = (w - 1) // s + 1
        return (h, w)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("widths", "input_size", "strides"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderSpec":
        known = {"kind", "in_channels", "widths", "out_channels", "input_size", "strides"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown encoder keys: {sorted(unknown)}")
        return cls(**d)


class Encoder(nn.Module):
    """Feature extractor built from an :class:`EncoderSpec`."""

    def __init__(self, spec: EncoderSpec, role: str = "student"):
        super().__init__()
        if role not in ("teacher", "student"):
            raise ConfigurationError(f"role must be teacher or student, got {role!r}")
        self.spec = spec
        self.role = role
        chans = [spec.in_channels, *spec.widths, spec.out_channels]
        layers = []
        if spec.kind == "mlp":
            for c_in, c_out in zip(chans[:-1], chans[1:]):
                layers += [nn.Linear(c_in, c_out, bias=False), nn.BatchNorm1d(c_out), nn.ReLU()]
        else:
            strides = list(spec.strides or [1] * len(spec.widths)) + [1]
            for c_in, c_out, s in zip(chans[:-1], chans[1:], strides):
                layers += [
                    nn.Conv2d(c_in, c_out, 3, stride=s, padding=1, bias=False),
                    nn.BatchNorm2d(c_out),
                    nn.ReLU(),
                ]
        self.body = nn.Sequential(*layers)
        reset_parameters(self)

    @property
    def out_channels(self) -> int:
        return self.spec.out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.spec.kind == "mlp":
            x = x.reshape(x.shape[0], -1)
            return self.body(x)[:, :, None, None]
        return self.body(x)


# --------------------------------------------------------------------------- #
# Projector and classifier
# --------------------------------------------------------------------------- #


class Projector(nn.Module):
    """Three conv layers (1x1, 3x3, 1x1) mapping ``ch_s`` to ``ch_t`` channels.

    Each conv is bias-free and followed by batch norm and ReLU. The hidden
    width is ``ch_t // r``.
    """

    def __init__(self, ch_s: int, ch_t: int, r: int):
        super().__init__()
        self.ch_in, self.ch_out, self.r = ch_s, ch_t, r
        hidden = ch_t // r
        self.hidden = hidden
        self.layers = nn.Sequential(
            nn.Conv2d(ch_s, hidden, 1, bias=False),
            nn.BatchNorm2d(hidden),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1, bias=False),
            nn.BatchNorm2d(hidden),
            nn.ReLU(),
            nn.Conv2d(hidden, ch_t, 1, bias=False),
            nn.BatchNorm2d(ch_t),
            nn.ReLU(),
        )
        reset_parameters(self)

    @property
    def channel_plan(self) -> list:
        """``[(c_in, c_out, kernel), ...]`` for the three convs."""
        return [
            (m.in_channels, m.out_channels, m.kernel_size[0])
            for m in self.layers
            if isinstance(m, nn.Conv2d)
        ]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


def build_projector(ch_s: int, ch_t: int, r: int) -> Projector:
    if min(ch_s, ch_t, r) < 1:
        raise ConfigurationError(f"projector sizes must be positive (ch_s={ch_s}, ch_t={ch_t}, r={r})")
    if r > ch_t:
        raise ConfigurationError(f"reduction factor r={r} exceeds teacher channels {ch_t}")
    if ch_t % r:
        warnings.warn(
            f"r={r} does not divide ch_t={ch_t}; hidden width floored to {ch_t // r}",
            stacklevel=2,
        )
    return Projector(ch_s, ch_t, r)


class SharedClassifier(nn.Module):
    """Global average pooling followed by one affine map to ``num_classes`` logits."""

    def __init__(self, ch_in: int, num_classes: int):
        super().__init__()
        if ch_in < 1 or num_classes < 2:
            raise ConfigurationError("classifier needs ch_in >= 1 and num_classes >= 2")
        self.ch_in, self.num_classes = ch_in, num_classes
        self.fc = nn.Linear(ch_in, num_classes)
        reset_parameters(self)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        if feat.dim() == 4:
            feat = feat.mean(dim=(2, 3))
        return self.fc(feat)


def reset_parameters(module: nn.Module) -> None:
    """He fan-in init for conv/linear-in-encoder weights, BN at (1, 0), and
    uniform fan-in for the classifier's affine map. Draws from torch's global
    RNG, so seed it (see :func:`seeded`) for reproducible builds."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            if m.bias is None:
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            else:
                bound = 1.0 / np.sqrt(m.in_features)
                nn.init.uniform_(m.weight, -bound, bound)
                nn.init.uniform_(m.bias, -bound, bound)


class seeded:
    """Context manager: run model construction under a fixed torch seed
    without disturbing the caller's RNG state."""

    def __init__(self, seed: int):
        self.seed = seed
        self._fork = None

    def __enter__(self):
        self._fork = torch.random.fork_rng()
        self._fork.__enter__()
        torch.manual_seed(self.seed)
        return self

    def __exit__(self, *exc):
        return self._fork.__exit__(*exc)


# --------------------------------------------------------------------------- #
# Spatial alignment
# --------------------------------------------------------------------------- #


def align_spatial(teacher_feat: torch.Tensor, student_hw: Sequence[int]) -> torch.Tensor:
    """Average-pool a teacher feature map down to the student's (H, W)."""
    th, tw = teacher_feat.shape[-2:]
    sh, sw = student_hw
    if (th, tw) == (sh, sw):
        return teacher_feat
    if th < sh or tw < sw:
        raise UnsupportedShapeError(
            f"teacher feature map {th}x{tw} is smaller than student {sh}x{sw}"
        )
    if th % sh or tw % sw:
        raise UnsupportedShapeError(
            f"teacher feature map {th}x{tw} is not an integer multiple of {sh}x{sw}"
        )
    k = (th // sh, tw // sw)
    return F.avg_pool2d(teacher_feat, kernel_size=k, stride=k)


# --------------------------------------------------------------------------- #
# Snapshots
# --------------------------------------------------------------------------- #


def trainable_parameters(module: nn.Module) -> list:
    return [p for p in module.parameters() if p.requires_grad]


def flatten_parameters(module: nn.Module) -> torch.Tensor:
    params = trainable_parameters(module)
    if not params:
        return torch.zeros(0)
    return torch.cat([p.reshape(-1) for p in params])


def _fingerprint(values: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(values.dtype).encode())
    h.update(np.ascontiguousarray(values).tobytes())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class ParameterSnapshot:
    """Read-only flattened copy of a module's trainable parameters."""

    _values: torch.Tensor = field(repr=False)
    names: tuple
    shapes: tuple
    fingerprint: str

    @property
    def n(self) -> int:
        return self._values.numel()

    @property
    def values(self) -> np.ndarray:
        out = self._values.numpy().copy()
        out.flags.writeable = False
        return out

    def as_tensor(self) -> torch.Tensor:
        """Detached tensor view of the anchor, for loss arithmetic. Do not mutate."""
        return self._values

    def __len__(self) -> int:
        return self.n


def snapshot_params(module: nn.Module) -> ParameterSnapshot:
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    with torch.no_grad():
        values = flatten_parameters(module).detach().clone()
    return ParameterSnapshot(
        _values=values,
        names=tuple(n for n, _ in named),
        shapes=tuple(tuple(p.shape) for _, p in named),
        fingerprint=_fingerprint(values.numpy()),
    )


def restore_snapshot(module: nn.Module, snap: ParameterSnapshot) -> None:
    """Copy snapshot values back into ``module``'s trainable parameters."""
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    if tuple(n for n, _ in named) != snap.names:
        raise ContractViolation("snapshot was taken from a module with a different layout")
    offset = 0
    src = snap.as_tensor()
    with torch.no_grad():
        for _, p in named:
            k = p.numel()
            p.copy_(src[offset : offset + k].view_as(p))
            offset += k


def parameter_fingerprint(module: nn.Module) -> str:
    with torch.no_grad():
        return _fingerprint(flatten_parameters(module).detach().cpu().numpy())


# --------------------------------------------------------------------------- #
# Parameter accounting
# --------------------------------------------------------------------------- #


def num_trainable(module: Optional[nn.Module]) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


@dataclass
class ParamReport:
    counts: dict
    increase_percent: Optional[float]

    @property
    def teacher_total(self) -> int:
        return self.counts.get("teacher", 0) + self.counts.get("classifier", 0)

    def to_dict(self) -> dict:
        return {"counts": dict(self.counts), "increase_percent": self.increase_percent}


def count_params(
    teacher: Optional[nn.Module] = None,
    student: Optional[nn.Module] = None,
    projector: Optional[nn.Module] = None,
    classifier: Optional[nn.Module] = None,
    student_head: Optional[nn.Module] = None,
) -> ParamReport:
    """Trainable parameter counts per part and the relative size increase.

    The teacher network is ``teacher`` (encoder) plus ``classifier``. The
    student with projector is ``student + projector + classifier``; without
    projector it is ``student + student_head``, where ``student_head`` is the
    student's own classifier and defaults to one the size of the shared
    classifier. ``increase_percent`` is the difference between those two,
    as a percentage of the teacher network, or ``None`` without a teacher.
    """
    parts = {
        "teacher": teacher,
        "student": student,
        "projector": projector,
        "classifier": classifier,
        "student_head": student_head,
    }
    counts = {k: num_trainable(m) for k, m in parts.items() if m is not None}
    teacher_total = counts.get("teacher", 0) + counts.get("classifier", 0)
    if teacher is None or teacher_total == 0:
        return ParamReport(counts, None)
    head = counts.get("student_head", counts.get("classifier", 0))
    added = counts.get("projector", 0) + counts.get("classifier", 0) - head
    return ParamReport(counts, 100.0 * added / teacher_total)


# --------------------------------------------------------------------------- #
# Inference path
# --------------------------------------------------------------------------- #


def check_compatible(student: Encoder, projector: Projector, classifier: SharedClassifier) -> None:
    if student.out_channels != projector.ch_in:
        raise ConfigurationError(
            f"student emits {student.out_channels} channels, projector expects {projector.ch_in}"
        )
    if projector.ch_out != classifier.ch_in:
        raise ConfigurationError(
            f"projector emits {projector.ch_out} channels, classifier expects {classifier.ch_in}"
        )


def student_logits(x, student: Encoder, projector: Projector, classifier: SharedClassifier):
    check_compatible(student, projector, classifier)
    return classifier(projector(student(x)))


@torch.no_grad()
def student_predict(x, student: Encoder, projector: Projector, classifier: SharedClassifier):
    """Class probabilities of the student routed through the shared classifier.

    All three modules are put in eval mode.
    """
    for m in (student, projector, classifier):
        m.eval()
    return torch.softmax(student_logits(x, student, projector, classifier), dim=-1)


def modules_of(*mods: Iterable) -> list:
    out = []
    for m in mods:
        if m is None:
            continue
        if isinstance(m, nn.Module):
            out.append(m)
        else:
            out.extend(x for x in m if x is not None)
    return out
