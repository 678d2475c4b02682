#!/usr/bin/env python3
# How far does the teacher move? Sweep the anchor weight and plot final drift
# and accuracy. Very large values blow up the loss; the sweep records the
# divergence and moves on.

import sys
import tempfile
from pathlib import Path

from atsc import DatasetSpec, EncoderSpec, OptimConfig, PretrainConfig, RunConfig, SweepSpec, TeacherRef, pretrain_teacher
from atsc.cli import SWEEP_COLUMNS, render_text, run_sweep

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp())
data = DatasetSpec(n_train=1000, n_test=500)
optim = OptimConfig(base_lr=0.3, epochs=15, milestones=(10,))

pretrain_teacher(
    PretrainConfig(data, EncoderSpec("mlp", data.dims, (128,), 32), OptimConfig(base_lr=0.1, epochs=20, milestones=(15,))),
    out_dir=out / "teacher",
)

base = RunConfig("ATSC", data, EncoderSpec("mlp", data.dims, (16,), 16), [TeacherRef(str(out / "teacher"))], optim=optim)
rows = run_sweep(SweepSpec(base, "alpha", [0.1, 1.0, 10.0, 100.0, 1e3, 1e4, 1e12], seeds=[0, 1]), out / "sweep")
print(render_text(SWEEP_COLUMNS, rows))
print(f"plot: {out / 'sweep' / 'sweep.png'}")
