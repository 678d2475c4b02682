#!/usr/bin/env python3
# Parameter cost of classifier sharing. The projector's hidden width is
# Ch_T / r, so larger reduction factors shrink the overhead.

from atsc import Encoder, EncoderSpec, SharedClassifier, build_projector, count_params

teacher = Encoder(EncoderSpec("cnn", 3, (64, 128, 256), 256, input_size=(32, 32)), role="teacher")
student = Encoder(EncoderSpec("cnn", 3, (16, 32), 64, input_size=(32, 32)))
classifier = SharedClassifier(256, 100)
head = SharedClassifier(64, 100)

print(f"{'r':>3} {'projector':>10} {'increase %':>11}  plan")
for r in (1, 2, 4, 8):
    proj = build_projector(64, 256, r)
    rep = count_params(teacher, student, proj, classifier, student_head=head)
    print(f"{r:>3} {rep.counts['projector']:>10} {rep.increase_percent:>11.2f}  {proj.channel_plan}")
