"""Per-class batch-norm moments versus the running statistics of a trained teacher.

Trains a small teacher (seconds), then measures how far each class's
real-image moments sit from the stored running averages.
"""
import numpy as np

from gdfd.config import parse_config
from gdfd.losses import moment_l2
from gdfd.pipeline import make_data, train_teacher
from gdfd.stats import estimate_class_moments_from_data, extract_running_moments

cfg = parse_config(overrides=["n_train=2000", "n_test=500", "teacher_steps=400"])
train, test = make_data(cfg)
teacher, _ = train_teacher(cfg, 0, train, test)
print("teacher accuracy", float((teacher.predict(test.images) == test.labels).mean()))

running = extract_running_moments(teacher)
for c in range(cfg["num_classes"]):
    per_class = estimate_class_moments_from_data(teacher, train, c, 100)
    gaps = [moment_l2(m, v, rm, rv) for (m, v), (rm, rv) in zip(per_class.layers, running.layers)]
    print(f"class {c}: per-layer distance to running moments", np.round(gaps, 3))
