"""Teacher, per-class generator ensemble and a distilled student on the toy task.

Reduced budgets so the whole thing runs in a few minutes on one core.
Writes a grid of generated samples to samples.pgm.
"""
from gdfd.config import parse_config
from gdfd.data import image_grid, write_image
from gdfd.distill import evaluate
from gdfd.generators import EnsembleSource, class_coverage, sample_ensemble
from gdfd.pipeline import build_ensemble, distill_student, make_data, train_teacher

cfg = parse_config(overrides=["n_train=2000", "n_test=500", "teacher_steps=400",
                              "gen_steps=150", "steps=600", "warmup=50", "decay_interval=50",
                              "eval_every=200"])
train, test = make_data(cfg)

teacher, _ = train_teacher(cfg, 0, train, test)
print("teacher", evaluate(teacher, test))

ensemble = build_ensemble(teacher, cfg, seed=0, train=train)
report = class_coverage(teacher, EnsembleSource(ensemble), 1000)
print("coverage", report.coverage, "histogram", report.histogram.tolist())

images, labels, _ = sample_ensemble(ensemble, 40, seed=1)
write_image(image_grid(images, ncols=10), "samples.pgm")

# the student never sees a real training image
student, history = distill_student(teacher, EnsembleSource(ensemble), cfg, 0, test)
for row in history:
    if row.get("eval_accuracy") is not None:
        print(row["step"] + 1, round(row["eval_accuracy"], 3))
