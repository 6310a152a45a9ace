import numpy as np
import pytest

from gdfd.data import Dataset, gen_toy_dataset
from gdfd.distill import (DatasetSource, DistillConfig, DivergenceError, NoiseSource, distill,
                          evaluate, final_accuracy, read_metrics_csv, train_classifier,
                          write_metrics_csv)
from gdfd.models import build_classifier

TINY = DistillConfig(steps=6, batch_size=8, base_lr=0.05, warmup=2, decay_interval=2, eval_every=3)


class ConstantModel:
    def __init__(self, label):
        self.label = label

    def predict(self, images, batch_size=500):
        return np.full(len(images), self.label)


@pytest.fixture(scope="module")
def small_data():
    return gen_toy_dataset(seed=0, n_train=64, n_test=40)


@pytest.fixture(scope="module")
def teacher():
    return build_classifier(seed=0).freeze()


def test_config_defaults_and_validation():
    cfg = DistillConfig()
    assert (cfg.steps, cfg.warmup, cfg.decay, cfg.decay_interval) == (60000, 5000, 0.977, 1000)
    assert (cfg.momentum, cfg.temperature) == (0.9, 3.0)
    toy = DistillConfig.toy()
    assert (toy.steps, toy.warmup, toy.decay_interval) == (3000, 200, 100)
    for bad in (dict(steps=0), dict(warmup=60000), dict(decay=0.0), dict(decay=1.5),
                dict(temperature=0.0)):
        with pytest.raises(ValueError):
            DistillConfig(**bad)
    assert toy.lr_at(200) == toy.base_lr


def test_evaluate_constant_model():
    zeros = Dataset(np.zeros((5, 1, 4, 4)), np.zeros(5, np.int64), 3)
    others = Dataset(np.zeros((4, 1, 4, 4)), np.array([1, 2, 1, 2]), 3)
    assert evaluate(ConstantModel(0), zeros) == 1.0
    assert evaluate(ConstantModel(0), others) == 0.0
    with pytest.raises(ValueError):
        evaluate(ConstantModel(0), Dataset(np.zeros((0, 1, 4, 4)), np.zeros(0, np.int64), 3))


def test_fresh_model_is_near_chance():
    _, test = gen_toy_dataset(seed=1, n_train=10, n_test=500)
    for seed in range(5):
        assert 0.02 <= evaluate(build_classifier(seed=seed), test) <= 0.25


def test_evaluation_ignores_batch_size(small_data):
    model = build_classifier(seed=3)
    _, test = small_data
    assert evaluate(model, test, batch_size=7) == evaluate(model, test, batch_size=500)


def test_distill_is_deterministic(teacher, small_data):
    train, test = small_data
    runs = []
    for _ in range(2):
        student, hist = distill(teacher, build_classifier(width=0.5, seed=1), DatasetSource(train),
                                TINY, test)
        runs.append((student.state_dict(), hist))
    for k, v in runs[0][0].items():
        assert np.array_equal(v, runs[1][0][k]), k
    assert runs[0][1] == runs[1][1]


def test_distill_history_and_teacher_untouched(teacher, small_data):
    _, test = small_data
    before = {k: v.copy() for k, v in teacher.state_dict().items()}
    _, hist = distill(teacher, build_classifier(width=0.5, seed=1), NoiseSource((1, 16, 16)), TINY, test)
    assert [r["step"] for r in hist] == list(range(6))
    assert [r["eval_accuracy"] is not None for r in hist] == [False, False, True, False, False, True]
    assert hist[0]["lr"] == 0.0 and hist[2]["lr"] == 0.05
    assert final_accuracy(hist) == hist[-1]["eval_accuracy"]
    for k, v in teacher.state_dict().items():
        assert np.array_equal(v, before[k])


class LabelTrap:
    """An image source whose dataset labels would raise if anything read them."""

    def __init__(self, images):
        self.images = images

    def sample(self, n, rng):
        return self.images[rng.integers(0, len(self.images), n)]


def test_distill_reads_only_images(teacher, small_data):
    train, _ = small_data
    distill(teacher, build_classifier(width=0.5, seed=1), LabelTrap(train.images), TINY)


def test_dataset_source_cycles_with_reshuffle(small_data):
    train, _ = small_data
    src = DatasetSource(train)
    rng = np.random.default_rng(0)
    first = src.sample(64, rng)
    second = src.sample(64, rng)
    key = lambda a: sorted(map(bytes, a.reshape(len(a), -1).view(np.uint8)))  # noqa: E731
    assert key(first) == key(train.images) == key(second)
    assert not np.array_equal(first, second)
    assert src.sample(100, rng).shape[0] == 100


def test_noise_source_in_range():
    x = NoiseSource((1, 16, 16)).sample(50, np.random.default_rng(0))
    assert x.shape == (50, 1, 16, 16) and x.min() >= -1 and x.max() <= 1


def test_divergence_reports_step(small_data):
    train, _ = small_data
    bad = build_classifier(seed=0)
    bad.params["fc/w"].data[:] = np.nan
    with pytest.raises(DivergenceError) as info:
        distill(bad.freeze(), build_classifier(width=0.5), DatasetSource(train), TINY)
    assert info.value.step == 0


def test_supervised_training_lowers_loss(small_data):
    train, _ = small_data
    cfg = DistillConfig(steps=30, batch_size=16, base_lr=0.05, warmup=5, decay_interval=10, eval_every=10)
    _, hist = train_classifier(build_classifier(seed=0), train, cfg)
    assert np.mean([r["kd_loss"] for r in hist[-5:]]) < np.mean([r["kd_loss"] for r in hist[:5]])


def test_metrics_csv_round_trip(tmp_path, teacher, small_data):
    _, test = small_data
    _, hist = distill(teacher, build_classifier(width=0.5, seed=1), NoiseSource((1, 16, 16)), TINY, test)
    path = tmp_path / "m.csv"
    write_metrics_csv(hist, str(path))
    assert path.read_text().splitlines()[0] == "step,lr,kd_loss,eval_accuracy"
    assert read_metrics_csv(str(path)) == hist


@pytest.mark.slow
def test_real_image_distillation_tracks_supervised(toy_cfg, toy_teacher, toy_data, supervised_student):
    from gdfd.pipeline import distill_student
    train, test = toy_data
    student, _ = distill_student(toy_teacher, DatasetSource(train), toy_cfg, 0, test)
    assert evaluate(student, test) >= evaluate(supervised_student, test) - 0.02
