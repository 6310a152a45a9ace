"""Data-free knowledge distillation with conditional generators, on a numpy autodiff core."""
from .tensor import Tensor, backward
from .models import Classifier, Generator, build_classifier, build_generator
from .losses import LossWeights, MomentTargets, generator_objective, image_loss, kd_loss
from .stats import group_classes, extract_running_moments, estimate_class_moments_from_data
from .generators import GenTrainConfig, train_generator, train_ensemble, sample_ensemble, class_coverage
from .distill import DistillConfig, distill, evaluate, train_classifier
from .data import gen_toy_dataset, load_idx, write_image
from .checkpoint import load_checkpoint, save_checkpoint, load_model, save_model
from .config import parse_config

__version__ = "0.1.0"
