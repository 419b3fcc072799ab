"""Certified training by coupling expressive IBP losses with feature-space distillation."""

from .attacks import AttackConfig, pgd
from .bounds import BoundsPair, PerturbationSpec, ibp_forward, logit_diff_lower_bound
from .losses import LossConfig, TeacherSnapshot, training_loss
from .network import Network, init, load, save
from .tensor import Tensor, backward, no_grad
from .trainer import EpsSchedule, TrainSchedule, evaluate, train_student, train_teacher
from .verifier import VerificationResult, brute_force_min, verify_complete, verify_incomplete

__version__ = "0.1.0"
