"""Dataset distillation with teacher-ranked patch initialization and staggered-start synthesis."""

from .core import (ConfigError, DatasetProfile, DistilledDataset, EvalConfig, IntegrityError, RecoveryConfig,
                   SyntheticSample, get_profile, load_distilled, save_distilled, verify_distilled)
from .schedule import EarlyLateSchedule, make_schedule, savings_ratio, schedule_for, total_image_iterations
from .teacher import TeacherSnapshot, forward, load_teacher, squeeze

__version__ = "0.1.0"
