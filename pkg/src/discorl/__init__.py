"""Continual reinforcement learning by policy distillation in a pixel 2D arena."""
from .arena import Arena, ArenaConfig, VecArena
from .distill import DistillDataset, StudentPolicy, generate_gridwalker, generate_onpolicy, train_student
from .evaluation import EvalReport, evaluate
from .nn import ConfigError, Network
from .pipeline import PipelineConfig, memory_report, run_discorl
from .ppo import PPOConfig, Teacher, train_teacher
from .srl import SrlModel, collect_random_dataset, train_srl

__version__ = "0.1.0"
