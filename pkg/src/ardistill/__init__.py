"""Distilled decoding: few-step generation from autoregressive token models via flow matching."""
from .core import Codebook, NoiseSeq, TokenSeq, TrajectoryPoint, concat_mixed, nearest_token, slice_head
from .flowmatch import SolverConfig, fm_map
from .sampler import StepReport, sample, sample_hybrid
from .student import StudentModel, TimestepSchedule, train_student
from .teacher import TabularTeacher, fit_tabular, markov_teacher
from .trajgen import PairStore, generate_dataset, generate_pair

__version__ = "0.1.0"

__all__ = ["Codebook", "NoiseSeq", "PairStore", "SolverConfig", "StepReport", "StudentModel", "TabularTeacher",
           "TimestepSchedule", "TokenSeq", "TrajectoryPoint", "concat_mixed", "fit_tabular", "fm_map",
           "generate_dataset", "generate_pair", "markov_teacher", "nearest_token", "sample", "sample_hybrid",
           "slice_head", "train_student"]
