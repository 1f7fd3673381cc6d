"""Debiased cross-modal background-music matching lab.

Synthetic confounded data with known ground truth, a teacher network
trained on expert-matched pairs, a student network with a causal
genre-preference deconfounder and KL knowledge transfer, and
popularity-debiased ranking evaluation under intervened test splits.
"""

from .datamodel import (
    Dataset,
    GenrePreference,
    InteractionTriplet,
    MicroVideo,
    MusicClip,
    Uploader,
    genre_distribution,
    music_popularity_table,
    preference_entropy,
)
from .synthgen import (
    GenConfig,
    GroundTruth,
    SplitSpec,
    generate_pgc,
    generate_ugc,
    genre_ratio_intervention,
    materialize_split,
    sample_diverse_test,
    sample_matching_test,
    split_strong_generalization,
)
from .teacher import TeacherHyper, TeacherModel, impute_labels, infer_teacher_latents, teacher_loss, train_teacher
from .student import (
    RankingResult,
    StudentHyper,
    StudentModel,
    batch_average_preference,
    deconfound,
    global_average_preference,
    rank_music,
    student_loss,
    train_student,
)
from .evalkit import MetricsReport, SamplerSpec, evaluate, ndcg_at_k, recall_at_k, video_weight
from .config import ExperimentConfig
from .pipeline import compare_runs, run_pipeline, run_sweep

__version__ = "0.1.0"
