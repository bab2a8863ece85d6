"""Ontology-weighted contrastive pretraining and distillation for vitals encoders."""

from .analysis import linear_probe, neighbor_analysis
from .backend import active_backend
from .config import RunConfig, config_hash, render_config, resolve_config
from .data import CohortBundle, SynthConfig, assign_splits, load_cohort, \
    save_cohort, synthesize
from .distill import DistillConfig, finetune, kd_loss, predict_student, \
    predict_teacher, train_student, train_teacher
from .encoders import EncoderConfig, encode_vitals
from .errors import ConfigError, DataError, NumericError, OntoclrError, \
    TaskMismatch
from .metrics import auprc, auroc, bootstrap_ci, mann_whitney_u, score_report
from .ontology import OntologyTree, format_ontology, load_ontology
from .pretrain import AugmentConfig, PretrainConfig, embed_cohort, ow_ntxent, \
    pretrain
from .similarity import DiagnosisSet, WeightSpec, batch_weight_matrix, \
    cohort_weight_cache, patient_similarity, weight

__version__ = "0.1.0"
