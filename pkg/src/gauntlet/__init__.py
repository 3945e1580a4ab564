"""Desk-scale image-CAPTCHA security testbed.

A simulated challenge/response service (sessions, probabilistic grading,
rate limits, single-use tokens, publisher credit) plus the classifier-
driven solver that attacks it, an exact probability oracle for every
measured quantity, and reproducible experiment scenarios."""

from .backends import (
    ConfusionMatrix,
    LabelSet,
    MultiLabelBackend,
    OracleBackend,
    RemoteLabelBackend,
    match_target,
)
from .core import (
    Category,
    Challenge,
    ConditionClass,
    DEFAULT_CATEGORIES,
    GradeCondition,
    GradePolicy,
    ImageTile,
    PromptType,
    Selection,
    challenge_pass_probability,
    classify_condition,
    condition_of,
)
from .hashkit import DuplicateReport, cluster_duplicates, exact_hash, hamming, phash64
from .profiles import ClientProfile, profile_preset
from .service import CaptchaService, DifficultyProfile, HmtLedger, ServiceConfig, threat_score
from .solver import DedupCache, SessionRecord, Solver
from .tiles import SynthSpec, TilePool, synth_tile

__all__ = [
    "CaptchaService",
    "Category",
    "Challenge",
    "ClientProfile",
    "ConditionClass",
    "ConfusionMatrix",
    "DEFAULT_CATEGORIES",
    "DedupCache",
    "DifficultyProfile",
    "DuplicateReport",
    "GradeCondition",
    "GradePolicy",
    "HmtLedger",
    "ImageTile",
    "LabelSet",
    "MultiLabelBackend",
    "OracleBackend",
    "PromptType",
    "RemoteLabelBackend",
    "Selection",
    "ServiceConfig",
    "SessionRecord",
    "Solver",
    "SynthSpec",
    "TilePool",
    "challenge_pass_probability",
    "classify_condition",
    "cluster_duplicates",
    "condition_of",
    "exact_hash",
    "hamming",
    "match_target",
    "phash64",
    "profile_preset",
    "synth_tile",
    "threat_score",
]
