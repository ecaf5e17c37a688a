"""Robust dataset distillation with an attack-scored curriculum, a contrastive
robustness objective, and an attack/evaluation harness."""

from .attacks import (AdvCompanion, ThreatSpec, WarmStartCache, cw_linf, default_threat,
                      fgsm, jitter, ls_pgd, mim, pgd, project_linf, vmi_fgsm)
from .contrastive import (MemoryQueue, PairSets, build_pair_sets, contrastive_loss,
                          cosine_similarity, enqueue, mean_match_loss,
                          retrieve_hard_negatives)
from .curriculum import (CurriculumBatch, SyntheticSampler, match_synthetic_batch,
                         order_by_score, score_epoch)
from .data import DatasetDescriptor, generate, load_image_array, save_dataset
from .distill import (DistillConfig, SyntheticDataset, combined_loss, default_eta,
                      distill_step, init_synthetic, load_synthetic, run_distillation,
                      save_synthetic)
from .errors import ConfigurationError, ContractError, IngestionError, NumericError
from .evaluation import (AttackSpec, EvalReport, default_attack_suite, drop_rate,
                         evaluate, train_student)
from .margin import (MarginRecord, estimate_robust_margin, logit_margin,
                     perturbation_score, robust_hinge, worst_case_index)
from .models import (LabeledBatch, Model, convnet3_build, cross_entropy, load_model,
                     mlp_build)

__version__ = "0.1.0"
