"""Factorized dataset distillation toolkit.

A training set is distilled into a small set of labeled bases plus
hallucinator networks; any basis composed with any hallucinator yields a
synthetic training image, so the reachable image count is the product of the
two set sizes.  Training plays an adversarial contrastive min-max game on top
of a pluggable distillation objective (trajectory, gradient, or distribution
matching), and evaluation trains downstream classifiers with online
basis-hallucinator composition.
"""

from .dataio import (ImageDataset, ZCAStats, apply_zca, apply_zca_inverse, fit_zca,
                     load_dataset, make_blob_dataset, sample_class_balanced)
from .ddmatch import (ExpertTrajectory, MatchConfig, distribution_matching_loss,
                      gradient_matching_loss, record_expert, trajectory_matching_loss,
                      trajectory_ratio)
from .distill import (DistillConfig, DistillState, budget_report, run_distillation,
                      step_adversary, step_synthetic)
from .errors import (DataLoadError, DegenerateGridWarning, FormatError, NumericsError,
                     UsageError)
from .evalharness import (EvalConfig, EvalResult, baseline_same_budget,
                          cross_architecture_eval, train_downstream)
from .factor import (Basis, BudgetReport, ComposedBatch, FactorizedDataset, Hallucinator,
                     compose, compose_batch, compose_pairs, count_parameters,
                     hallucinator_param_count, init_factorization)
from .nets import (FeatureOutput, ModelParams, ModelSpec, build_model, forward, param_count,
                   sgd_step)
from .objectives import (LossWeights, adversary_loss, contrastive_loss, cosine_loss,
                         dsa_augment, synthetic_loss, task_loss)
from .store import (export_images, fd_fingerprint, load_checkpoint, save_checkpoint,
                    serialize_bytes)

__version__ = "0.1.0"
