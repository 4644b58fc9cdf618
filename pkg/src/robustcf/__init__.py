"""Robust counterfactual explanations for binary tabular classifiers."""

from .cfgen import (CfConfig, CounterfactualSet, LossTrace, LossWeights,
                    dice_sorensen, diversity_score, generate_blackbox,
                    generate_gradient, kernel_matrix, proximity_loss,
                    robustness_loss, sparsity, total_loss,
                    total_loss_gradient, y_loss)
from .data import (Dataset, Encoder, Feature, FeatureSchema, load_csv, mad,
                   raw_mads, synthetic_dataset, synthetic_neighbors,
                   train_test_split)
from .fidelity import fidelity_score, fit_1nn
from .harness import (DatasetSpec, ExperimentConfig, desk_config,
                      grid_search_lambda_r, run_experiment)
from .metrics import MetricsReport, evaluate, robustness_eval, validity
from .model import (ForestModel, MlpModel, ModelBundle, TrainConfig,
                    load_model, mlp_forward, mlp_input_gradient,
                    predict_class, save_model, train_forest, train_mlp)
from .stats import (DegenerateDifferences, PairedTestResult, paired_t_test,
                    student_t_cdf, summarize, two_tailed_p)

__version__ = "0.1.0"
