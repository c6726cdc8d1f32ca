"""Universal adversarial perturbations, adversarial fine-tuning and robustness
evaluation for graded image classifiers."""

from .analysis import (
    KappaScore,
    SignificanceResult,
    agreement_level,
    paired_ttest,
    quadratic_kappa,
    render_report,
)
from .attacks import (
    AttackConfig,
    PerturbationVector,
    deepfool,
    fgsm,
    fooling_ratio,
    generate_uap,
    load_perturbation,
    project_lp_ball,
    save_perturbation,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import LabeledDataset, generate_synthetic_dataset, split_perturb_robust, stratified_kfold
from .errors import UAPLabError
from .models import ClassifierModel, build_model, forward_logits, input_gradient, predict
from .preprocess import PreprocessConfig, preprocess_image
from .robustness import ModelZoo, adversarial_finetune, ensemble_predict, transfer_matrix
from .training import TrainConfig, train, two_stage_finetune

__version__ = "0.1.0"
