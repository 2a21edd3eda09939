"""Temporal alignment and modular behavioural cloning from task sketches."""

from .alignment import (
    AlignmentLattice,
    Sketch,
    SoftAlignment,
    Trajectory,
    brute_force_joint,
    brute_force_sketch_prob,
    ctc_forward,
    ctc_stop_targets,
    decode_argmax,
    enumerate_paths,
    soft_alignment,
    taco_forward,
)
from .autodiff import Tensor, finite_difference_check
from .evaluation import (
    EvalConfig,
    alignment_accuracy,
    evaluate_policies,
    oracle_policies,
    rollout,
    subtask_accuracy,
    task_accuracy,
)
from .navworld import (
    DartNoise,
    WorldConfig,
    generate_dataset,
    generate_demo,
    load_dataset,
    save_dataset,
)
from .policy import (
    PolicyLibrary,
    SubPolicy,
    SubtaskClassifier,
    action_log_prob,
    classifier_log_probs,
    init_classifier,
    init_library,
    init_policy,
    load_checkpoint,
    sample_action,
    save_checkpoint,
    stop_prob,
)
from .training import (
    Dataset,
    DemoItem,
    TrainConfig,
    TrainReport,
    adaptive_step,
    gt_bc_loss,
    taco_loss,
    train,
)

__version__ = "0.1.0"
