"""Desk-scale lab for adversarially robust class-incremental learning."""

__version__ = "0.1.0"

from .attacks import AttackConfig, fgsm, parse_rational, pgd
from .continual import (HerdingBuffer, ReservoirBuffer, Schedule, TaskStream,
                        buffer_update_herding, herding_select, reservoir_update,
                        run_task, slice_logits, split_dataset)
from .data import (AugmentPolicy, Dataset, augment, gen_gaussian_tasks,
                   load_csv_dataset, save_csv_dataset)
from .losses import (LogitSlice, ace, bce_multilabel, ce, kl_div, mse,
                     one_hot, one_hot_in_slice, sigmoid, slice_bounds)
from .methods import (MethodConfig, RegState, build_training_loss, flair_loss,
                      flatness_distill_loss, make_method_config,
                      separated_logit_loss, update_reg_state)
from .metrics import (AccuracyMatrix, FlatnessReport, accuracy,
                      flatness_forgetting, landscape_grid, r_bwt,
                      robust_accuracy)
from .network import (Layer, Network, ParamNodes, ParamView, expand_head,
                      grad_input, grad_params, hessian_input, sgd_step,
                      snapshot)
from .runner import (ExperimentConfig, RunReport, config_from_dict,
                     emit_report, expand_grid, load_checkpoint, load_config,
                     run_experiment, save_checkpoint)
