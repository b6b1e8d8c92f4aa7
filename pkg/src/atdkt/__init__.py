"""Knowledge-tracing engine.

An LSTM response predictor over KC-expanded interaction sequences,
jointly trained with two auxiliary tasks: tagging each question with its
knowledge components from a causal-attention question encoder, and
regressing the student's running scoring rate from the hidden state.
"""

__version__ = "0.1.0"

from .data import (Batch, FoldAssignment, FoldSplit, InteractionSequence,
                   RawInteraction, Step, build_qt_targets,
                   compute_scoring_rates, dataset_stats, expand_kc_level,
                   filter_and_truncate, infer_dims, kfold_split,
                   load_interactions, load_prepared, make_batch,
                   save_prepared, select_sequences)
from .errors import (AtdktError, ConfigError, DataError, EvaluationError,
                     MetricError, NotFittedError, ShapeError, TrainingError)
from .estimator import ATDKT
from .evaluation import (FEEDBACK_MODES, FRACTION_GRID, MultiStepConfig,
                         export_fused_embeddings, export_states,
                         multistep_eval, observed_steps, one_step_eval,
                         predict_records)
from .metrics import PredictionRecord, accuracy, auc, load_records, save_records
from .model import (VARIANTS, ForwardOutput, ModelConfig, ModelParams,
                    StepOutputs, embed_step, forward_batch, forward_sequence,
                    fuse, ik_head, init_params, kt_head, load_checkpoint,
                    loss_ik, loss_kt, loss_qt, lstm_step, param_shapes,
                    qt_head, question_encoder, run_recurrence,
                    save_checkpoint, total_loss)
from .optim import Adam
from .synth import (SynthResult, SynthSpec, generate, load_truth,
                    oracle_auc_bound, save_dataset, save_truth)
from .tensor import Tensor, backward, no_grad
from .training import (ABLATION_ORDER, HYPERPARAM_GRID, CVReport, FoldResult,
                       TrainConfig, ablation_run, hyperparam_search, run_cv,
                       train_fold)

__all__ = [name for name in dir() if not name.startswith("_")]
