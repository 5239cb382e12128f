"""Supplementary training on intermediate labeled-data tasks, at desk scale.

A numpy reverse-mode autodiff engine drives a small Transformer encoder
through LM pretraining, an intermediate supervised task and a target task,
alongside multitask baselines, restart sweeps and GLUE-style scoring.
"""

from .autodiff import AdamState, Graph, TrainingAborted, adam_step, grad_check, lr_schedule
from .datakit import (Dataset, Example, SynthConfig, TaskSpec, Vocab, build_vocab, downsample,
                      gen_fake_sentences, gen_synthetic_pair_tasks, load_tsv, tokenize)
from .encoder import EncoderConfig, Head, init_params, swap_head
from .experiment import Experiment
from .harness import comparison_grid, degenerate_count, run_restarts, stability_export
from .metrics import best_of_each, glue_aggregate, same_task_substitution
from .pipeline import PhaseConfig, RegimePlan, RunRecord, pretrain_lm, run_multitask, run_phase, run_stilts
from .store import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
