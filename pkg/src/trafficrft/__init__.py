"""Tokenized multi-agent traffic simulation with closed-loop and reward-driven fine-tuning.

The package is organised bottom-up:

- :mod:`~trafficrft.scenario` scene data model, synthetic generator, JSON I/O
- :mod:`~trafficrft.tokenizer` k-disks motion vocabulary and track tokenization
- :mod:`~trafficrft.policy_model` the attention policy, losses and optimizer
- :mod:`~trafficrft.rollout` closed-loop sampling and CAT-K rollouts
- :mod:`~trafficrft.realism_metrics` Realism Meta analog and minADE
- :mod:`~trafficrft.training` BC, CAT-K SFT, MPO, GRPO and evaluation
- :mod:`~trafficrft.pipeline` run configs, staged runs, sweeps
- :mod:`~trafficrft.cli` the ``trafficrft`` command
"""

from .policy_model import Checkpoint, ModelConfig, Parameters, init_params, load_checkpoint, save_checkpoint
from .realism_metrics import MetricReport, realism_meta, score_rollouts
from .rollout import SamplingSpec, batch_rollouts, rollout, rollout_catk
from .scenario import Scenario, generate_synthetic, load_scenario, save_scenario, validate
from .tokenizer import Vocabulary, build_vocab, detokenize, tokenize
from .training import TrainConfig, evaluate, train_bc, train_rft_grpo, train_rft_mpo, train_sft_catk

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "MetricReport",
    "ModelConfig",
    "Parameters",
    "SamplingSpec",
    "Scenario",
    "TrainConfig",
    "Vocabulary",
    "batch_rollouts",
    "build_vocab",
    "detokenize",
    "evaluate",
    "generate_synthetic",
    "init_params",
    "load_checkpoint",
    "load_scenario",
    "realism_meta",
    "rollout",
    "rollout_catk",
    "save_checkpoint",
    "save_scenario",
    "score_rollouts",
    "tokenize",
    "train_bc",
    "train_rft_grpo",
    "train_rft_mpo",
    "train_sft_catk",
    "validate",
]
