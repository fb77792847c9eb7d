"""Reward model, PPO with a KL leash, and DPO."""

from .common import KlEstimate, ReferencePolicy, kl_estimate, sequence_logprob, token_logprobs
from .dpo import DpoConfig, dpo_loss, dpo_train, epoch_margins
from .ppo import PpoConfig, PpoTrainer, clipped_surrogate, collect_rollout, gae, ppo_step, ppo_train, rm_scorer, whiten
from .reward import RewardConfig, RewardModel, pairwise_accuracy, pairwise_loss, rm_score, train_reward

__all__ = [
    "DpoConfig",
    "KlEstimate",
    "PpoConfig",
    "PpoTrainer",
    "ReferencePolicy",
    "RewardConfig",
    "RewardModel",
    "clipped_surrogate",
    "collect_rollout",
    "dpo_loss",
    "dpo_train",
    "epoch_margins",
    "gae",
    "kl_estimate",
    "pairwise_accuracy",
    "pairwise_loss",
    "ppo_step",
    "ppo_train",
    "rm_score",
    "rm_scorer",
    "sequence_logprob",
    "token_logprobs",
    "train_reward",
    "whiten",
]
