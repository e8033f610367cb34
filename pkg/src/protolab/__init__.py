"""Emergent-protocol laboratory: a teacher/student signalling game with a
differentiable discrete channel, channel randomizations that reward
general protocols over idiosyncratic ones, and metrics for judging what
a trained pair of agents actually learned to say.
"""

from .agent import (AgentConfig, PolicyParams, act, act_batch, init_params,
                    initial_state, load_checkpoint, save_checkpoint, zero_params)
from .analysis import (capacity_calc, establishment_probe, plugin_mi_bits,
                       positive_listening_test, positive_signalling_test)
from .autodiff import (ArrayOps, RMSpropState, Tape, Tensor, TensorOps,
                       backward, rmsprop_step)
from .channel import (ChannelConfig, MODE_TEST, MODE_TRAINING, MUTATION_KIND,
                      MUTATION_OFF, MUTATION_UNKIND, anneal_temperature,
                      apply_permutation, mutate_batch, sample_permutation,
                      transmit_test, transmit_train)
from .env import (EpisodeState, Observation, ObservationSpace,
                  build_observation_space, encode_label, read_traces, reset,
                  sample_episode_batch, step, write_traces)
from .errors import (CheckpointError, ConfigurationError, ProtolabError,
                     TrainingDivergedError, UsageError)
from .evaluation import (clean_channel, heatmaps, performance,
                         protocol_diversity, responsiveness_student,
                         responsiveness_teacher, run_episodes,
                         selfplay_accuracy, zcp)
from .losses import cce, loss_ac, loss_pd, loss_sic, loss_tm, total_loss
from .training import TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "AgentConfig", "ArrayOps", "ChannelConfig", "CheckpointError",
    "ConfigurationError", "EpisodeState", "MODE_TEST", "MODE_TRAINING",
    "MUTATION_KIND", "MUTATION_OFF", "MUTATION_UNKIND", "Observation",
    "ObservationSpace", "PolicyParams", "ProtolabError", "RMSpropState",
    "Tape", "Tensor", "TensorOps", "TrainConfig", "TrainResult",
    "TrainingDivergedError", "UsageError", "act", "act_batch",
    "anneal_temperature", "apply_permutation", "backward",
    "build_observation_space", "capacity_calc", "cce", "clean_channel",
    "encode_label", "establishment_probe", "heatmaps", "init_params",
    "initial_state", "load_checkpoint", "loss_ac", "loss_pd", "loss_sic",
    "loss_tm", "mutate_batch", "performance", "plugin_mi_bits",
    "positive_listening_test", "positive_signalling_test",
    "protocol_diversity", "read_traces", "reset", "responsiveness_student",
    "responsiveness_teacher", "rmsprop_step", "run_episodes",
    "sample_episode_batch", "sample_permutation", "save_checkpoint",
    "selfplay_accuracy", "step", "total_loss", "train", "transmit_test",
    "transmit_train", "write_traces", "zcp", "zero_params",
]
