"""Hybrid car-following modelling: time-varying IDM calibration plus a neural process."""

from .idm import (DomainError, IdmParams, KinematicState, ParamBounds, TrafficCondition, ballistic_step,
                  desired_spacing, equilibrium_spacing, gof_rmse, idm_acceleration, simulate_follower)
from .trajectory import (CFEpisode, ColumnMap, DataError, ExtractionConfig, GenerationError, SchemaError,
                         extract_cf_episodes, generate_synthetic_episode, load_trajectories, read_episode,
                         write_episode)
from .calibration import (CalibConfig, GaussianParams, ParamPosteriorSeries, calibrate_fixed,
                          calibrate_time_varying, closed_loop_rmse, fit_gaussian, per_step_gof, read_posterior,
                          write_posterior)
from .neural_process import (NPArch, NPModel, TrainConfig, TrainingError, encode_deterministic, encode_latent,
                             decode, load_model, np_loss, predict, save_model, train)
from .style import (StyleMapping, aggressiveness_index, differential_sequences, fit_mapping, fit_pca,
                    fit_style_map, population_scaling, style_from_index)
from .simulation import SafetyConfig, SimResult, simulate_with_style, summarize, ttc

__version__ = "0.1.0"
