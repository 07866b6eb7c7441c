"""Adaptive temporal-uncertainty feature selection for cooperative perception."""

from .grids import (FeatureGrid, GridError, LinearMap, Rng, apply_linear,
                    grid_from_array, l1_deviation, new_feature_grid, zeros_grid)
from .harness import (EpisodeMetrics, Scenario, ScenarioConfig,
                      adaptation_correlation, experiment_suite,
                      generate_scenario, iou, run_episode, spearman)
from .model import FrameSample, PipelineConfig, SelectionModel, soft_selection
from .netsim import (DeliveryRecord, NetworkConfig, apply_loss_mask,
                     bandwidth_mbps, budget_fraction, transmit)
from .protocol import (ChannelMask, CompressionConfig, Pose, RequestMessage,
                       ResponseMessage, decode_request, decode_response,
                       encode_request, encode_response, fuse, lossless_pack,
                       lossless_unpack, quantize, dequantize, relative_pose,
                       spatial_transform)
from .relevance import (AttentionParams, MaskThreshold,
                        cross_attention_relevance, select_channels,
                        selected_fraction, soft_mask)
from .training import (BatchChoice, LagrangeState, TrainConfig,
                       epsilon_greedy_choice, grad_check,
                       initial_lagrange_state, load_checkpoint,
                       proposition1_test, save_checkpoint, total_loss, train,
                       update_lambda)
from .uncertainty import (QuantileGate, channel_uncertainty, gate_scores,
                          quantile_threshold)

__version__ = "0.1.0"
