"""tristream: a self-contained three-stream temporal network toolkit for
sEMG hand-gesture classification, with its own tensor core, reverse-mode
autodiff, training pipeline, and portable binary formats (EMGB datasets,
TSW1 checkpoints)."""

from .autodiff import GradReport, backward, finite_diff_grad, gradcheck
from .conv import (Conv1dKernel, conv1d_anticausal, conv1d_causal,
                   depthwise_conv1d, pointwise_conv1d)
from .data import (PreprocessConfig, Recording, WindowedDataset,
                   add_gaussian_noise, augment_with_noise, load_emgb,
                   save_emgb, slice_windows, split_ratio, split_repetition,
                   synth_generate, zscore)
from .errors import (ConfigError, DataError, GradientError, NumericError,
                     ShapeError, TristreamError)
from .layers import (ChannelAttentionParams, LstmParams, SeBlockParams,
                     SeparableParams, TcnBlockParams, bilstm, bitcn,
                     channel_attention, dense, dropout, lstm_cell, lstm_scan,
                     receptive_field, se_block, separable_stack, tcn_block,
                     tcn_stack)
from .model import (AblationFlags, FlopsReport, ModelConfig, ModelParams,
                    StreamAConfig, StreamBConfig, StreamCConfig, build,
                    count_flops, forward, load_checkpoint, save_checkpoint,
                    tiny_config)
from .rng import RngState
from .tensor import (Tensor, add, add_bias, avg_pool_time, concat_channels,
                     elementwise, matmul, mul, no_grad, relu, reverse_time,
                     scale_channels, sigmoid, softmax, sub, tanh, tsum)
from .train import (AdamState, MetricsReport, TrainConfig, adam_step, ablate,
                    cross_entropy, evaluate, fit, gradcheck_model, init_adam,
                    make_train_config, metrics_from_predictions)

__version__ = "0.1.0"
