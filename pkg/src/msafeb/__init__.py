"""Multi-scale attention feature extraction toolkit on a numpy autodiff core."""

from .tensor import (GraphError, GraphTape, NumericalError, ShapeError, Tensor,
                     concat_channels, dense, elementwise, grad_check,
                     narrow_channels, no_grad, set_checked)
from .layers import (BatchNorm2d, ConfigError, Conv2d, ConvSpec, Dense,
                     batch_norm, conv2d, dropout, global_avg_pool,
                     softmax_cross_entropy)
from .block import (AttentionKind, MsafebBlock, MsafebConfig, enumerate_params,
                    gap_branches, param_count)
from .backbone import Backbone, BackboneConfig
from .serialize import (FormatError, load_checkpoint, read_features,
                        save_checkpoint, write_features)
from .data import (AugmentFlags, DataError, Dataset, DatasetSplit, augment,
                   load_image_dataset, make_splits, read_ppm, synth_dataset,
                   to_batch, write_ppm)
from .model import Model, assemble_model, build_model_from_config, model_config
from .train import (Adam, EarlyStopper, Metrics, TrainConfig, evaluate,
                    run_protocol, train)
from .stats import WelchResult, reg_inc_beta, t_survival, welch_t_test
from .gradcam import GradCamMap, grad_cam, render_heatmap

__version__ = "0.1.0"
