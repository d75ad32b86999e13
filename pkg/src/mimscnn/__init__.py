"""Multi-instance, multi-scale CNN for weakly labelled image bags, on numpy."""

from .config import ConfigError, ExperimentConfig
from .harness import compare_pools, evaluate, feature_corr, train
from .localization import contribution_map, localize_bag, quantize_rectify, upsample_overlay
from .metrics import auroc, pearson
from .model import Bag, MIMSModel, build_model, load_checkpoint, model_forward, save_checkpoint
from .msconv import MSConvConfig, MSConvLayer
from .pooling import TopKPool, pool_bag, topk_pool
from .synth import SyntheticSpec, generate, load_dataset, save_dataset, write_benchmark
from .tensor import Parameter, Tensor, backward, grad_check, no_grad, precision

__version__ = "0.1.0"
