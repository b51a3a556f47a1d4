"""Adaptive token pruning for small vision transformers.

A numpy-backed toolkit: a minimal autodiff tensor core, a configurable mini
ViT whose attention can be captured and masked mid-network, attention-derived
token importance scoring with fixed-count and adaptive mass-based selection,
an alternating dense/sparse training loop with optional teacher distillation,
and analytic FLOP accounting plus CPU throughput benchmarking.
"""

from .autograd import (
    Tensor, cross_entropy, gelu, grad_check, kl_divergence, layer_norm,
    matmul, no_grad, set_default_dtype, softmax, tensor, where,
)
from .checkpoint import Checkpoint, load_checkpoint, model_from_checkpoint, save_checkpoint
from .data import Dataset, gen_synthetic, load_cifar_binary, load_dataset
from .model import (
    AttentionRecord, ForwardOutput, ModelConfig, PrunePlan, VisionTransformer,
    deit_small_config, param_shapes, toy_config,
)
from .optim import AdamW, adamw_step
from .rng import Rng
from .sparsify import (
    PruneConfig, TokenMask, TokenScore, build_mask, cls_row_scores,
    column_sum_scores, compact, head_softmax_scores, plan, scatter_back,
    select_mass, select_value,
)
from .training import (
    EpochLog, TrainConfig, distill_loss, epoch_mode, evaluate, teacher_target,
    total_loss, train, train_epoch,
)
from .analysis import (
    BenchmarkResult, DensityStats, FlopReport, SweepResult, benchmark,
    dense_schedule, density_stats, execution_schedule, flops,
    sensitivity_sweep, uniform_schedule,
)

__version__ = "0.1.0"
