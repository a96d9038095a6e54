"""Selective adversarial training guided by backtracked spatial attention."""

from aal.tensor import Tensor, Tape, grad_check
from aal.attention import (
    SpatialAttentionParams,
    AttentionState,
    spatial_attention,
    descend_attention,
    coupling_gain,
    rank_normalize,
    backtrack,
)
from aal.attack import (
    AttackConfig,
    PerturbationState,
    fgsm_delta,
    fgsm_ascent_delta,
    kernel_map,
    selective_perturbation,
    apply_attack,
    pgd,
)
from aal.model import SmallCnn, small_cnn
from aal.training import (
    TrainConfig,
    MetricsRow,
    aal_step,
    coupled_attack,
    attention_snapshot,
    sgd_update,
    cosine_lr,
    evaluate,
    train,
)
from aal.data import Dataset, load_mnist_idx, load_cifar10_bin, synthetic_digits, dump_attention_pgm
from aal.checkpoint import save_checkpoint, load_checkpoint

__version__ = "0.1.0"
