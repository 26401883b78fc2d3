"""Shadow-aware dynamic convolution: a two-branch conv that spends dense compute only on shadow pixels."""
from .checkpoint import load_checkpoint, save_checkpoint
from .dataio import SynthConfig, Triplet, load_image, load_mask, save_image, scan_istd, synth_triplets
from .estimator import ShadowRemover
from .metrics import psnr, region_report, region_rmse_lab, rgb_to_lab, ssim
from .morphology import boundary_masks, dilate, erode, required_dilation
from .objective import Lambda2Schedule, intra_distill_loss, lambda2, total_loss
from .perf import BenchConfig, benchmark, count_macs_instrumented, flops_from_mask, flops_model
from .sadc import (ActiveSet, SadcBlock, SadcNet, gather_active, net_forward, sadc_test_forward,
                   sadc_train_forward, scatter_active)
from .tensor import GradTape, Tensor, backward, conv2d, leaky_relu, masked_merge
from .trainer import TrainConfig, evaluate, fit

__version__ = "0.1.0"
