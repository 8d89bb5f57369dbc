"""Desk-scale federated-transfer-learning privacy laboratory."""

from .tensor import Tensor, backward, grad_check
from .models import (FeatureExtractor, FeatureExtractorSpec, Generator,
                     LinearHead, SpabHead, default_extractor_spec,
                     load_checkpoint, save_checkpoint)
from .data import Dataset, load_cifar10_binary, mislabel, sample_batch, synth_dataset
from .training import (PgdBudget, SpabTrainConfig, adversarial_train,
                       alpha_schedule, pgd_attack, sparsity_loss, spab_train)
from .federation import (DpConfig, GradientUpdate, aggregate, apply_dp,
                         clip_gradient, client_update, gaussian_sigma,
                         median_clean_norm, run_round)
from .leakage import (IrCandidate, dedupe_candidates, extract_candidate_irs,
                      leakage_rate_oracle)
from .reconstruction import (IrMatchConfig, ir_distance, ir_match,
                             preimage_attack)
from .detection import (make_identity_kernel, make_rtf_module, make_zero_kernel,
                        normalized_entropy, scan_model, structural_checksum)
from .metrics import psnr, reconstruction_rate, ssim

__version__ = "0.1.0"
