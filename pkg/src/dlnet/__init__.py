"""Restoration networks with a K-step latent refinement against the degradation fidelity."""

from . import autodiff, data, degrade, metrics, net, refine, train
from .autodiff import Tensor, grad, grad_check, no_grad
from .degrade import DegradationSpec, apply_degradation, parse_spec, sample_spec, serialize_spec
from .metrics import EvalReport, evaluate, psnr
from .net import Network, build_autoencoder, build_sisr_net, load_checkpoint, param_count, save_checkpoint
from .refine import InnerHyper, InnerState, adam_inner_step, fidelity, inner_refine, restore
from .train import TrainCfg, train as fit

__version__ = "0.1.0"
