"""Open-set domain adaptation for hyperspectral scenes with decoupled
spectral/spatial alignment and a consistency-based unknown detector."""

from .alignment import KernelConfig, LossReport, decoupled_loss, mmd2
from .data import UNKNOWN_SENTINEL, DatasetMeta, HsiCube, LabelMap, PatchBatch, synth_pair
from .encoder import ArchConfig, Branch, encode, init_encoder
from .metrics import MetricsReport, compute_metrics
from .openset import GmmModel, consistency_scores, gmm_fit, unknown_mask
from .trainer import TrainConfig, TrainState, infer, train

__version__ = "0.1.0"
