"""Siamese fashion-compatibility metric learning with MAP priors."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (DatasetSplit, Item, Outfit, PairSample, gen_negative_pairs,
                   gen_positive_pairs, load_dataset, make_pairs, save_dataset, synth_generate,
                   write_synthetic)
from .evaluation import (ConstantScorer, DistanceScorer, EvalReport, ModelScorer, build_pools,
                         evaluate, lift_at_k, precision_at_k, random_baseline, recommend)
from .features import color_histogram, hadamard, hog, read_ppm, write_ppm
from .model import CompatModel, ItemFeatures, ModelConfig
from .objective import (CovarianceState, RegWeights, bce_loss, covariance_update, psd_sqrt,
                        total_loss, trace_reg, trace_reg_grad)
from .store import ItemStore, PairSet
from .trainer import TrainConfig, TrainLog, fit, grid_search, train_epoch, update_covariances

__version__ = "0.1.0"
