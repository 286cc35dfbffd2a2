"""Supervised COSMOS autoencoder: cosine + Mahalanobis reconstruction with MI supervision."""
from .data import DataBatch, load_cifar10, load_idx, split, synth_gaussian_classes
from .losses import (LossBreakdown, LossTerms, cosine_loss, euclidean_loss, mahalanobis_loss,
                     mutual_information, supervised_cosmos_loss)
from .model import CosmosModel, backward, extract_features, forward, init_model
from .numeric import AdamState, adam_step, finite_diff_grad, init_weights, matmul
from .pipeline import PatchSpec, StreamEnsemble, extract_patches, predict, score_distributions, train_pipeline
from .training import Hyperparams, TrainReport, alt_min_epoch, grid_search_lambdas, lambda_schedule, train

__version__ = "0.1.0"
