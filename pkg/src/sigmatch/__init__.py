"""Metric-learned signatures over precomputed feature vectors, with one-shot
template matching and yield/FPR/accuracy benchmarking."""

__version__ = "0.1.0"

from .embedder import (EmbeddingNetwork, NetworkConfig, backward, forward, init_kaiming,
                       load_model, save_model)
from .featurestore import Dataset, generate_synthetic, load_dataset, save_dataset, split_dataset
from .losses import (QuadrupletMargins, TripletMargin, autoencoder_loss, batch_quadruplet_loss,
                     batch_triplet_loss, quadruplet_loss, triplet_loss, triplet_loss_grad)
from .matcher import TemplateDB, cosine_distance, load_db, match, match_batch, save_db
from .metrics import (ConfusionCounts, accuracy, benchmark, fpr, roc_sweep, tally, yield_rate)
from .mining import (MiningConfig, Quadruplet, Triplet, compose_batch, mine_offline,
                     mine_quadruplets, mine_semi_hard)
from .trainer import TrainConfig, train, train_autoencoder, validate
