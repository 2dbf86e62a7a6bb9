"""Synthetic data, staged training, evaluation metrics and the trend experiment."""
from .config import MiningConfig, RunConfig, TrainConfig, load_config, parse_config
from .data import Dataset, NuisanceRanges, Split, SyntheticIdentity, gen_dataset
from .pipeline import STAGES, build_model, embeddings_and_logits, load_model, run_outputs, save_model
from .train import TrainResult, prerequisites, train_all, train_stage
