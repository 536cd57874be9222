"""From-scratch GRU breaker-status classifier.

Submodules:
  params   - weight container, initialization, JSON persistence
  kernels  - batched forward/backward kernels (compiled or numpy backend)
  model    - single-cell and whole-sequence APIs over the kernels
  dataset  - sweep-driven dataset generation, CSV I/O, split, normalization
  train    - Adam optimizer and the minibatch training loop
"""

from .params import GruParams, VARIANTS, init_params, load_params, save_params
from .model import cell_forward, forward_batch, forward_sequence, sequence_gradients
from .dataset import Dataset, DatasetCase, NormStats, SweepSpec, generate_dataset, split_cases
from .train import AdamState, TrainConfig, TrainResult, adam_step, train

__all__ = [
    "GruParams", "VARIANTS", "init_params", "load_params", "save_params",
    "cell_forward", "forward_batch", "forward_sequence", "sequence_gradients",
    "Dataset", "DatasetCase", "NormStats", "SweepSpec", "generate_dataset", "split_cases",
    "AdamState", "TrainConfig", "TrainResult", "adam_step", "train",
]
