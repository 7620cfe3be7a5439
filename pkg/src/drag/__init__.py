"""Multi-relation graph attention for fraud detection, with its own autodiff core."""

from .graph import MultiRelationGraph, SyntheticSpec, add_self_loops, gen_synthetic, load_graph, split_labels
from .metrics import EvalResult, auc, f1_macro
from .model import AblationMode, DragParams, HyperParams, forward, init_params
from .train import TrainConfig, grid_search, run_ablations, run_protocol, train_model

__version__ = "0.1.0"
