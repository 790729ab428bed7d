"""Federated-learning simulator with class-aware gradient-masking aggregation."""

from .aggregation import (ClientUpdate, Mask, MaskConfig, MaskedAggregator, agg_fedavg,
                          agg_fednova, agg_nwfedavg, agg_scaffold, build_mask, masked_aggregate,
                          masked_round, update_mask)
from .config import ExperimentConfig, load_config
from .harness import compare_runs, emit_metrics, run_experiment
from .nn import LayerLayout, ParamVector

__version__ = "0.1.0"
