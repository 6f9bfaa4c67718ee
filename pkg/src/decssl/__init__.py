"""Decentralized self-supervised learning in the linear theory setting.

Data generation and partitioning, linear SSL objectives with exact spectral
oracles, FedAvg/gossip simulation, feature-alignment clustering, linear
probing, and a config-driven experiment runner.
"""

from .datagen import (
    LocalDataset,
    PartitionSpec,
    TheoryGenConfig,
    generate_theory_dataset,
    heterogeneity_emd,
    partition_dirichlet,
    partition_feature_clusters,
    partition_skewness,
)
from .evaluation import ProbeResult, feature_alignment_score, linear_probe, probe_featarc, weight_distance
from .featarc import ClusterState, FeatArcConfig, run_featarc
from .fedsim import FedConfig, NumericalDivergence, TrainingTrace, build_topology, run_decentralized, run_fedavg
from .objectives import InfeasibleOrUnconverged, LinearEncoder, margin_problem_solve, min_norm_factorize
from .spectral import principal_angle, representability, ssl_minimizer_oracle, symmetric_eig

__version__ = "0.1.0"
