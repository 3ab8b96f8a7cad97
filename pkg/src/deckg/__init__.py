"""Deterministic simulator of decentralized, knowledge-graph enhanced POI recommendation."""

from .domain import (CheckInHistory, CheckInRecord, DataError, DeckgError, Hyperparams, NumericalError,
                     PoiCatalog, Triple, register_catalog)
from .estimator import DecKGRecommender
from .kgstore import KnowledgeGraph, SubKnowledgeGraph, partition_subkg, reachable_heads
from .neighbors import NeighborAssigner
from .orchestrator import Ablation, SimulationConfig, run_pipeline, simulate, sweep
from .pretrain import KGPretrainer
from .privacy import ExponentialDesensitizer, RandomResponse

__version__ = "0.1.0"

__all__ = [
    "Ablation", "CheckInHistory", "CheckInRecord", "DataError", "DecKGRecommender", "DeckgError",
    "ExponentialDesensitizer", "Hyperparams", "KGPretrainer", "KnowledgeGraph", "NeighborAssigner",
    "NumericalError", "PoiCatalog", "RandomResponse", "SimulationConfig", "SubKnowledgeGraph", "Triple",
    "partition_subkg", "reachable_heads", "register_catalog", "run_pipeline", "simulate", "sweep",
]
