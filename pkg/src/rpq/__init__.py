"""Routing-guided product quantization for graph-based approximate nearest
neighbor search.

The rotation and PQ codebook are trained from the decisions a beam search makes
on a proximity graph, so that compressed distances rank candidates the way
exact distances would.
"""

__version__ = "0.1.0"

from .dataset import (
    GroundTruth,
    VectorDataset,
    VectorFormatError,
    compute_ground_truth,
    load_ground_truth,
    load_vectors,
    make_sift_like,
    make_synthetic,
    save_ground_truth,
    save_vectors,
)
from .graph import ProximityGraph, SearchResult, beam_search, build_graph, load_graph, recall_at_k, save_graph
from .pq import Codebook, LookupTable, build_lookup, decode, encode, train_codebook
from .rotation import SkewParam, matrix_exponential
from .scenarios import HybridStore, check_budget, search_hybrid, search_in_memory
from .trainer import QuantizerModel, TrainingConfig, fit, init_model, load_checkpoint, save_checkpoint

__all__ = [
    "__version__",
    "Codebook",
    "GroundTruth",
    "HybridStore",
    "LookupTable",
    "ProximityGraph",
    "QuantizerModel",
    "SearchResult",
    "SkewParam",
    "TrainingConfig",
    "VectorDataset",
    "VectorFormatError",
    "beam_search",
    "build_graph",
    "build_lookup",
    "check_budget",
    "compute_ground_truth",
    "decode",
    "encode",
    "fit",
    "init_model",
    "load_checkpoint",
    "load_graph",
    "load_ground_truth",
    "load_vectors",
    "make_sift_like",
    "make_synthetic",
    "matrix_exponential",
    "recall_at_k",
    "save_checkpoint",
    "save_graph",
    "save_ground_truth",
    "save_vectors",
    "search_hybrid",
    "search_in_memory",
    "train_codebook",
]
