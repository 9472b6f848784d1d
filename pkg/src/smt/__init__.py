"""Sparse manifold transform: sparse patch codes plus a closed-form spectral embedding."""
from .core import (
    CooccurrenceStats,
    SpectralEmbedding,
    accumulate_neighborhood,
    accumulate_pair,
    accumulate_second_moment,
    solve_embedding,
)
from .dataset_io import ImageDataset, load_cifar_binary, load_dataset, load_mnist_idx
from .dictionary import Dictionary, kmeans_fit, sample_dictionary
from .evaluation import KnnConfig, knn_accuracy, soft_knn_classify
from .pipeline import ExperimentConfig, run_ablation, run_pipeline
from .preprocess import WhiteningOperator, fit_whitening, whiten
from .representation import PipelineConfig, SMTModel
from .sparse_features import SparseCode, encode_gq, encode_vq

__version__ = "0.1.0"
