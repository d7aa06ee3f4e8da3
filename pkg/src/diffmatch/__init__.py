"""Semantic correspondence from optimized prompt embeddings of a frozen latent-diffusion denoiser."""
from .core import Config, HyperParams, ImageRecord, Point, PromptEmbedding, load_config
from .infer import MatchResult, localize, match_keypoints
from .optim import EmbeddingEnsemble, optimize_embedding, optimize_ensemble
from .evaluation import PckReport, pck

__version__ = "0.1.0"

__all__ = ["Config", "EmbeddingEnsemble", "HyperParams", "ImageRecord", "MatchResult",
           "PckReport", "Point", "PromptEmbedding", "load_config", "localize", "match_keypoints",
           "optimize_embedding", "optimize_ensemble", "pck"]
