"""Streamable text-aligned speech tokenizer at desk scale.

A causal encoder with a built-in CTC recognizer turns frames into text tokens
plus one quantized latent per token; an autoregressive decoder turns the
interleaved text/latent stream back into frame-rate units, chunk by chunk.
"""

__version__ = "0.1.0"

from .model import ModelConfig, Tokenizer, TokenRecord, model_config_for  # noqa: E402
from .synthcorpus import CorpusConfig, Utterance, generate_corpus  # noqa: E402
from .trainer import TrainConfig, load_model, run_training  # noqa: E402

__all__ = ["ModelConfig", "Tokenizer", "TokenRecord", "model_config_for", "CorpusConfig", "Utterance",
           "generate_corpus", "TrainConfig", "load_model", "run_training", "__version__"]
