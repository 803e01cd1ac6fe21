"""Counterfactual contrastive audio-text representation learning.

Train audio embeddings against factual captions and automatically generated
counterfactual captions, then evaluate with retrieval, zero-shot
classification, and fact-versus-counterfactual similarity audits.
"""

__version__ = "0.1.0"

from .errors import CfAudioError

__all__ = ["CfAudioError", "__version__"]
