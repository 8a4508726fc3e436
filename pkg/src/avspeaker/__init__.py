"""Audio-visual masked-prediction pretraining and speaker embeddings on synthetic data."""

__version__ = "0.1.0"
