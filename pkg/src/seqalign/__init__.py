"""Sequential entity alignment with a policy-gradient agent over pre-trained KG embeddings."""

__version__ = "0.1.0"
