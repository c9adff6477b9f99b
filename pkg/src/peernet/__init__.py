"""Multi-stream video networks with learned connections and peer-attention."""

__version__ = "0.1.0"
